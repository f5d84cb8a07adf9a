"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


def numeric_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-5,
                 index: tuple[int, ...] | None = None) -> np.ndarray | float:
    """Central difference of the scalar ``fn()`` w.r.t. ``param``.

    With ``index`` only that coordinate is perturbed and a float is returned.
    ``fn`` must be deterministic (re-seed any dropout inside it).
    """
    def at(idx):
        old = param.data[idx]
        param.data[idx] = old + h
        up = fn()
        param.data[idx] = old - h
        down = fn()
        param.data[idx] = old
        return (up - down) / (2 * h)

    if index is not None:
        return at(index)
    out = np.zeros_like(param.data)
    for idx in np.ndindex(param.shape):
        out[idx] = at(idx)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    n_samples: int | None = None, h: float = 1e-5,
                    rng: np.random.Generator | None = None,
                    floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` builds the forward graph and returns a scalar tensor. When
    ``n_samples`` is given, that many coordinates are drawn at random across all
    parameters; otherwise every coordinate is checked.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        return float(loss_fn().data[0])

    coords = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    for i, idx in coords:
        num = numeric_grad(value, params[i], h, idx)
        worst = max(worst, relative_error(analytic[i][idx], num, floor))
    return worst
