"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Operations record themselves on the innermost active :class:`Tape`. Calling
:meth:`Tape.backward` replays the tape in reverse insertion order and
accumulates gradients into every leaf tensor created with ``requires_grad``.

    >>> w = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(w * w)
    >>> tape.backward(loss)
    >>> w.grad
    array([6.])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "Tape",
    "Node",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "linear_forward",
    "leaky_relu",
    "BatchNormState",
    "batch_norm",
    "dropout",
    "embedding_forward",
    "concat",
    "split_columns",
    "kron_identity",
    "sum_all",
    "mean_all",
    "mse_loss",
    "xavier_init",
    "OptimizerState",
    "adam_step",
    "Adam",
    "LrSchedule",
    "one_cycle_lr",
]


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {where}")
    return arr


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ValueError("tensor dimensions must be positive")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One recorded operation: inputs, output and the vector-Jacobian product."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["Tape"] = []


@dataclass
class Tape:
    """Ordered record of operations; insertion order is a topological order."""

    nodes: list[Node] = field(default_factory=list)
    visit_log: list[int] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        self.visit_log = []
        for pos in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[pos]
            self.visit_log.append(pos)
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.vjp(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                _check_finite(g, f"backward of {node.op}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if inp._leaf:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out._leaf = False
    out.requires_grad = bool(_TAPES) and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _TAPES[-1].record(Node(op, inputs, out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise / linear algebra ---------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def linear_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Dense layer ``x @ W + b`` for ``x`` of shape [B, D_in]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("linear_forward expects x [B,D_in], W [D_in,D_out], b [D_out]")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(f"linear shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data

    def vjp(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _emit("linear", xd @ Wd + b.data, (x, W, b), vjp)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if slope < 0:
        raise ValueError("slope must be non-negative")
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope)
    return _emit("leaky_relu", x.data * scale, (x,), lambda g: (g * scale,))


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer (not trainable)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, dim: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train") -> Tensor:
    """Per-feature normalisation of a [B, D] batch.

    Train mode normalises with the biased batch variance and folds the unbiased
    variance into the running estimate; eval mode uses the running estimate.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    xd = x.data
    n = xd.shape[0]
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.var + state.eps)
        xhat = (xd - state.mean) * inv
        gd = gamma.data

        def vjp_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _emit("batch_norm", xhat * gd + beta.data, (x, gamma, beta), vjp_eval)

    if n < 2:
        raise ValueError("batch_norm in train mode needs at least 2 samples")
    mu = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu) * inv
    m = state.momentum
    state.mean = (1 - m) * state.mean + m * mu
    state.var = (1 - m) * state.var + m * var * n / (n - 1)
    gd = gamma.data

    def vjp(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("batch_norm", xhat * gd + beta.data, (x, gamma, beta), vjp)


def dropout(x: Tensor, p: float, mode: str = "train",
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or for ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _emit("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def embedding_forward(table: Tensor, ids) -> Tensor:
    """Gather rows ``table[ids]``; the gradient scatters back into those rows."""
    ids = np.asarray(ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("ids must be a 1-d integer array")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding id out of range [0, {V})")

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _emit("embedding", table.data[ids], (table,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(parts)
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def _column_slice(x: Tensor, start: int, stop: int) -> Tensor:
    cols = x.shape[1]

    def vjp(g):
        out = np.zeros((g.shape[0], cols))
        out[:, start:stop] = g
        return (out,)

    return _emit("slice", x.data[:, start:stop].copy(), (x,), vjp)


def split_columns(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to width {x.shape[1]}")
    out, start = [], 0
    for s in sizes:
        out.append(_column_slice(x, start, start + s))
        start += s
    return out


def kron_identity(a: Tensor, k: int) -> Tensor:
    """``kron(a, I_k)``: every entry of ``a`` becomes a scaled k-by-k identity block."""
    if k == 1:
        return a
    eye = np.eye(k)
    n, m = a.shape

    def vjp(g):
        blocks = g.reshape(n, k, m, k)
        return (np.trace(blocks, axis1=1, axis2=3),)

    return _emit("kron_identity", np.kron(a.data, eye), (a,), vjp)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum", np.array([x.data.sum()]), (x,),
                 lambda g: (np.full(x.shape, g[0]),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit("mean", np.array([x.data.mean()]), (x,),
                 lambda g: (np.full(x.shape, g[0] / n),))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; ``target`` is treated as a constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _emit("mse", np.array([np.mean(diff * diff)]), (pred,),
                 lambda g: (2.0 * g[0] * diff / n,))


# --- initialisation ----------------------------------------------------------

def xavier_init(fan_in: int, fan_out: int, rng_seed=None, name: str | None = None) -> Tensor:
    """Glorot-uniform weight matrix of shape [fan_in, fan_out].

    ``rng_seed`` may be an int seed or an existing ``numpy.random.Generator``.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                  requires_grad=True, name=name)


# --- optimisation ------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: OptimizerState, lr: float,
              betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-5) -> None:
    """Bias-corrected Adam update applied in place to ``params`` and ``state``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        _check_finite(p.data, "adam_step")


class Adam:
    """Convenience wrapper holding parameters and their moment buffers."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.99), eps: float = 1e-5):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState.for_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr,
                  self.betas, self.eps)


@dataclass(frozen=True)
class LrSchedule:
    """One-cycle schedule followed by a constant fine-tune rate.

    ``total_steps`` covers the cycle only; any later step returns ``fine_tune_lr``.
    """

    total_steps: int
    max_lr: float = 0.01
    warmup_fraction: float = 0.25
    start_div: float = 25.0
    final_div: float = 1e4
    fine_tune_lr: float = 1e-4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if min(self.max_lr, self.start_div, self.final_div, self.fine_tune_lr) <= 0:
            raise ValueError("learning rates and divisors must be positive")

    @property
    def peak_step(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))


def _cos_interp(start: float, end: float, frac: float) -> float:
    return end + (start - end) / 2.0 * (math.cos(math.pi * frac) + 1.0)


def one_cycle_lr(step: int, sched: LrSchedule) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= sched.total_steps:
        return sched.fine_tune_lr
    start = sched.max_lr / sched.start_div
    low = start / sched.final_div
    peak = sched.peak_step
    if step <= peak:
        return _cos_interp(start, sched.max_lr, step / peak) if peak > 0 else sched.max_lr
    span = sched.total_steps - 1 - peak
    return _cos_interp(sched.max_lr, low, (step - peak) / span)
