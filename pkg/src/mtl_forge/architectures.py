"""The seven regression architectures and their shared building blocks.

Models are plain containers of named parameter tensors (``Model.params``) and
batch-norm running statistics (``Model.bn``); :func:`forward` dispatches on
``ModelConfig.arch``. Soft-sharing models (csn, sn, ern) keep one tower per task
and mix the towers' activations with an alpha unit after every hidden layer.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

ARCHS = ("baseline", "mlpnp", "mlpwp", "hps", "csn", "sn", "ern")
SPS_ARCHS = ("csn", "sn", "ern")
ALIGNED_ARCHS = ("hps", "csn", "sn", "ern")

HOUR_CARD, WEEK_CARD, DAY_CARD = 24, 53, 31
MIN_WIDTH = 5


def embedding_dim(cardinality: int) -> int:
    return min(50, math.ceil(cardinality / 2))


@dataclass(frozen=True)
class LayerPlan:
    widths: tuple[int, ...]

    def __post_init__(self):
        w = self.widths
        if not w or any(x < 1 for x in w):
            raise ValueError("layer widths must be positive")
        if any(b > a for a, b in zip(w, w[1:])):
            raise ValueError("layer widths must be non-increasing")

    def __len__(self):
        return len(self.widths)

    def __iter__(self):
        return iter(self.widths)


def build_layer_plan(n_features: int) -> LayerPlan:
    """First width is ten times the feature count, then halve (floor) down to 5.

    >>> build_layer_plan(12).widths
    (120, 60, 30, 15, 7, 5)
    """
    if n_features < 1:
        raise ValueError("n_features must be at least 1")
    widths = [10 * n_features]
    while widths[-1] > MIN_WIDTH:
        widths.append(max(MIN_WIDTH, widths[-1] // 2))
    return LayerPlan(tuple(widths))


# --- alpha / beta units ---------------------------------------------------------

@dataclass
class AlphaUnit:
    """Square mixing matrix over tasks, task subspaces, or single neurons.

    ``widths`` are the per-task activation widths the unit mixes. The matrix
    acts on the concatenated activations after being expanded to neuron level
    (``kron(alpha, I_chunk)`` for cross-stitch and sluice).
    """

    kind: str
    matrix: Tensor
    widths: tuple[int, ...]
    subspaces: int = 1

    @property
    def chunk(self) -> int:
        if self.kind == "ern":
            return 1
        if self.kind == "cross_stitch":
            return self.widths[0]
        return self.widths[0] // self.subspaces

    def block_map(self) -> list[tuple[int, int]]:
        """(task, subspace-or-neuron) owning each row of the matrix."""
        if self.kind == "cross_stitch":
            return [(t, 0) for t in range(len(self.widths))]
        if self.kind == "sluice":
            return [(t, s) for t in range(len(self.widths)) for s in range(self.subspaces)]
        return [(t, j) for t, w in enumerate(self.widths) for j in range(w)]

    def expanded(self) -> Tensor:
        return ad.kron_identity(self.matrix, self.chunk)


def _alpha_dim(kind: str, widths: Sequence[int], subspaces: int) -> int:
    T = len(widths)
    if kind == "cross_stitch":
        if len(set(widths)) != 1:
            raise ValueError("cross-stitch needs equal widths across tasks")
        return T
    if kind == "sluice":
        if subspaces < 1:
            raise ValueError("subspaces must be positive")
        if len(set(widths)) != 1:
            raise ValueError("sluice needs equal widths across tasks")
        if widths[0] % subspaces:
            raise ValueError(f"width {widths[0]} not divisible by {subspaces} subspaces")
        return T * subspaces
    if kind == "ern":
        return int(sum(widths))
    raise ValueError(f"unknown alpha kind {kind!r}")


def init_alpha(kind: str, tasks: int, subspaces: int = 1,
               widths: Sequence[int] | None = None) -> AlphaUnit:
    """0.9 on the diagonal, 0.1/n off it, n being the off-diagonal count."""
    if widths is None:
        widths = (1,) * tasks
    widths = tuple(int(w) for w in widths)
    if len(widths) != tasks:
        raise ValueError("need one width per task")
    dim = _alpha_dim(kind, widths, subspaces)
    if dim > 1:
        mat = np.full((dim, dim), 0.1 / (dim * dim - dim))
    else:
        mat = np.zeros((1, 1))
    np.fill_diagonal(mat, 0.9)
    return AlphaUnit(kind, Tensor(mat, requires_grad=True), widths, subspaces)


def alpha_combine(unit: AlphaUnit, activations: Sequence[Tensor]) -> list[Tensor]:
    """Mix per-task activations; row ``i`` of the output is ``sum_j M[i, j] * h[j]``."""
    widths = tuple(a.shape[1] for a in activations)
    if widths != unit.widths:
        raise ValueError(f"activation widths {widths} do not match alpha unit {unit.widths}")
    stacked = ad.concat(activations, axis=1)
    mixed = ad.matmul(stacked, ad.transpose(unit.expanded()))
    return ad.split_columns(mixed, widths)


@dataclass
class BetaUnit:
    weights: Tensor  # [sum of layer widths, 1]

    @classmethod
    def uniform(cls, total_width: int) -> "BetaUnit":
        return cls(Tensor(np.full((total_width, 1), 1.0 / total_width), requires_grad=True))


def beta_combine(skips: Sequence[Tensor], unit: BetaUnit) -> Tensor:
    """Bias-free linear read-out over skip-concatenated layer activations."""
    cat = ad.concat(skips, axis=1)
    if cat.shape[1] != unit.weights.shape[0]:
        raise ValueError(f"skip width {cat.shape[1]} != beta length {unit.weights.shape[0]}")
    return ad.matmul(cat, unit.weights)


# --- configuration and model container ------------------------------------------

@dataclass
class ModelConfig:
    arch: str
    n_tasks: int
    n_features: int
    subspaces: int = 2
    task_emb_dim: int | None = None
    hour_emb_dim: int = embedding_dim(HOUR_CARD)
    week_emb_dim: int = embedding_dim(WEEK_CARD)
    day_emb_dim: int = embedding_dim(DAY_CARD)
    dropout: float = 0.5
    emb_dropout: float = 0.25
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0
    widths: tuple[int, ...] | None = None  # overrides the layer-sizing rule

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if self.n_tasks < 1 or self.n_features < 1:
            raise ValueError("n_tasks and n_features must be positive")
        if self.task_emb_dim is None:
            self.task_emb_dim = embedding_dim(self.n_tasks)
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)
        if not 0 <= self.dropout < 1 or not 0 <= self.emb_dropout < 1:
            raise ValueError("dropout rates must lie in [0, 1)")
        if self.arch == "sn":
            if self.subspaces < 1:
                raise ValueError("subspaces must be positive")
            bad = [w for w in self.plan.widths if w % self.subspaces]
            if bad:
                raise ValueError(f"sluice widths {bad} not divisible by {self.subspaces} subspaces")

    @property
    def plan(self) -> LayerPlan:
        if self.widths is not None:
            return LayerPlan(self.widths)
        plan = build_layer_plan(self.n_features)
        if self.arch == "sn":
            # the sizing rule always ends at 5; round up so every layer splits evenly
            S = self.subspaces
            return LayerPlan(tuple(-(-w // S) * S for w in plan.widths))
        return plan

    @property
    def input_width(self) -> int:
        w = self.n_features + self.hour_emb_dim + self.week_emb_dim + self.day_emb_dim
        if self.arch == "mlpwp":
            w += self.task_emb_dim
        return w

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        if d.get("widths") is not None:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    @property
    def n_towers(self) -> int:
        return self.cfg.n_tasks if self.cfg.arch in SPS_ARCHS else 1

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def alpha_unit(self, layer: int) -> AlphaUnit:
        cfg = self.cfg
        kind = {"csn": "cross_stitch", "sn": "sluice", "ern": "ern"}[cfg.arch]
        w = cfg.plan.widths[layer]
        return AlphaUnit(kind, self.params[f"alpha{layer}"], (w,) * cfg.n_tasks,
                         cfg.subspaces if cfg.arch == "sn" else 1)

    def beta_unit(self, task: int) -> BetaUnit:
        return BetaUnit(self.params[f"beta{task}"])


def _add_dense(model: Model, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    model.params[f"{prefix}.W"] = ad.xavier_init(fan_in, fan_out, rng, name=f"{prefix}.W")
    model.params[f"{prefix}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.b")


def _add_hidden(model: Model, prefix: str, fan_in: int, fan_out: int, rng) -> None:
    _add_dense(model, prefix, fan_in, fan_out, rng)
    model.params[f"{prefix}.gamma"] = Tensor(np.ones(fan_out), requires_grad=True)
    model.params[f"{prefix}.beta"] = Tensor(np.zeros(fan_out), requires_grad=True)
    model.bn[prefix] = BatchNormState.fresh(fan_out, model.cfg.bn_momentum, model.cfg.bn_eps)


def _add_embeddings(model: Model, prefix: str, rng) -> None:
    cfg = model.cfg
    tables = {"hour": (HOUR_CARD, cfg.hour_emb_dim), "week": (WEEK_CARD, cfg.week_emb_dim),
              "day": (DAY_CARD, cfg.day_emb_dim)}
    if cfg.arch == "mlpwp":
        tables["task"] = (cfg.n_tasks, cfg.task_emb_dim)
    for name, (card, dim) in tables.items():
        if dim > 0:
            model.params[f"{prefix}.emb_{name}"] = ad.xavier_init(card, dim, rng)


def build_model(cfg: ModelConfig) -> Model:
    """Allocate and initialise every parameter for ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    model = Model(cfg)
    widths = cfg.plan.widths
    for tower in range(model.n_towers):
        pre = f"tower{tower}"
        _add_embeddings(model, pre, rng)
        fan_in = cfg.input_width
        for layer, w in enumerate(widths):
            _add_hidden(model, f"{pre}.hidden{layer}", fan_in, w, rng)
            fan_in = w
        if cfg.arch not in ("hps", "sn", "ern"):
            _add_dense(model, f"{pre}.out", fan_in, 1, rng)
    if cfg.arch == "hps":
        for t in range(cfg.n_tasks):
            _add_hidden(model, f"head{t}.hidden", widths[-1], MIN_WIDTH, rng)
            _add_dense(model, f"head{t}.out", MIN_WIDTH, 1, rng)
    if cfg.arch in SPS_ARCHS:
        kind = {"csn": "cross_stitch", "sn": "sluice", "ern": "ern"}[cfg.arch]
        for layer, w in enumerate(widths):
            unit = init_alpha(kind, cfg.n_tasks, cfg.subspaces if cfg.arch == "sn" else 1,
                              (w,) * cfg.n_tasks)
            model.params[f"alpha{layer}"] = unit.matrix
        if cfg.arch in ("sn", "ern"):
            for t in range(cfg.n_tasks):
                model.params[f"beta{t}"] = BetaUnit.uniform(sum(widths)).weights
    for name, p in model.params.items():
        p.name = name
    return model


# --- forward pass ----------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray   # [B, D]
    task_ids: np.ndarray   # [B]
    temporal: np.ndarray   # [B, 3] hour 0-23, ISO week 1-53, day 1-31

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.task_ids = np.asarray(self.task_ids, dtype=np.int64)
        self.temporal = np.asarray(self.temporal, dtype=np.int64)
        B = self.features.shape[0]
        if self.task_ids.shape != (B,) or self.temporal.shape != (B, 3):
            raise ValueError("batch arrays disagree on batch size")

    def take(self, rows: np.ndarray) -> "Batch":
        return Batch(self.features[rows], self.task_ids[rows], self.temporal[rows])


def _tower_input(model: Model, pre: str, batch: Batch, mode: str, rng) -> Tensor:
    cfg = model.cfg
    parts = [Tensor(batch.features)]
    ids = {"hour": batch.temporal[:, 0], "week": batch.temporal[:, 1] - 1,
           "day": batch.temporal[:, 2] - 1, "task": batch.task_ids}
    for name in ("hour", "week", "day", "task"):
        key = f"{pre}.emb_{name}"
        if key in model.params:
            emb = ad.embedding_forward(model.params[key], ids[name])
            parts.append(ad.dropout(emb, cfg.emb_dropout, mode, rng))
    return ad.concat(parts, axis=1)


def _hidden(model: Model, prefix: str, x: Tensor, mode: str, rng) -> Tensor:
    p = model.params
    cfg = model.cfg
    h = ad.linear_forward(x, p[f"{prefix}.W"], p[f"{prefix}.b"])
    h = ad.leaky_relu(h, cfg.leaky_slope)
    h = ad.batch_norm(h, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], model.bn[prefix], mode)
    return ad.dropout(h, cfg.dropout, mode, rng)


def _dense(model: Model, prefix: str, x: Tensor) -> Tensor:
    return ad.linear_forward(x, model.params[f"{prefix}.W"], model.params[f"{prefix}.b"])


def _check_tasks(model: Model, batch: Batch) -> None:
    ids = batch.task_ids
    if ids.size and (ids.min() < 0 or ids.max() >= model.cfg.n_tasks):
        raise ValueError(f"task id outside [0, {model.cfg.n_tasks})")


def _group_rows(model: Model, batch: Batch) -> list[np.ndarray]:
    """Row indices per task; soft-sharing models need equal, aligned groups."""
    groups = [np.flatnonzero(batch.task_ids == t) for t in range(model.cfg.n_tasks)]
    sizes = {g.size for g in groups}
    if len(sizes) != 1 or 0 in sizes:
        raise ValueError("multi-tower models need the same number of rows for every task")
    return groups


def _scatter_rows(parts: Sequence[Tensor], groups: Sequence[np.ndarray]) -> Tensor:
    """Reassemble per-group predictions into original row order."""
    order = np.concatenate(groups)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    stacked = ad.concat(parts, axis=0)
    if np.array_equal(order, np.arange(order.size)):
        return stacked
    return ad.embedding_forward(stacked, inverse)


def forward(model: Model, batch: Batch, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Tensor:
    """Predictions of shape [B, 1] in the batch's row order."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(model.cfg.seed)
    _check_tasks(model, batch)
    arch = model.cfg.arch
    if arch in ("baseline", "mlpnp", "mlpwp"):
        h = _tower_input(model, "tower0", batch, mode, rng)
        for layer in range(len(model.cfg.plan)):
            h = _hidden(model, f"tower0.hidden{layer}", h, mode, rng)
        return _dense(model, "tower0.out", h)
    if arch == "hps":
        return _forward_hps(model, batch, mode, rng)
    return _forward_sps(model, batch, mode, rng)


def _forward_hps(model: Model, batch: Batch, mode: str, rng) -> Tensor:
    h = _tower_input(model, "tower0", batch, mode, rng)
    for layer in range(len(model.cfg.plan)):
        h = _hidden(model, f"tower0.hidden{layer}", h, mode, rng)
    groups = [np.flatnonzero(batch.task_ids == t) for t in range(model.cfg.n_tasks)]
    parts, used = [], []
    for t, rows in enumerate(groups):
        if rows.size == 0:
            continue
        ht = h if rows.size == h.shape[0] else ad.embedding_forward(h, rows)
        ht = _hidden(model, f"head{t}.hidden", ht, mode, rng)
        parts.append(_dense(model, f"head{t}.out", ht))
        used.append(rows)
    return _scatter_rows(parts, used)


def tower_activations(model: Model, batch: Batch, mode: str = "eval",
                      rng: np.random.Generator | None = None) -> tuple[list[list[Tensor]], list[np.ndarray]]:
    """Post-alpha activations per layer and task for the soft-sharing models."""
    groups = _group_rows(model, batch)
    hs = [_tower_input(model, f"tower{t}", batch.take(rows), mode, rng)
          for t, rows in enumerate(groups)]
    per_layer = []
    for layer in range(len(model.cfg.plan)):
        hs = [_hidden(model, f"tower{t}.hidden{layer}", h, mode, rng) for t, h in enumerate(hs)]
        hs = alpha_combine(model.alpha_unit(layer), hs)
        per_layer.append(hs)
    return per_layer, groups


def _forward_sps(model: Model, batch: Batch, mode: str, rng) -> Tensor:
    per_layer, groups = tower_activations(model, batch, mode, rng)
    outs = []
    for t in range(model.cfg.n_tasks):
        if model.cfg.arch == "csn":
            outs.append(_dense(model, f"tower{t}.out", per_layer[-1][t]))
        else:
            skips = [layer_acts[t] for layer_acts in per_layer]
            outs.append(beta_combine(skips, model.beta_unit(t)))
    return _scatter_rows(outs, groups)


def predict(model: Model, batch: Batch) -> np.ndarray:
    """Eval-mode predictions as a flat array."""
    return forward(model, batch, "eval").data[:, 0].copy()


# --- checkpoints ------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def model_state(model: Model) -> dict[str, np.ndarray]:
    state = {f"param/{k}": v.data for k, v in model.params.items()}
    for k, s in model.bn.items():
        state[f"bn_mean/{k}"] = s.mean
        state[f"bn_var/{k}"] = s.var
    return state


def save_checkpoint(model: Model, path) -> None:
    from .io import write_arrays

    meta = {"format": "mtl_forge-checkpoint", "version": CHECKPOINT_VERSION,
            "config": json.loads(model.cfg.to_json())}
    write_arrays(path, model_state(model), meta)


def load_checkpoint(path) -> Model:
    from .io import read_arrays

    arrays, meta = read_arrays(path)
    if meta.get("format") != "mtl_forge-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    cfg = ModelConfig.from_json(json.dumps(meta["config"]))
    model = build_model(cfg)
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        if kind == "param":
            model.params[name].data = arr
        elif kind == "bn_mean":
            model.bn[name].mean = arr
        elif kind == "bn_var":
            model.bn[name].var = arr
    return model
