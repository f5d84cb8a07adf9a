"""Flat INI experiment configuration with the reference training defaults."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass

from .architectures import ARCHS, ModelConfig
from .data import SyntheticSpec
from .training import TrainSchedule


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    # [data]
    source: str = "synthetic"
    csv_dir: str = ""
    test_boundary: str = "2016-01-01T00:00:00"
    interpolate: bool = True
    shift_features: tuple[str, ...] = ()
    train_frac: float = 0.8
    # [synthetic]
    n_tasks: int = 4
    n_features: int = 4
    relatedness: float = 0.5
    nonlinearity: str = "linear"
    noise: float = 0.1
    n_samples: int = 4000
    test_fraction: float = 0.25
    # [model]
    models: tuple[str, ...] = ARCHS
    subspaces: int = 2
    dropout: float = 0.5
    emb_dropout: float = 0.25
    leaky_slope: float = 0.01
    # [train]
    max_lr: float = 0.01
    cycle_epochs: int = 20
    finetune_epochs: int = 100
    batch_size: int = 512
    pooled_batch_size: int = 2048
    warmup_fraction: float = 0.25
    start_div: float = 25.0
    final_div: float = 1e4
    fine_tune_lr: float = 1e-4
    # [run]
    seed: int = 0
    out: str = "runs/default"
    workers: int = 0

    def __post_init__(self):
        self.models = tuple(self.models)
        self.shift_features = tuple(self.shift_features)
        bad = [m for m in self.models if m not in ARCHS]
        if bad:
            raise ValueError(f"unknown model(s) {bad}; choose from {ARCHS}")
        if not self.models:
            raise ValueError("no models selected")
        if self.source not in ("synthetic", "csv"):
            raise ValueError(f"unknown data source {self.source!r}")

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(n_tasks=self.n_tasks, n_features=self.n_features,
                             relatedness=self.relatedness, nonlinearity=self.nonlinearity,
                             noise=self.noise, n_samples=self.n_samples, seed=self.seed,
                             test_fraction=self.test_fraction)

    def schedule(self, arch: str) -> TrainSchedule:
        batch = self.pooled_batch_size if arch in ("mlpnp", "mlpwp") else self.batch_size
        return TrainSchedule(cycle_epochs=self.cycle_epochs, finetune_epochs=self.finetune_epochs,
                             batch_size=batch, max_lr=self.max_lr,
                             warmup_fraction=self.warmup_fraction, start_div=self.start_div,
                             final_div=self.final_div, fine_tune_lr=self.fine_tune_lr)

    def model_config(self, arch: str, n_tasks: int, n_features: int, seed: int) -> ModelConfig:
        return ModelConfig(arch=arch, n_tasks=n_tasks, n_features=n_features,
                           subspaces=self.subspaces, dropout=self.dropout,
                           emb_dropout=self.emb_dropout, leaky_slope=self.leaky_slope, seed=seed)


SECTIONS = {
    "data": ("source", "csv_dir", "test_boundary", "interpolate", "shift_features", "train_frac"),
    "synthetic": ("n_tasks", "n_features", "relatedness", "nonlinearity", "noise", "n_samples",
                  "test_fraction"),
    "model": ("models", "subspaces", "dropout", "emb_dropout", "leaky_slope"),
    "train": ("max_lr", "cycle_epochs", "finetune_epochs", "batch_size", "pooled_batch_size",
              "warmup_fraction", "start_div", "final_div", "fine_tune_lr"),
    "run": ("seed", "out", "workers"),
}

_DEFAULTS = ExperimentConfig()


def _convert(name: str, text: str):
    default = getattr(_DEFAULTS, name)
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, tuple):
        return _csv_list(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            values[key] = _convert(key, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def emit_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in SECTIONS.items():
        parser[section] = {k: _format(getattr(cfg, k)) for k in keys}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{k: v for k, v in changes.items() if v is not None})
