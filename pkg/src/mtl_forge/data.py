"""Per-task time-series ingestion, preprocessing and synthetic task families.

The preprocessing order is fixed: merge on timestamps, interpolate hourly
features to quarter hours, add +-1 h time-shifted copies of selected features,
extract calendar ids, then split and z-score with training statistics.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import read_arrays, write_arrays

CACHE_VERSION = 1
HOUR = np.timedelta64(3600, "s")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def parse_timestamp(text: str) -> np.datetime64:
    """ISO-8601 string to a UTC ``datetime64[s]``; naive stamps are taken as UTC."""
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s")) + "Z"


@dataclass
class RawSeries:
    task_name: str
    timestamps: np.ndarray        # datetime64[s], strictly increasing
    feature_names: tuple[str, ...]
    features: np.ndarray          # [N, D]
    target: np.ndarray            # [N]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.timestamps), -1)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.feature_names = tuple(self.feature_names)
        if self.features.shape[1] != len(self.feature_names):
            raise DataError(f"{self.task_name}: {len(self.feature_names)} names for "
                            f"{self.features.shape[1]} feature columns")
        if self.target.shape != (len(self.timestamps),):
            raise DataError(f"{self.task_name}: target length differs from timestamps")
        steps = np.diff(self.timestamps).astype(np.int64)
        if (steps <= 0).any():
            raise DataError(f"{self.task_name}: timestamps not strictly increasing "
                            f"at row {int(np.argmax(steps <= 0)) + 1}")
        if not (np.isfinite(self.features).all() and np.isfinite(self.target).all()):
            raise DataError(f"{self.task_name}: missing or non-finite values")

    def __len__(self):
        return len(self.timestamps)

    def take(self, rows) -> "RawSeries":
        return RawSeries(self.task_name, self.timestamps[rows], self.feature_names,
                         self.features[rows], self.target[rows])


def load_csv(path, task_name: str | None = None) -> RawSeries:
    """Read ``timestamp,<features...>,target``; errors name the offending line."""
    path = Path(path)
    name = task_name or path.stem
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if "timestamp" not in header:
            raise DataError(f"{path}: missing 'timestamp' column")
        if "target" not in header:
            raise DataError(f"{path}: missing 'target' column")
        ts_col, tg_col = header.index("timestamp"), header.index("target")
        feat_cols = [i for i in range(len(header)) if i not in (ts_col, tg_col)]
        stamps, feats, target = [], [], []
        seen: dict[np.datetime64, int] = {}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} cells, got {len(row)}")
            try:
                ts = parse_timestamp(row[ts_col])
            except ValueError:
                raise DataError(f"{path}:{line}: malformed timestamp {row[ts_col]!r}") from None
            if ts in seen:
                raise DataError(f"{path}:{line}: duplicate timestamp {row[ts_col]} "
                                f"(first seen on line {seen[ts]})")
            if stamps and ts < stamps[-1]:
                raise DataError(f"{path}:{line}: timestamps out of order")
            seen[ts] = line
            try:
                values = [float(row[i]) for i in feat_cols]
                y = float(row[tg_col])
            except ValueError:
                raise DataError(f"{path}:{line}: non-numeric cell") from None
            if not all(map(math.isfinite, values + [y])):
                raise DataError(f"{path}:{line}: missing or non-finite value")
            stamps.append(ts)
            feats.append(values)
            target.append(y)
    if not stamps:
        raise DataError(f"{path}: no data rows")
    return RawSeries(name, np.array(stamps, dtype="datetime64[s]"),
                     [header[i] for i in feat_cols], np.array(feats), np.array(target))


def merge_on_timestamp(series: Sequence[RawSeries]) -> list[RawSeries]:
    """Restrict every series to the timestamps common to all of them."""
    if not series:
        raise DataError("nothing to merge")
    common = series[0].timestamps
    for s in series[1:]:
        common = np.intersect1d(common, s.timestamps, assume_unique=True)
    if common.size == 0:
        raise DataError("series share no timestamps")
    return [s.take(np.isin(s.timestamps, common)) for s in series]


def interpolate_features(series: RawSeries, factor: int = 4,
                         target: tuple[np.ndarray, np.ndarray] | None = None) -> RawSeries:
    """Linearly interpolate features onto ``factor`` sub-steps per input step.

    H input rows give ``factor * (H - 1) + 1`` output rows (no extrapolation
    past the last knot). ``target`` may supply ``(timestamps, values)`` at the
    finer resolution; without it the target is interpolated as well.
    """
    if factor < 1:
        raise DataError("factor must be positive")
    ts = series.timestamps
    if len(ts) < 2:
        raise DataError(f"{series.task_name}: need at least two rows to interpolate")
    steps = np.diff(ts).astype(np.int64)
    if (steps != steps[0]).any():
        raise DataError(f"{series.task_name}: non-uniform spacing")
    if steps[0] % factor:
        raise DataError(f"{series.task_name}: spacing not divisible by {factor}")
    sub = np.timedelta64(int(steps[0] // factor), "s")
    n_out = factor * (len(ts) - 1) + 1
    new_ts = ts[0] + np.arange(n_out) * sub
    x_old = (ts - ts[0]).astype(np.int64).astype(np.float64)
    x_new = (new_ts - ts[0]).astype(np.int64).astype(np.float64)
    feats = np.column_stack([np.interp(x_new, x_old, col) for col in series.features.T])
    if target is None:
        y = np.interp(x_new, x_old, series.target)
    else:
        t_ts = np.asarray(target[0], dtype="datetime64[s]")
        pos = np.searchsorted(t_ts, new_ts)
        pos = np.minimum(pos, len(t_ts) - 1)
        if not np.array_equal(t_ts[pos], new_ts):
            missing = new_ts[t_ts[pos] != new_ts][0]
            raise DataError(f"{series.task_name}: no target value at {format_timestamp(missing)}")
        y = np.asarray(target[1], dtype=np.float64)[pos]
    return RawSeries(series.task_name, new_ts, series.feature_names, feats, y)


def add_time_shifts(series: RawSeries, names: Sequence[str],
                    shift: np.timedelta64 = HOUR) -> RawSeries:
    """Append ``f_past`` (t - shift) and ``f_future`` (t + shift) for each named feature.

    Rows without both neighbours are dropped.
    """
    unknown = [n for n in names if n not in series.feature_names]
    if unknown:
        raise DataError(f"{series.task_name}: unknown feature(s) {unknown}")
    if not names:
        return series
    ts = series.timestamps
    shift = np.timedelta64(shift, "s")

    def locate(targets):
        pos = np.minimum(np.searchsorted(ts, targets), len(ts) - 1)
        return pos, ts[pos] == targets

    past, has_past = locate(ts - shift)
    fut, has_fut = locate(ts + shift)
    keep = np.flatnonzero(has_past & has_fut)
    cols = [series.features[keep]]
    new_names = list(series.feature_names)
    for n in names:
        j = series.feature_names.index(n)
        cols.append(series.features[past[keep], j][:, None])
        cols.append(series.features[fut[keep], j][:, None])
        new_names += [f"{n}_past", f"{n}_future"]
    return RawSeries(series.task_name, ts[keep], new_names, np.hstack(cols), series.target[keep])


def extract_temporal(timestamp) -> tuple[int, int, int]:
    """(hour of day, ISO-8601 week, day of month) for a UTC timestamp."""
    if isinstance(timestamp, str):
        timestamp = parse_timestamp(timestamp)
    if isinstance(timestamp, np.datetime64):
        timestamp = timestamp.astype("datetime64[s]").item()
    return timestamp.hour, timestamp.isocalendar()[1], timestamp.day


def temporal_ids(timestamps: np.ndarray) -> np.ndarray:
    return np.array([extract_temporal(t) for t in timestamps], dtype=np.int64).reshape(-1, 3)


@dataclass
class TaskDataset:
    task_id: int
    name: str
    timestamps: np.ndarray
    feature_names: tuple[str, ...]
    features: np.ndarray      # standardized [N, D]
    temporal: np.ndarray      # [N, 3]
    target: np.ndarray        # standardized [N]
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float

    def __len__(self):
        return len(self.timestamps)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]

    def destandardize_target(self, y) -> np.ndarray:
        return np.asarray(y) * self.target_std + self.target_mean

    def destandardize_features(self, x) -> np.ndarray:
        return np.asarray(x) * self.feature_std + self.feature_mean


def _zscore_stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    # constant columns stay constant (0 after centring) instead of dividing by zero
    return mean, np.where(std > 0, std, 1.0)


def split_and_standardize(series: RawSeries, boundary, train_frac: float = 0.8,
                          seed: int = 0, task_id: int = 0) -> TaskDataset:
    """Shuffle rows before ``boundary`` into train/val, keep later rows as test.

    Means and standard deviations come from the training rows only and are
    applied to every split, target included.
    """
    if not 0.0 < train_frac < 1.0:
        raise DataError("train_frac must lie in (0, 1)")
    boundary = parse_timestamp(boundary) if isinstance(boundary, str) else np.datetime64(boundary, "s")
    pre = np.flatnonzero(series.timestamps < boundary)
    test = np.flatnonzero(series.timestamps >= boundary)
    perm = np.random.default_rng(seed).permutation(pre)
    n_train = int(round(train_frac * len(pre)))
    train, val = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    for label, idx in (("train", train), ("validation", val), ("test", test)):
        if idx.size == 0:
            raise DataError(f"{series.task_name}: empty {label} split")
    f_mean, f_std = _zscore_stats(series.features[train])
    t_mean, t_std = _zscore_stats(series.target[train])
    return TaskDataset(
        task_id=task_id, name=series.task_name, timestamps=series.timestamps.copy(),
        feature_names=series.feature_names,
        features=(series.features - f_mean) / f_std,
        temporal=temporal_ids(series.timestamps),
        target=(series.target - t_mean) / t_std,
        train_idx=train, val_idx=val, test_idx=test,
        feature_mean=f_mean, feature_std=f_std,
        target_mean=float(t_mean), target_std=float(t_std))


def prepare_tasks(series: Sequence[RawSeries], boundary, *, interpolate: bool = True,
                  factor: int = 4, shift_features: Sequence[str] = (),
                  train_frac: float = 0.8, seed: int = 0,
                  targets: dict | None = None) -> list[TaskDataset]:
    """Run the full pipeline over aligned task series."""
    merged = merge_on_timestamp(series)
    out = []
    for task_id, s in enumerate(merged):
        if interpolate:
            tgt = (targets or {}).get(s.task_name)
            s = interpolate_features(s, factor, tgt)
        s = add_time_shifts(s, shift_features)
        out.append(split_and_standardize(s, boundary, train_frac, seed, task_id))
    ref = out[0].timestamps
    if any(not np.array_equal(d.timestamps, ref) for d in out):
        raise DataError("tasks lost row alignment during preprocessing")
    return out


# --- synthetic task families -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Controls for a synthetic multi-task family.

    Task features mix a shared latent weather signal with task-local signal in
    proportion to ``relatedness``; targets mix a shared response with a
    task-specific one in the same proportion.
    """

    n_tasks: int = 4
    n_features: int = 4
    relatedness: float = 0.5
    nonlinearity: str = "linear"
    noise: float = 0.1
    n_samples: int = 4000
    seed: int = 0
    test_fraction: float = 0.25
    start: str = "2015-01-01T00:00:00"
    step_minutes: int = 60
    persistence: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.relatedness <= 1.0:
            raise ValueError("relatedness must lie in [0, 1]")
        if self.nonlinearity not in ("linear", "power_curve"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.n_tasks < 1 or self.n_features < 1 or self.n_samples < 10:
            raise ValueError("n_tasks, n_features must be positive and n_samples >= 10")
        if self.noise < 0 or not 0.0 < self.test_fraction < 1.0:
            raise ValueError("noise must be >= 0 and test_fraction in (0, 1)")
        if not 0.0 <= self.persistence < 1.0:
            raise ValueError("persistence must lie in [0, 1)")


def _ar1(rng: np.random.Generator, n: int, d: int, phi: float) -> np.ndarray:
    """Unit-variance AR(1) columns."""
    eps = rng.standard_normal((n, d))
    out = np.empty((n, d))
    out[0] = eps[0]
    scale = math.sqrt(1.0 - phi * phi)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + scale * eps[i]
    return out


def _respond(x: np.ndarray, w: np.ndarray, nonlinearity: str) -> np.ndarray:
    h = x.copy()
    if nonlinearity == "power_curve":
        # column 0 plays wind speed: logistic power curve, rescaled to roughly unit spread
        h[:, 0] = 4.0 / (1.0 + np.exp(-3.0 * (x[:, 0] - 0.5))) - 2.0
    return h @ w


def generate_synthetic(spec: SyntheticSpec) -> list[TaskDataset]:
    """Aligned synthetic tasks with targets ``rho*f(x) + (1-rho)*g_t(x) + noise``."""
    rho = spec.relatedness
    rng = np.random.default_rng(spec.seed)
    shared_latent = _ar1(rng, spec.n_samples, spec.n_features, spec.persistence)
    w_shared = rng.standard_normal(spec.n_features)
    w_shared /= np.linalg.norm(w_shared)
    start = parse_timestamp(spec.start)
    stamps = start + np.arange(spec.n_samples) * np.timedelta64(60 * spec.step_minutes, "s")
    n_test = max(1, int(round(spec.test_fraction * spec.n_samples)))
    boundary = stamps[spec.n_samples - n_test]
    names = [f"x{j}" for j in range(spec.n_features)]
    out = []
    for t in range(spec.n_tasks):
        trng = np.random.default_rng(spec.seed + 1 + t)
        local = _ar1(trng, spec.n_samples, spec.n_features, spec.persistence)
        x = math.sqrt(rho) * shared_latent + math.sqrt(1.0 - rho) * local
        w_task = trng.standard_normal(spec.n_features)
        w_task /= np.linalg.norm(w_task)
        y = (rho * _respond(x, w_shared, spec.nonlinearity)
             + (1.0 - rho) * _respond(x, w_task, spec.nonlinearity)
             + spec.noise * trng.standard_normal(spec.n_samples))
        raw = RawSeries(f"task{t:02d}", stamps, names, x, y)
        out.append(split_and_standardize(raw, boundary, 0.8, spec.seed, t))
    return out


# --- processed-dataset cache ---------------------------------------------------------

def save_dataset(ds: TaskDataset, path) -> None:
    arrays = {
        "timestamps": ds.timestamps.astype(np.int64),
        "features": ds.features, "temporal": ds.temporal, "target": ds.target,
        "train_idx": ds.train_idx, "val_idx": ds.val_idx, "test_idx": ds.test_idx,
        "feature_mean": ds.feature_mean, "feature_std": ds.feature_std,
        "target_stats": np.array([ds.target_mean, ds.target_std]),
    }
    meta = {"format": "mtl_forge-dataset", "version": CACHE_VERSION,
            "task_id": ds.task_id, "name": ds.name, "feature_names": list(ds.feature_names)}
    write_arrays(path, arrays, meta)


def load_dataset(path) -> TaskDataset:
    a, meta = read_arrays(path)
    if meta.get("format") != "mtl_forge-dataset" or meta.get("version") != CACHE_VERSION:
        raise DataError(f"{path}: not a version-{CACHE_VERSION} dataset cache")
    return TaskDataset(
        task_id=meta["task_id"], name=meta["name"],
        timestamps=a["timestamps"].astype("datetime64[s]"),
        feature_names=tuple(meta["feature_names"]),
        features=a["features"], temporal=a["temporal"], target=a["target"],
        train_idx=a["train_idx"], val_idx=a["val_idx"], test_idx=a["test_idx"],
        feature_mean=a["feature_mean"], feature_std=a["feature_std"],
        target_mean=float(a["target_stats"][0]), target_std=float(a["target_stats"][1]))
