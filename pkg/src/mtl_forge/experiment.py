"""Prepare / train / evaluate stages shared by the CLI and the scripts."""
from __future__ import annotations

import csv
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .architectures import Batch, build_model, load_checkpoint, predict, save_checkpoint
from .config import ExperimentConfig, emit_config
from .data import (DataError, TaskDataset, generate_synthetic, load_csv, load_dataset,
                   prepare_tasks, save_dataset)
from .evalstats import pearson_matrix, rmse
from .report import EvaluationReport, build_report, write_report
from .training import train

DISPLAY = {"baseline": "BASELINE", "mlpnp": "MLPNP", "mlpwp": "MLPWP", "hps": "HPS",
           "csn": "CSN", "sn": "SN", "ern": "ERN"}


def job_seed(seed: int, name: str) -> int:
    """Stable per-job seed, independent of scheduling order."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def _cache_dir(out) -> Path:
    return Path(out) / "cache"


def _ckpt_dir(out) -> Path:
    return Path(out) / "checkpoints"


# --- prepare -------------------------------------------------------------------------

def build_datasets(cfg: ExperimentConfig) -> list[TaskDataset]:
    if cfg.source == "synthetic":
        return generate_synthetic(cfg.synthetic_spec())
    src = Path(cfg.csv_dir)
    if not src.is_dir():
        raise DataError(f"data directory not found: {src}")
    files = sorted(p for p in src.glob("*.csv") if not p.stem.endswith("_target"))
    if not files:
        raise DataError(f"no CSV files in {src}")
    series = [load_csv(p) for p in files]
    targets = {}
    for p in files:
        companion = p.with_name(p.stem + "_target.csv")
        if companion.exists():
            t = load_csv(companion, p.stem)
            targets[p.stem] = (t.timestamps, t.target)
    return prepare_tasks(series, cfg.test_boundary, interpolate=cfg.interpolate,
                         shift_features=cfg.shift_features, train_frac=cfg.train_frac,
                         seed=cfg.seed, targets=targets)


def prepare(cfg: ExperimentConfig) -> list[TaskDataset]:
    """Run the data pipeline, write the cache, config and task Pearson matrix."""
    datasets = build_datasets(cfg)
    out = Path(cfg.out)
    cache = _cache_dir(out)
    cache.mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        save_dataset(ds, cache / f"task{ds.task_id:02d}.npz")
    (out / "config.ini").write_text(emit_config(cfg))
    # train+val rows are identical across tasks after merging, so the vectors are paired
    seen = [d.target[np.sort(np.concatenate([d.train_idx, d.val_idx]))] for d in datasets]
    corr = pearson_matrix(seen)
    with open(out / "pearson.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task"] + [d.name for d in datasets])
        for d, row in zip(datasets, corr):
            w.writerow([d.name] + [repr(float(v)) for v in row])
    return datasets


def load_cache(out) -> list[TaskDataset]:
    cache = _cache_dir(out)
    files = sorted(cache.glob("task*.npz"))
    if not files:
        raise DataError(f"no prepared datasets in {cache}; run 'prepare' first")
    return [load_dataset(p) for p in files]


# --- train ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Job:
    arch: str
    task: int | None = None     # set for per-task baseline jobs

    @property
    def name(self) -> str:
        return self.arch if self.task is None else f"{self.arch}_task{self.task:02d}"


def plan_jobs(cfg: ExperimentConfig, n_tasks: int) -> list[Job]:
    jobs = []
    for arch in cfg.models:
        if arch == "baseline":
            jobs += [Job(arch, t) for t in range(n_tasks)]
        else:
            jobs.append(Job(arch))
    return jobs


def run_job(cfg: ExperimentConfig, job: Job, datasets: list[TaskDataset] | None = None) -> str:
    """Train one job and write its checkpoint and loss trace; returns the job name."""
    datasets = datasets if datasets is not None else load_cache(cfg.out)
    data = [datasets[job.task]] if job.task is not None else datasets
    seed = job_seed(cfg.seed, job.name)
    mcfg = cfg.model_config(job.arch, len(data), data[0].n_features, seed)
    model = build_model(mcfg)
    result = train(model, data, cfg.schedule(job.arch), seed=seed)
    out = Path(cfg.out)
    ckpt = _ckpt_dir(out)
    ckpt.mkdir(parents=True, exist_ok=True)
    loss_path = out / f"loss_{job.name}.csv"
    tmp = loss_path.with_name(loss_path.name + ".partial")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "phase", "lr", "train_loss", "val_loss"])
        for r in result.trace:
            w.writerow([r.epoch, r.phase, repr(r.lr), repr(r.train_loss), repr(r.val_loss)])
    tmp.replace(loss_path)
    save_checkpoint(model, ckpt / f"{job.name}.npz")
    return job.name


def _run_job_worker(args) -> tuple[str, str | None]:
    cfg, job = args
    try:
        return run_job(cfg, job), None
    except Exception as exc:  # reported back to the parent, which marks the job failed
        return job.name, f"{type(exc).__name__}: {exc}"


def train_all(cfg: ExperimentConfig) -> dict[str, str | None]:
    """Train every planned job; returns job name -> error message (None on success).

    Failed jobs leave a ``<name>.FAILED`` marker next to the checkpoints.
    """
    datasets = load_cache(cfg.out)
    jobs = plan_jobs(cfg, len(datasets))
    workers = cfg.workers or os.cpu_count() or 1
    ckpt = _ckpt_dir(cfg.out)
    ckpt.mkdir(parents=True, exist_ok=True)
    for job in jobs:
        (ckpt / f"{job.name}.FAILED").unlink(missing_ok=True)
    status: dict[str, str | None] = {}
    if workers == 1 or len(jobs) == 1:
        for job in jobs:
            try:
                status[run_job(cfg, job, datasets)] = None
            except Exception as exc:
                status[job.name] = f"{type(exc).__name__}: {exc}"
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            for name, err in pool.map(_run_job_worker, [(cfg, j) for j in jobs]):
                status[name] = err
    for name, err in status.items():
        if err is not None:
            (ckpt / f"{name}.FAILED").write_text(err + "\n")
    return status


# --- evaluate ------------------------------------------------------------------------

def _test_batch(datasets: list[TaskDataset], tasks: list[int]) -> tuple[Batch, list[np.ndarray]]:
    feats, temp, tids, ys = [], [], [], []
    for t in tasks:
        d = datasets[t]
        idx = d.test_idx
        feats.append(d.features[idx])
        temp.append(d.temporal[idx])
        tids.append(np.full(idx.size, t if len(tasks) > 1 else 0))
        ys.append(d.target[idx])
    return Batch(np.vstack(feats), np.concatenate(tids), np.vstack(temp)), ys


def evaluate(cfg: ExperimentConfig) -> EvaluationReport:
    """Per-task test RMSE for every model, in standardized target units."""
    datasets = load_cache(cfg.out)
    ckpt = _ckpt_dir(cfg.out)
    T = len(datasets)
    table: dict[str, np.ndarray] = {}
    for arch in cfg.models:
        errs = np.empty(T)
        if arch == "baseline":
            for t in range(T):
                model = load_checkpoint(ckpt / f"baseline_task{t:02d}.npz")
                batch, ys = _test_batch(datasets, [t])
                errs[t] = rmse(predict(model, batch), ys[0])
        else:
            model = load_checkpoint(ckpt / f"{arch}.npz")
            batch, ys = _test_batch(datasets, list(range(T)))
            pred = predict(model, batch)
            for t in range(T):
                errs[t] = rmse(pred[batch.task_ids == t], ys[t])
        table[DISPLAY[arch]] = errs
    rep = build_report([d.name for d in datasets], table)
    write_report(rep, cfg.out)
    return rep
