"""Training loop: one-cycle phase followed by a constant-rate fine-tune phase."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .architectures import ALIGNED_ARCHS, Batch, Model, forward
from .data import TaskDataset


@dataclass(frozen=True)
class TrainSchedule:
    cycle_epochs: int = 20
    finetune_epochs: int = 100
    batch_size: int = 512
    max_lr: float = 0.01
    warmup_fraction: float = 0.25
    start_div: float = 25.0
    final_div: float = 1e4
    fine_tune_lr: float = 1e-4

    def lr_schedule(self, steps_per_epoch: int) -> ad.LrSchedule:
        return ad.LrSchedule(total_steps=max(1, self.cycle_epochs * steps_per_epoch),
                             max_lr=self.max_lr, warmup_fraction=self.warmup_fraction,
                             start_div=self.start_div, final_div=self.final_div,
                             fine_tune_lr=self.fine_tune_lr)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: Model
    trace: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def _stack(datasets: Sequence[TaskDataset]):
    X = np.stack([d.features for d in datasets])
    C = np.stack([d.temporal for d in datasets])
    y = np.stack([d.target for d in datasets])
    return X, C, y


class _Sampler:
    """Turns index units into batches for one of the three data layouts."""

    def __init__(self, model: Model, datasets: Sequence[TaskDataset], split: str):
        self.arch = model.cfg.arch
        self.T = len(datasets)
        self.X, self.C, self.y = _stack(datasets)
        if self.arch in ALIGNED_ARCHS:
            ref = datasets[0].split(split)
            if any(not np.array_equal(d.split(split), ref) for d in datasets):
                raise ValueError("aligned training needs identical split rows across tasks")
            if model.cfg.n_tasks != self.T:
                raise ValueError("model task count differs from the number of datasets")
            self.units = ref
        elif self.arch == "baseline":
            if self.T != 1:
                raise ValueError("a baseline model trains on exactly one task")
            self.units = datasets[0].split(split)
        else:
            if model.cfg.n_tasks != self.T:
                raise ValueError("model task count differs from the number of datasets")
            self.units = np.array([(t, i) for t, d in enumerate(datasets) for i in d.split(split)],
                                  dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.units)

    def batch(self, units: np.ndarray) -> tuple[Batch, np.ndarray]:
        if self.arch in ALIGNED_ARCHS:
            b = len(units)
            feats = self.X[:, units].reshape(self.T * b, -1)
            temp = self.C[:, units].reshape(self.T * b, 3)
            tids = np.repeat(np.arange(self.T), b)
            y = self.y[:, units].reshape(-1)
        elif self.arch == "baseline":
            feats, temp, y = self.X[0, units], self.C[0, units], self.y[0, units]
            tids = np.zeros(len(units), dtype=np.int64)
        else:
            t, i = units[:, 0], units[:, 1]
            feats, temp, y, tids = self.X[t, i], self.C[t, i], self.y[t, i], t
        return Batch(feats, tids, temp), y[:, None]


def _loss(model: Model, pred: ad.Tensor, y: np.ndarray, n_tasks: int) -> ad.Tensor:
    loss = ad.mse_loss(pred, y)
    if model.cfg.arch in ALIGNED_ARCHS:
        # rows are equal task-major blocks, so this equals the summed per-task MSE
        loss = ad.mul(loss, ad.Tensor([float(n_tasks)]))
    return loss


def evaluate_loss(model: Model, datasets: Sequence[TaskDataset], split: str = "val") -> float:
    sampler = _Sampler(model, datasets, split)
    batch, y = sampler.batch(sampler.units)
    pred = forward(model, batch, "eval")
    return float(_loss(model, pred, y, sampler.T).data[0])


def train(model: Model, datasets: Sequence[TaskDataset], schedule: TrainSchedule | None = None,
          seed: int = 0, track_val: bool = True) -> TrainResult:
    """Fit ``model`` in place and return it with per-epoch losses.

    Each epoch reshuffles the training units (rows, or timestamps for the
    aligned multi-task models) and drops the final partial batch.
    """
    schedule = schedule or TrainSchedule()
    if not datasets:
        raise ValueError("no datasets to train on")
    sampler = _Sampler(model, datasets, "train")
    n = len(sampler)
    if n == 0:
        raise ValueError("empty training split")
    if schedule.batch_size > n:
        raise ValueError(f"batch size {schedule.batch_size} exceeds {n} training units")
    steps_per_epoch = n // schedule.batch_size
    lr_sched = schedule.lr_schedule(steps_per_epoch)
    rng = np.random.default_rng(seed)
    opt = ad.Adam(model.parameters())
    result = TrainResult(model)
    step = 0
    total_epochs = schedule.cycle_epochs + schedule.finetune_epochs
    for epoch in range(total_epochs):
        phase = "cycle" if epoch < schedule.cycle_epochs else "finetune"
        order = rng.permutation(n)
        losses = []
        lr = lr_sched.fine_tune_lr
        for k in range(steps_per_epoch):
            units = sampler.units[order[k * schedule.batch_size:(k + 1) * schedule.batch_size]]
            batch, y = sampler.batch(units)
            lr = ad.one_cycle_lr(step, lr_sched) if phase == "cycle" else lr_sched.fine_tune_lr
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = _loss(model, forward(model, batch, "train", rng), y, sampler.T)
            tape.backward(loss)
            opt.step(lr)
            losses.append(float(loss.data[0]))
            if phase == "cycle":
                step += 1
        result.step_losses.extend(losses)
        val = evaluate_loss(model, datasets, "val") if track_val else float("nan")
        result.trace.append(EpochRecord(epoch, phase, lr, float(np.mean(losses)), val))
    return result
