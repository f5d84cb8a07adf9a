"""Evaluation report assembly and its CSV / text renderings."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evalstats import ModelScores, SignificanceResult, select_and_run, skill_score

BASELINE = "BASELINE"


@dataclass
class EvaluationReport:
    tasks: list[str]
    scores: dict[str, ModelScores]               # keyed by display name, baseline included
    skill: dict[str, float] = field(default_factory=dict)
    significance: dict[str, SignificanceResult | None] = field(default_factory=dict)

    @property
    def models(self) -> list[str]:
        return list(self.scores)

    def is_significant(self, name: str) -> bool:
        res = self.significance.get(name)
        return bool(res is not None and res.significant)


def build_report(tasks, rmse_by_model: dict[str, np.ndarray]) -> EvaluationReport:
    """Skill scores and significance of every model against ``BASELINE``."""
    if BASELINE not in rmse_by_model:
        raise ValueError("report needs a BASELINE column")
    names = [BASELINE] + sorted(n for n in rmse_by_model if n != BASELINE)
    scores = {n: ModelScores(n, rmse_by_model[n]) for n in names}
    base = scores[BASELINE]
    rep = EvaluationReport(list(tasks), scores)
    for n in names:
        rep.skill[n] = skill_score(scores[n], base)
        if n == BASELINE:
            continue
        try:
            rep.significance[n] = select_and_run(scores[n], base)
        except ValueError:
            # too few tasks, or identical RMSE vectors
            rep.significance[n] = None
    return rep


def read_rmse_table(path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Parse ``task,<MODEL...>`` rows; a column named baseline in any case is the reference."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: table has no rows")
    header = [h.strip() for h in rows[0]]
    cols = {h.upper() if h.lower() == "baseline" else h: i for i, h in enumerate(header[1:], 1)}
    tasks, data = [], {n: [] for n in cols}
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        tasks.append(row[0].strip())
        for n, i in cols.items():
            try:
                data[n].append(float(row[i]))
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{line}: bad value in column {n}") from None
    return tasks, {n: np.array(v) for n, v in data.items()}


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def write_report(rep: EvaluationReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = rep.models
    paths = []

    p = out / "rmse_table.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task"] + names)
        for k, task in enumerate(rep.tasks):
            w.writerow([task] + [_num(rep.scores[n].rmse[k]) for n in names])
    paths.append(p)

    p = out / "skill_scores.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "skill_score"])
        for n in names:
            w.writerow([n, _num(rep.skill[n])])
    paths.append(p)

    p = out / "significance.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "test", "statistic", "p_value", "significant", "normality_p", "fallback"])
        for n in names[1:]:
            res = rep.significance.get(n)
            if res is None:
                w.writerow([n, "none", "", "", "false", "", "false"])
                continue
            w.writerow([n, res.test, _num(res.statistic), _num(res.p_value),
                        str(res.significant).lower(), _num(res.normality_p),
                        str(res.fallback).lower()])
    paths.append(p)

    p = out / "boxplot_data.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "task", "rmse", "skill"])
        base = rep.scores[BASELINE].rmse
        for n in names:
            r = rep.scores[n].rmse
            for k, task in enumerate(rep.tasks):
                w.writerow([n, task, _num(r[k]), _num(1.0 - r[k] / base[k])])
    paths.append(p)
    return paths


def load_report(out_dir) -> EvaluationReport:
    """Rebuild a report from ``rmse_table.csv`` in ``out_dir``."""
    tasks, table = read_rmse_table(Path(out_dir) / "rmse_table.csv")
    return build_report(tasks, table)


def render_summary(rep: EvaluationReport) -> str:
    """Plain-text RMSE table; ``*`` marks models significantly different from the baseline."""
    names = rep.models
    heads = [n + ("*" if rep.is_significant(n) else "") for n in names]
    width = max(10, max(len(t) for t in rep.tasks + ["SkillScore"]))
    col = max(9, max(len(h) for h in heads) + 1)
    lines = ["task".ljust(width) + "".join(h.rjust(col) for h in heads)]
    for k, task in enumerate(rep.tasks):
        cells = "".join(f"{rep.scores[n].rmse[k]:.4f}".rjust(col) for n in names)
        lines.append(task.ljust(width) + cells)
    lines.append("-" * len(lines[0]))
    lines.append("SkillScore".ljust(width) + "".join(f"{rep.skill[n]:.4f}".rjust(col) for n in names))
    lines.append("")
    lines.append("significance vs BASELINE (alpha = 0.01, two-sided)")
    for n in names[1:]:
        res = rep.significance.get(n)
        if res is None:
            lines.append(f"  {n}: not testable")
            continue
        extra = f", normality p={res.normality_p:.4g}" if res.normality_p is not None else ""
        extra += ", fallback from t-test" if res.fallback else ""
        mark = "*" if res.significant else " "
        lines.append(f"{mark} {n}: {res.test} statistic={res.statistic:.4g} p={res.p_value:.4g}{extra}")
    return "\n".join(lines) + "\n"
