from pathlib import Path

import numpy as np
import pytest

from mtl_forge.architectures import Batch

ROOT = Path(__file__).resolve().parents[1]
TABLES = ROOT / "data" / "tables"


def random_batch(rng, n_tasks, rows_per_task, n_features):
    """Task-major batch with valid calendar ids."""
    B = n_tasks * rows_per_task
    temporal = np.column_stack([rng.integers(0, 24, B), rng.integers(1, 54, B), rng.integers(1, 32, B)])
    return Batch(rng.standard_normal((B, n_features)), np.repeat(np.arange(n_tasks), rows_per_task),
                 temporal)


def randomize_model(model, rng, scale=0.5):
    """Perturb every parameter and running statistic away from its initial value."""
    for p in model.params.values():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    for s in model.bn.values():
        s.mean = rng.standard_normal(s.mean.shape) * 0.3
        s.var = rng.uniform(0.5, 2.0, s.var.shape)


@pytest.fixture
def tables_dir():
    return TABLES
