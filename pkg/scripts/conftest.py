"""
Shared fixtures and helpers for the test suite
"""

import os
import sys
from typing import Optional, Sequence

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from models.spec import ModelSpec
from utils.data_loader import AssembledBatch, StandardizationRecord


def pytest_collection_modifyitems(config, items):
    if os.getenv('CDRNN_RUN_SLOW') == '1':
        return
    skip = pytest.mark.skip(reason="slow acceptance run; set CDRNN_RUN_SLOW=1")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def make_record(predictors: Sequence[str], y_sd: float = 1.0, x_sd: Optional[Sequence[float]] = None,
                t_sd: float = 1.0, x_mean: Optional[Sequence[float]] = None) -> StandardizationRecord:
    K = len(predictors)
    return StandardizationRecord(
        predictor_names=list(predictors),
        x_sd=np.ones(K) if x_sd is None else np.asarray(x_sd, dtype=float),
        y_sd=float(y_sd),
        t_sd=float(t_sd),
        x_mean=np.zeros(K) if x_mean is None else np.asarray(x_mean, dtype=float),
        t_mean=0.0,
        x_min=np.full(K, -3.0),
        x_max=np.full(K, 3.0),
        t_min=0.0,
        t_max=10.0,
    )


def make_batch(X, t, d, mask, y, record: StandardizationRecord, z=None) -> AssembledBatch:
    X = np.asarray(X, dtype=float)
    M = X.shape[0]
    return AssembledBatch(
        X=X, t=np.asarray(t, dtype=float), d=np.asarray(d, dtype=float), mask=np.asarray(mask, dtype=bool),
        y=np.asarray(y, dtype=float), tau=np.zeros(M),
        z=np.zeros((M, 0), dtype=int) if z is None else np.asarray(z, dtype=int),
        item_index=np.arange(M), record=record,
    )


def random_batch(record: StandardizationRecord, M: int, T: int, rng: np.random.Generator,
                 z: Optional[np.ndarray] = None) -> AssembledBatch:
    """Random windows with a random number of leading masked rows"""
    K = len(record.predictor_names)
    mask = np.zeros((M, T), dtype=bool)
    for m in range(M):
        mask[m, rng.integers(0, T):] = True
    X = np.where(mask[..., None], rng.normal(size=(M, T, K)), 0.0)
    d = np.where(mask, np.sort(rng.exponential(1.0, size=(M, T)), axis=1)[:, ::-1], 0.0)
    t = np.where(mask, rng.uniform(0, 3, size=(M, T)), 0.0)
    return make_batch(X, t, d, mask, rng.normal(size=M), record, z)


def small_spec(predictors: Sequence[str] = ('x1', 'x2'), **hyper) -> ModelSpec:
    hp = {'hidden_layers': 1, 'hidden_units': 4, 'dropout': 0.0, 'max_epochs': 20, 'batch_size': 64}
    hp.update(hyper)
    return ModelSpec.base(list(predictors), history_length=4, hyperparameters=hp)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
