"""
Significance Testing
Out-of-sample log-likelihoods and the ensemble paired permutation test
"""

import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from config import config
from models.cdrnn import CDRNNModel
from utils.data_loader import AssembledBatch
from utils.errors import ConfigurationError, DataError


logger = logging.getLogger(__name__)

# resampled matrix elements held in memory at once
_PERMUTATION_CHUNK = 1 << 22


def eval_loglik(model: CDRNNModel, batch: AssembledBatch) -> np.ndarray:
    """Per-item log N(y | mu, sigma) in response units (averaged params, eval mode)"""
    return model.loglik(batch)


@dataclass
class LikelihoodMatrix:
    """N items x E ensemble components of per-item log-likelihoods"""

    values: np.ndarray
    item_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self.item_ids = np.asarray(self.item_ids)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.item_ids):
            raise DataError(f"Likelihood matrix shape {self.values.shape} does not match {len(self.item_ids)} items")
        if not np.all(np.isfinite(self.values)):
            raise DataError("Likelihood matrix contains non-finite values")

    @property
    def n_items(self) -> int:
        return self.values.shape[0]

    @property
    def n_components(self) -> int:
        return self.values.shape[1]

    @property
    def total(self) -> float:
        """Sum over items of the mean over components"""
        return float(self.values.mean(axis=1).sum())

    @classmethod
    def from_models(cls, models: Sequence[CDRNNModel], batch: AssembledBatch) -> 'LikelihoodMatrix':
        return cls(values=np.column_stack([eval_loglik(m, batch) for m in models]), item_ids=batch.item_index)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({'item': self.item_ids})
        for e in range(self.n_components):
            frame[f'component_{e}'] = self.values[:, e]
        return frame

    def save_csv(self, path: str) -> str:
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        return path

    @classmethod
    def load_csv(cls, path: str) -> 'LikelihoodMatrix':
        frame = pd.read_csv(path)
        columns = [c for c in frame.columns if c.startswith('component_')]
        return cls(values=frame[columns].to_numpy(dtype=float), item_ids=frame['item'].to_numpy())


@dataclass
class TestResult:
    __test__ = False

    observed: float
    p_value: float
    iterations: int
    totals: Dict[str, float]
    n_items: int
    n_components: int
    exceed_count: int
    manifests: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'observed': self.observed,
            'p_value': self.p_value,
            'iterations': self.iterations,
            'totals': self.totals,
            'n_items': self.n_items,
            'n_components': self.n_components,
            'exceed_count': self.exceed_count,
            'manifests': self.manifests,
        }

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


def _check_matched(L0: LikelihoodMatrix, L1: LikelihoodMatrix):
    if L0.n_items != L1.n_items or not np.array_equal(L0.item_ids, L1.item_ids):
        raise DataError("Likelihood matrices do not cover the same items in the same order")
    if L0.n_components != L1.n_components:
        raise DataError(f"Ensembles differ in size ({L0.n_components} vs {L1.n_components})")


def _tolerance(observed: float) -> float:
    return 1e-9 * max(1.0, abs(observed))


def permutation_test(L0: LikelihoodMatrix, L1: LikelihoodMatrix, B: int = config.PERMUTATION_ITERATIONS,
                     rng: Optional[np.random.Generator] = None) -> TestResult:
    """
    Ensemble paired permutation test

    Per iteration and per item, the 2E log-likelihoods of both ensembles are
    pooled and shuffled into two halves of size E; the statistic is the
    absolute difference of summed component means.

    Args:
        L0: Null-model likelihoods (N x E)
        L1: Alternative-model likelihoods (N x E), same items
        B: Resampling iterations
        rng: Seeded generator

    Returns:
        TestResult with p = max(count, 1) / B
    """
    _check_matched(L0, L1)
    if B < 1:
        raise ConfigurationError(f"Permutation iterations must be positive, got {B}")
    rng = rng or np.random.default_rng(0)
    E = L0.n_components
    observed = abs(L1.total - L0.total)
    pooled = np.concatenate([L0.values, L1.values], axis=1)

    per_iteration = pooled.size
    chunk = max(1, _PERMUTATION_CHUNK // per_iteration)
    threshold = observed - _tolerance(observed)
    count = 0
    done = 0
    while done < B:
        n = min(chunk, B - done)
        shuffled = rng.permuted(np.repeat(pooled[None], n, axis=0), axis=2)
        diff = np.abs(shuffled[..., :E].mean(axis=2).sum(axis=1) - shuffled[..., E:].mean(axis=2).sum(axis=1))
        count += int(np.sum(diff >= threshold))
        done += n

    p_value = max(count, 1) / B
    logger.info("Permutation test: observed=%.6g p=%.4g (B=%d, N=%d, E=%d)", observed, p_value, B, L0.n_items, E)
    return TestResult(observed=float(observed), p_value=float(p_value), iterations=int(B),
                      totals={'a': L0.total, 'b': L1.total}, n_items=L0.n_items, n_components=E,
                      exceed_count=count)


def exact_permutation_p(L0: LikelihoodMatrix, L1: LikelihoodMatrix) -> float:
    """Exact p by enumerating every per-item split (small N and E only)"""
    _check_matched(L0, L1)
    E = L0.n_components
    observed = abs(L1.total - L0.total)
    threshold = observed - _tolerance(observed)
    pooled = np.concatenate([L0.values, L1.values], axis=1)
    splits = [np.array(c) for c in itertools.combinations(range(2 * E), E)]
    per_item = []
    for row in pooled:
        diffs = [row[idx].mean() - np.delete(row, idx).mean() for idx in splits]
        per_item.append(np.array(diffs))
    if len(splits) ** len(per_item) > 10 ** 7:
        raise ConfigurationError("Too many repartitions to enumerate")
    count = 0
    total = 0
    for combo in itertools.product(*per_item):
        total += 1
        count += abs(sum(combo)) >= threshold
    return count / total


def build_report(result: TestResult, manifest_a: Optional[Dict[str, Any]] = None,
                 manifest_b: Optional[Dict[str, Any]] = None) -> TestResult:
    """Attach ensemble manifest hashes to a test result"""
    result.manifests = {
        'a': (manifest_a or {}).get('manifest_hash'),
        'b': (manifest_b or {}).get('manifest_hash'),
    }
    return result
