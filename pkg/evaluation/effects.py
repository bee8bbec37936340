"""
Effect Estimation
Perturbation queries against a reference configuration: IRF curves and
surfaces, interaction grids, nonstationarity slices and uncertainty bands
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import config
from models.cdrnn import CDRNNModel, ModelDraw, sample_draw
from utils.data_loader import AssembledBatch, StandardizationRecord
from utils.errors import ConfigurationError


logger = logging.getLogger(__name__)

STATISTICS = ('mu', 'sigma', 'var')


@dataclass
class ReferenceConfig:
    """Reference predictor vector and timestamp (raw units) plus the delay grid"""

    predictor_names: List[str]
    x: np.ndarray
    t: float
    delays: np.ndarray
    statistic: str = 'mu'

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.delays = np.asarray(self.delays, dtype=float)
        if len(self.x) != len(self.predictor_names):
            raise ConfigurationError(f"Reference has {len(self.x)} values for {len(self.predictor_names)} predictors")
        if self.delays.ndim != 1 or len(self.delays) == 0:
            raise ConfigurationError("Delay grid must be a nonempty vector")
        if np.any(self.delays < 0) or np.any(np.diff(self.delays) <= 0):
            raise ConfigurationError("Delay grid must be nonnegative and strictly increasing")
        _check_statistic(self.statistic)


def delay_grid(horizon: float = config.PLOT_HORIZON, n_points: int = config.DELAY_POINTS) -> np.ndarray:
    return np.linspace(0.0, horizon, n_points)


def reference_config(record: StandardizationRecord, delays: Optional[np.ndarray] = None,
                     statistic: str = 'mu') -> ReferenceConfig:
    """Training means of the predictors and timestamps"""
    return ReferenceConfig(predictor_names=list(record.predictor_names), x=np.array(record.x_mean, dtype=float),
                           t=float(record.t_mean), delays=delay_grid() if delays is None else delays,
                           statistic=statistic)


def _check_statistic(statistic: str):
    if statistic not in STATISTICS:
        raise ConfigurationError(f"Statistic '{statistic}' is not defined for the normal distribution; "
                                 f"use one of {list(STATISTICS)}")


@dataclass
class QueryInputs:
    """Single-event configurations: predictor values (Q, K), timestamps and delays (Q,)"""

    x: np.ndarray
    t: np.ndarray
    d: np.ndarray


def _query_batch(model: CDRNNModel, inputs: QueryInputs) -> AssembledBatch:
    spec, record = model.spec, model.record
    Q, T = len(inputs.d), spec.history_length
    cols = [record.predictor_names.index(name) for name in spec.predictor_names]
    X = np.zeros((Q, T, len(cols)))
    t = np.zeros((Q, T))
    d = np.zeros((Q, T))
    mask = np.zeros((Q, T), dtype=bool)
    X[:, -1, :] = inputs.x[:, cols] / record.x_sd[cols]
    t[:, -1] = inputs.t / record.t_sd
    d[:, -1] = inputs.d
    mask[:, -1] = True
    return AssembledBatch(X=X, t=t, d=d, mask=mask, y=np.zeros(Q), tau=inputs.t + inputs.d,
                          z=np.zeros((Q, 0), dtype=int), item_index=np.arange(Q), record=record)


def evaluate_statistic(model: CDRNNModel, inputs: QueryInputs, statistic: str,
                       draw: Optional[ModelDraw] = None) -> np.ndarray:
    """Statistic of the predictive distribution for each single-event configuration"""
    _check_statistic(statistic)
    params = model.predict(_query_batch(model, inputs), draw=draw, use_levels=False)
    if statistic == 'mu':
        return params.mu
    if statistic == 'sigma':
        return params.sigma
    return params.sigma ** 2


@dataclass
class EffectQuery:
    """A grid of (alt - ref) contrasts evaluated together under one draw"""

    kind: str
    axes: Dict[str, np.ndarray]
    ref: QueryInputs
    alt: QueryInputs
    statistic: str
    out_of_range: np.ndarray

    @property
    def shape(self):
        return tuple(len(v) for v in self.axes.values())

    def evaluate(self, model: CDRNNModel, draw: Optional[ModelDraw] = None) -> np.ndarray:
        Q = len(self.ref.d)
        both = QueryInputs(x=np.vstack([self.ref.x, self.alt.x]), t=np.concatenate([self.ref.t, self.alt.t]),
                           d=np.concatenate([self.ref.d, self.alt.d]))
        values = evaluate_statistic(model, both, self.statistic, draw)
        return (values[Q:] - values[:Q]).reshape(self.shape)


def _tile(ref: ReferenceConfig, n: int) -> np.ndarray:
    return np.tile(ref.x, (n, 1))


def _predictor_index(ref: ReferenceConfig, predictor: str) -> int:
    if predictor not in ref.predictor_names:
        raise ConfigurationError(f"Unknown predictor '{predictor}'")
    return ref.predictor_names.index(predictor)


def _value_out_of_range(record: StandardizationRecord, predictor: str, values: np.ndarray) -> np.ndarray:
    k = record.predictor_names.index(predictor)
    return (values < record.x_min[k]) | (values > record.x_max[k])


def _flag(query: EffectQuery) -> EffectQuery:
    if query.out_of_range.any():
        logger.warning("%s query has %d grid points outside the training range",
                       query.kind, int(query.out_of_range.sum()))
    return query


def curve_query(record: StandardizationRecord, predictor: str, ref: ReferenceConfig,
                step: Optional[float] = None, statistic: Optional[str] = None) -> EffectQuery:
    """Effect of ref + step on one predictor at every delay of the grid"""
    k = _predictor_index(ref, predictor)
    step = float(record.x_sd[record.predictor_names.index(predictor)]) if step is None else float(step)
    n = len(ref.delays)
    alt_x = _tile(ref, n)
    alt_x[:, k] += step
    t = np.full(n, ref.t)
    oor = np.broadcast_to(_value_out_of_range(record, predictor, np.array([ref.x[k] + step])), (n,)).copy()
    return _flag(EffectQuery(kind='curve', axes={'delay': ref.delays.copy()},
                             ref=QueryInputs(_tile(ref, n), t, ref.delays.copy()),
                             alt=QueryInputs(alt_x, t.copy(), ref.delays.copy()),
                             statistic=statistic or ref.statistic, out_of_range=oor))


def surface_query(record: StandardizationRecord, predictor: str, values: Sequence[float], ref: ReferenceConfig,
                  statistic: Optional[str] = None) -> EffectQuery:
    """Effect of setting one predictor to each value, at every delay"""
    k = _predictor_index(ref, predictor)
    values = np.asarray(values, dtype=float)
    V, D = np.meshgrid(values, ref.delays, indexing='ij')
    n = V.size
    alt_x = _tile(ref, n)
    alt_x[:, k] = V.ravel()
    t = np.full(n, ref.t)
    oor = _value_out_of_range(record, predictor, V)
    return _flag(EffectQuery(kind='surface', axes={predictor: values, 'delay': ref.delays.copy()},
                             ref=QueryInputs(_tile(ref, n), t, D.ravel()),
                             alt=QueryInputs(alt_x, t.copy(), D.ravel()),
                             statistic=statistic or ref.statistic, out_of_range=oor))


def interaction_query(record: StandardizationRecord, predictor_a: str, predictor_b: str,
                      values_a: Sequence[float], values_b: Sequence[float], delay: float,
                      ref: ReferenceConfig, statistic: Optional[str] = None) -> EffectQuery:
    """Joint effect of two predictors over a value grid at a fixed delay"""
    ka, kb = _predictor_index(ref, predictor_a), _predictor_index(ref, predictor_b)
    if ka == kb:
        raise ConfigurationError("Interaction query needs two distinct predictors")
    values_a, values_b = np.asarray(values_a, dtype=float), np.asarray(values_b, dtype=float)
    A, B = np.meshgrid(values_a, values_b, indexing='ij')
    n = A.size
    alt_x = _tile(ref, n)
    alt_x[:, ka] = A.ravel()
    alt_x[:, kb] = B.ravel()
    t = np.full(n, ref.t)
    d = np.full(n, float(delay))
    oor = _value_out_of_range(record, predictor_a, A) | _value_out_of_range(record, predictor_b, B)
    return _flag(EffectQuery(kind='interaction', axes={predictor_a: values_a, predictor_b: values_b},
                             ref=QueryInputs(_tile(ref, n), t, d), alt=QueryInputs(alt_x, t.copy(), d.copy()),
                             statistic=statistic or ref.statistic, out_of_range=oor))


def nonstationarity_query(record: StandardizationRecord, predictor: str, delay: float,
                          timestamps: Sequence[float], ref: ReferenceConfig, step: Optional[float] = None,
                          statistic: Optional[str] = None) -> EffectQuery:
    """Effect of ref + step at a fixed delay as a function of the event's timestamp"""
    k = _predictor_index(ref, predictor)
    step = float(record.x_sd[record.predictor_names.index(predictor)]) if step is None else float(step)
    timestamps = np.asarray(timestamps, dtype=float)
    n = len(timestamps)
    alt_x = _tile(ref, n)
    alt_x[:, k] += step
    d = np.full(n, float(delay))
    oor = (timestamps < record.t_min) | (timestamps > record.t_max)
    return _flag(EffectQuery(kind='nonstationarity', axes={'timestamp': timestamps},
                             ref=QueryInputs(_tile(ref, n), timestamps.copy(), d),
                             alt=QueryInputs(alt_x, timestamps.copy(), d.copy()),
                             statistic=statistic or ref.statistic, out_of_range=oor))


@dataclass
class IrfQueryResult:
    """Pointwise median and band of an effect query"""

    kind: str
    axes: Dict[str, np.ndarray]
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    statistic: str
    n_samples: int
    quantiles: Sequence[float] = field(default_factory=lambda: tuple(config.BAND_QUANTILES))
    out_of_range: Optional[np.ndarray] = None

    def to_frame(self) -> pd.DataFrame:
        grids = np.meshgrid(*self.axes.values(), indexing='ij')
        frame = pd.DataFrame({name: grid.ravel() for name, grid in zip(self.axes, grids)})
        frame['statistic'] = self.statistic
        frame['lower'] = self.lower.ravel()
        frame['median'] = self.median.ravel()
        frame['upper'] = self.upper.ravel()
        if self.out_of_range is not None:
            frame['out_of_range'] = self.out_of_range.ravel()
        return frame

    def to_dict(self):
        return {
            'kind': self.kind,
            'statistic': self.statistic,
            'n_samples': self.n_samples,
            'quantiles': list(self.quantiles),
            'axes': {name: values.tolist() for name, values in self.axes.items()},
            'lower': self.lower.tolist(),
            'median': self.median.tolist(),
            'upper': self.upper.tolist(),
            'out_of_range': self.out_of_range.tolist() if self.out_of_range is not None else None,
        }

    def save_csv(self, path: str) -> str:
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        return path

    def save_json(self, path: str) -> str:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    def save_svg(self, path: str) -> str:
        """Line plot with band (1-D) or heatmap of the median (2-D)"""
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt

        names = list(self.axes)
        fig, ax = plt.subplots(figsize=(6, 4))
        if len(names) == 1:
            x = self.axes[names[0]]
            ax.fill_between(x, self.lower, self.upper, alpha=0.3, linewidth=0)
            ax.plot(x, self.median)
            ax.axhline(0.0, color='gray', linewidth=0.5)
            ax.set_xlabel(names[0])
            ax.set_ylabel(f"delta {self.statistic}")
        else:
            mesh = ax.pcolormesh(self.axes[names[1]], self.axes[names[0]], self.median, shading='auto')
            fig.colorbar(mesh, ax=ax, label=f"delta {self.statistic}")
            ax.set_xlabel(names[1])
            ax.set_ylabel(names[0])
        fig.tight_layout()
        fig.savefig(path, format='svg')
        plt.close(fig)
        return path


def point_result(query: EffectQuery, values: np.ndarray) -> IrfQueryResult:
    return IrfQueryResult(kind=query.kind, axes=query.axes, median=values, lower=values.copy(),
                          upper=values.copy(), statistic=query.statistic, n_samples=1,
                          out_of_range=query.out_of_range)


def effect_query(model: CDRNNModel, ref: QueryInputs, alt: QueryInputs, statistic: str = 'mu',
                 draw: Optional[ModelDraw] = None) -> np.ndarray:
    """statistic(alt) - statistic(ref) per configuration, eval mode"""
    if len(ref.d) != len(alt.d) or ref.x.shape != alt.x.shape:
        raise ConfigurationError("Reference and alternative configurations must share their shape")
    query = EffectQuery(kind='contrast', axes={'index': np.arange(len(ref.d))}, ref=ref, alt=alt,
                        statistic=statistic, out_of_range=np.zeros(len(ref.d), dtype=bool))
    return query.evaluate(model, draw)


def irf_curve(model: CDRNNModel, predictor: str, ref: Optional[ReferenceConfig] = None,
              step: Optional[float] = None, statistic: Optional[str] = None) -> IrfQueryResult:
    ref = ref or reference_config(model.record)
    query = curve_query(model.record, predictor, ref, step, statistic)
    return point_result(query, query.evaluate(model))


def irf_surface(model: CDRNNModel, predictor: str, values: Sequence[float],
                ref: Optional[ReferenceConfig] = None, statistic: Optional[str] = None) -> IrfQueryResult:
    ref = ref or reference_config(model.record)
    query = surface_query(model.record, predictor, values, ref, statistic)
    return point_result(query, query.evaluate(model))


def interaction_surface(model: CDRNNModel, predictor_a: str, predictor_b: str, delay: float,
                        values_a: Sequence[float], values_b: Sequence[float],
                        ref: Optional[ReferenceConfig] = None, statistic: Optional[str] = None) -> IrfQueryResult:
    ref = ref or reference_config(model.record)
    query = interaction_query(model.record, predictor_a, predictor_b, values_a, values_b, delay, ref, statistic)
    return point_result(query, query.evaluate(model))


def nonstationarity_slice(model: CDRNNModel, predictor: str, delay: float, timestamps: Sequence[float],
                          ref: Optional[ReferenceConfig] = None, step: Optional[float] = None,
                          statistic: Optional[str] = None) -> IrfQueryResult:
    ref = ref or reference_config(model.record)
    query = nonstationarity_query(model.record, predictor, delay, timestamps, ref, step, statistic)
    return point_result(query, query.evaluate(model))


def uncertainty_band(ensemble: Sequence[CDRNNModel], query: EffectQuery, n_samples: int = config.QUERY_SAMPLES,
                     quantiles: Sequence[float] = config.BAND_QUANTILES,
                     rng: Optional[np.random.Generator] = None) -> IrfQueryResult:
    """
    Pointwise quantiles over resampled models

    Each sample draws a component uniformly, then one dropout-mask set (and
    variational draw) that stays frozen for the entire query grid.

    Args:
        ensemble: Fitted components sharing one spec
        query: Query built against any component's standardization record
        n_samples: Number of full-grid samples (>= 2)
        quantiles: (lower, median, upper)
        rng: Seeded generator

    Returns:
        IrfQueryResult
    """
    if n_samples < 2:
        raise ConfigurationError(f"Uncertainty bands need at least 2 samples, got {n_samples}")
    if not ensemble:
        raise ConfigurationError("Uncertainty bands need at least one fitted model")
    if len(quantiles) != 3 or not (0 <= quantiles[0] <= quantiles[1] <= quantiles[2] <= 1):
        raise ConfigurationError(f"Quantiles must be ordered (lower, median, upper), got {list(quantiles)}")
    rng = rng or np.random.default_rng(0)
    samples = np.empty((n_samples,) + query.shape)
    for s in range(n_samples):
        model = ensemble[int(rng.integers(len(ensemble)))]
        draw = sample_draw(model.store, rng, shape=())
        samples[s] = query.evaluate(model, draw)
    lower, median, upper = np.quantile(samples, quantiles, axis=0)
    return IrfQueryResult(kind=query.kind, axes=query.axes, median=median, lower=lower, upper=upper,
                          statistic=query.statistic, n_samples=n_samples, quantiles=tuple(quantiles),
                          out_of_range=query.out_of_range)


def save_result(result: IrfQueryResult, out_dir: str, name: str, svg: bool = False) -> Dict[str, str]:
    """CSV and JSON plot data (plus SVG when requested)"""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'csv': result.save_csv(os.path.join(out_dir, f'{name}.csv')),
        'json': result.save_json(os.path.join(out_dir, f'{name}.json')),
    }
    if svg:
        paths['svg'] = result.save_svg(os.path.join(out_dir, f'{name}.svg'))
    return paths
