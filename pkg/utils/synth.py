"""
Synthetic Data Generator
Event streams with controlled timing, equicorrelated Gaussian predictors and
responses computed by exact convolution with known kernels
"""

import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy import stats

from utils.data_loader import DataLoader, EventStream, ResponseTable
from utils.errors import ConfigurationError


logger = logging.getLogger(__name__)

KERNEL_FAMILIES = ('exponential', 'normal', 'shifted_gamma')
SUBJECT_COLUMN = 'subject'
_CHUNK_ELEMENTS = 1 << 22


class KernelSpec(BaseModel):
    """Ground-truth impulse response: coefficient x probability density of the delay"""

    family: Literal['exponential', 'normal', 'shifted_gamma'] = 'exponential'
    rate: float = Field(1.0, gt=0)
    mean: float = 1.0
    sd: float = Field(0.5, gt=0)
    shape: float = Field(2.0, gt=0)
    shift: float = -0.5
    coefficient: float = 1.0
    transform: Literal['linear', 'quadratic'] = 'linear'

    def distribution(self):
        if self.family == 'exponential':
            return stats.expon(scale=1.0 / self.rate)
        if self.family == 'normal':
            return stats.norm(loc=self.mean, scale=self.sd)
        return stats.gamma(a=self.shape, loc=self.shift, scale=1.0 / self.rate)

    def apply_transform(self, x: np.ndarray) -> np.ndarray:
        return x ** 2 if self.transform == 'quadratic' else x


class NoiseModulation(BaseModel):
    """Noise SD multiplied by exp(strength * convolved signal of one predictor)"""

    predictor: str
    strength: float = 1.0


class SynthConfig(BaseModel):
    n_predictors: int = Field(2, ge=1)
    correlation: float = Field(0.0, ge=0, lt=1)
    noise_sd: float = Field(1.0, ge=0)
    timing: Literal['fixed', 'random', 'async'] = 'random'
    interval: float = Field(1.0, gt=0)
    n_events: int = Field(1000, ge=1)
    n_responses: Optional[int] = Field(None, ge=1)
    n_series: int = Field(1, ge=1)
    n_subjects: int = Field(0, ge=0)
    subject_sd: float = Field(0.0, ge=0)
    kernels: Dict[str, KernelSpec] = Field(default_factory=dict)
    noise_modulation: Optional[NoiseModulation] = None
    seed: int = 0

    @model_validator(mode='after')
    def _fill_kernels(self) -> 'SynthConfig':
        names = self.predictor_names
        unknown = sorted(set(self.kernels) - set(names))
        if unknown:
            raise ValueError(f"kernels given for unknown predictors {unknown}")
        for k, name in enumerate(names):
            if name not in self.kernels:
                self.kernels[name] = KernelSpec(family=KERNEL_FAMILIES[k % len(KERNEL_FAMILIES)])
        if self.noise_modulation is not None and self.noise_modulation.predictor not in names:
            raise ValueError(f"noise modulation predictor '{self.noise_modulation.predictor}' is not generated")
        return self

    @property
    def predictor_names(self) -> List[str]:
        return [f'x{k + 1}' for k in range(self.n_predictors)]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SynthConfig':
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError("Invalid synthetic-data configuration",
                                     violations=[f"{'.'.join(map(str, err['loc']))}: {err['msg']}"
                                                 for err in e.errors()])


def kernel_eval(kernel: KernelSpec, d) -> np.ndarray:
    """coefficient x density at delay d; zero outside the family's support"""
    d = np.asarray(d, dtype=float)
    value = kernel.coefficient * kernel.distribution().pdf(d)
    return float(value) if value.ndim == 0 else value


def gen_predictors(K: int, r: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal columns with pairwise correlation r"""
    corr = np.full((K, K), float(r))
    np.fill_diagonal(corr, 1.0)
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise ConfigurationError(f"Equicorrelation matrix with r={r} is not positive definite for K={K}")
    return rng.standard_normal((count, K)) @ chol.T


def _event_times(timing: str, interval: float, count: int, rng: np.random.Generator) -> np.ndarray:
    if timing == 'fixed':
        return np.arange(count) * interval
    gaps = rng.exponential(interval, size=count - 1)
    return np.concatenate([[0.0], np.cumsum(gaps)])


def gen_events(config: SynthConfig, rng: np.random.Generator) -> EventStream:
    """
    One stream per series: fixed timing puts events at n * interval, random and
    async timing draw exponential gaps with mean interval
    """
    series, times = [], []
    for s in range(config.n_series):
        series.append(np.full(config.n_events, f's{s}'))
        times.append(_event_times(config.timing, config.interval, config.n_events, rng))
    values = gen_predictors(config.n_predictors, config.correlation, config.n_events * config.n_series, rng)
    return EventStream(series=np.concatenate(series), times=np.concatenate(times), values=values,
                       predictor_names=config.predictor_names)


def gen_response_times(config: SynthConfig, events: EventStream, rng: np.random.Generator) -> ResponseTable:
    """
    Response timestamps with empty y: synchronous timings sample at event
    times, async draws an independent exponential process over each series span
    """
    n = config.n_responses or config.n_events
    series, times = [], []
    for key, rows in events.groups().items():
        event_times = events.times[rows]
        if config.timing == 'async':
            span = event_times[-1]
            gap = max(span, config.interval) / n
            tau = np.cumsum(rng.exponential(gap, size=n))
        else:
            tau = event_times[:n]
        series.append(np.full(len(tau), key))
        times.append(tau)
    series = np.concatenate(series)
    factors = {}
    if config.n_subjects:
        index = np.array([int(key[1:]) for key in series]) % config.n_subjects
        factors[SUBJECT_COLUMN] = np.array([f'subj{i}' for i in index])
    return ResponseTable(series=series, times=np.concatenate(times), y=np.zeros(len(series)), factors=factors)


def convolve_kernels(events: EventStream, kernels: Dict[str, KernelSpec], responses: ResponseTable,
                     predictors: Optional[Sequence[str]] = None) -> np.ndarray:
    """Exact sum over all past events of transform(x) x kernel(tau - t), per response"""
    names = list(predictors or kernels)
    signal = np.zeros(len(responses))
    groups = events.groups()
    for key in np.unique(responses.series):
        rows = np.flatnonzero(responses.series == key)
        ev = groups.get(key)
        if ev is None:
            continue
        t = events.times[ev]
        x = {name: kernels[name].apply_transform(events.column(name)[ev]) for name in names}
        step = max(1, _CHUNK_ELEMENTS // max(len(ev), 1))
        for start in range(0, len(rows), step):
            chunk = rows[start:start + step]
            delay = responses.times[chunk, None] - t[None, :]
            past = delay >= 0
            delay = np.where(past, delay, 0.0)
            total = np.zeros(len(chunk))
            for name in names:
                total += (np.where(past, kernel_eval(kernels[name], delay), 0.0) * x[name][None, :]).sum(axis=1)
            signal[chunk] = total
    return signal


def synth_response(events: EventStream, kernels: Dict[str, KernelSpec], noise_sd: float,
                   response_times: ResponseTable, rng: np.random.Generator,
                   noise_modulation: Optional[NoiseModulation] = None,
                   subject_effects: Optional[Dict[str, float]] = None) -> ResponseTable:
    """
    y(tau) = exact convolution of every predictor with its kernel + Normal(0, noise)

    Args:
        events: Event stream holding every kernel's predictor
        kernels: Predictor name -> ground-truth kernel
        noise_sd: Base noise SD
        response_times: Response series / timestamps (y is ignored)
        rng: Seeded generator
        noise_modulation: Optional heteroscedastic noise
        subject_effects: Optional additive offset per subject label

    Returns:
        ResponseTable with y filled in
    """
    missing = [name for name in kernels if name not in events.predictor_names]
    if missing:
        raise ConfigurationError(f"No events for kernel predictors {missing}")
    y = convolve_kernels(events, kernels, response_times)
    sd = np.full(len(y), float(noise_sd))
    if noise_modulation is not None:
        signal = convolve_kernels(events, kernels, response_times, [noise_modulation.predictor])
        sd = sd * np.exp(noise_modulation.strength * signal)
    if subject_effects and SUBJECT_COLUMN in response_times.factors:
        y = y + np.array([subject_effects[label] for label in response_times.factors[SUBJECT_COLUMN]])
    if noise_sd > 0:
        y = y + rng.normal(0.0, 1.0, size=len(y)) * sd
    return ResponseTable(series=response_times.series, times=response_times.times, y=y,
                         factors=dict(response_times.factors))


@dataclass
class SynthDataset:
    events: EventStream
    responses: ResponseTable
    truth: Dict[str, Any]


def generate(config: SynthConfig) -> SynthDataset:
    """Full dataset plus its ground-truth description"""
    rng = np.random.default_rng(config.seed)
    events = gen_events(config, rng)
    times = gen_response_times(config, events, rng)
    subject_effects = None
    if config.n_subjects:
        offsets = rng.normal(0.0, config.subject_sd, size=config.n_subjects) if config.subject_sd > 0 \
            else np.zeros(config.n_subjects)
        subject_effects = {f'subj{i}': float(v) for i, v in enumerate(offsets)}
    responses = synth_response(events, config.kernels, config.noise_sd, times, rng,
                               config.noise_modulation, subject_effects)
    truth = {
        'config': config.model_dump(mode='json'),
        'kernels': {name: kernel.model_dump(mode='json') for name, kernel in config.kernels.items()},
        'noise_sd': config.noise_sd,
        'seed': config.seed,
        'subject_effects': subject_effects or {},
    }
    logger.info("Generated %d events and %d responses (%s timing, r=%.2f, noise=%.3g)",
                len(events), len(responses), config.timing, config.correlation, config.noise_sd)
    return SynthDataset(events=events, responses=responses, truth=truth)


def write_dataset(dataset: SynthDataset, events_path: str, responses_path: str,
                  truth_path: Optional[str] = None) -> Dict[str, str]:
    """Event and response CSVs plus the ground-truth JSON sidecar"""
    truth_path = truth_path or os.path.join(os.path.dirname(os.path.abspath(events_path)), 'ground_truth.json')
    for path in (events_path, responses_path, truth_path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    loader = DataLoader()
    return {
        'events': loader.save_events(dataset.events, events_path),
        'responses': loader.save_responses(dataset.responses, responses_path),
        'ground_truth': loader.save_json(dataset.truth, truth_path),
    }
