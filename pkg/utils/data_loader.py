"""
Data Loader Module
Loads event and response tables, standardizes them and assembles the
history windows the model convolves over
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from config import config
from utils.errors import ConfigurationError, DataError


logger = logging.getLogger(__name__)

SERIES_COLUMN = 'series_id'
TIME_COLUMN = 'time'
RESPONSE_COLUMN = 'y'
PARTITIONS = ('train', 'exploratory', 'test')


@dataclass
class EventStream:
    """Timestamped predictor vectors grouped by series, sorted by (series, time)"""

    series: np.ndarray
    times: np.ndarray
    values: np.ndarray
    predictor_names: List[str]

    def __post_init__(self):
        self.series = np.asarray(self.series).astype(str)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            self.values = self.values.reshape(len(self.times), -1)
        order = np.lexsort((self.times, self.series))
        if not np.array_equal(order, np.arange(len(order))):
            self.series, self.times, self.values = self.series[order], self.times[order], self.values[order]

    def __len__(self) -> int:
        return len(self.times)

    def groups(self) -> Dict[str, np.ndarray]:
        """Series key -> row indices in time order"""
        keys, starts, counts = np.unique(self.series, return_index=True, return_counts=True)
        return {key: np.arange(start, start + count) for key, start, count in zip(keys, starts, counts)}

    def column(self, name: str) -> np.ndarray:
        if name not in self.predictor_names:
            raise DataError(f"Event stream has no predictor '{name}'", column=name)
        return self.values[:, self.predictor_names.index(name)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({SERIES_COLUMN: self.series, TIME_COLUMN: self.times})
        for j, name in enumerate(self.predictor_names):
            frame[name] = self.values[:, j]
        return frame


@dataclass
class ResponseTable:
    """Response samples with timestamps and random-factor labels (file order kept)"""

    series: np.ndarray
    times: np.ndarray
    y: np.ndarray
    factors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.series = np.asarray(self.series).astype(str)
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.factors = {name: np.asarray(labels).astype(str) for name, labels in self.factors.items()}

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, index: np.ndarray) -> 'ResponseTable':
        index = np.asarray(index, dtype=int)
        return ResponseTable(series=self.series[index], times=self.times[index], y=self.y[index],
                             factors={name: labels[index] for name, labels in self.factors.items()})

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({SERIES_COLUMN: self.series, TIME_COLUMN: self.times, RESPONSE_COLUMN: self.y})
        for name, labels in self.factors.items():
            frame[name] = labels
        return frame


@dataclass
class StandardizationRecord:
    """Training-set scales (SD only, no centering) and reference statistics"""

    predictor_names: List[str]
    x_sd: np.ndarray
    y_sd: float
    t_sd: float
    x_mean: np.ndarray
    t_mean: float
    x_min: np.ndarray
    x_max: np.ndarray
    t_min: float
    t_max: float

    def to_dict(self) -> Dict[str, Any]:
        return {key: (value.tolist() if isinstance(value, np.ndarray) else value)
                for key, value in self.__dict__.items()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'StandardizationRecord':
        arrays = ('x_sd', 'x_mean', 'x_min', 'x_max')
        return cls(**{key: (np.asarray(value, dtype=float) if key in arrays else value)
                      for key, value in data.items()})

    def standardize_y(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) / self.y_sd

    def destandardize_y(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.y_sd


def fit_standardization(events: EventStream, responses: ResponseTable,
                        predictor_names: Optional[Sequence[str]] = None) -> StandardizationRecord:
    """Fit SD-only scalers on the training events and responses"""
    names = list(predictor_names or events.predictor_names)
    if len(events) == 0 or len(responses) == 0:
        raise DataError("Cannot standardize an empty training set")
    x = np.column_stack([events.column(name) for name in names]) if names else np.zeros((len(events), 0))
    x_scaler = StandardScaler(with_mean=False).fit(x) if names else None
    y_scaler = StandardScaler(with_mean=False).fit(responses.y.reshape(-1, 1))
    t_scaler = StandardScaler(with_mean=False).fit(events.times.reshape(-1, 1))
    return StandardizationRecord(
        predictor_names=names,
        x_sd=np.asarray(x_scaler.scale_, dtype=float) if names else np.zeros(0),
        y_sd=float(y_scaler.scale_[0]),
        t_sd=float(t_scaler.scale_[0]),
        x_mean=x.mean(axis=0),
        t_mean=float(events.times.mean()),
        x_min=x.min(axis=0) if names else np.zeros(0),
        x_max=x.max(axis=0) if names else np.zeros(0),
        t_min=float(events.times.min()),
        t_max=float(events.times.max()),
    )


@dataclass
class AssembledBatch:
    """
    History windows for M responses, newest event last.

    X holds standardized predictor values, t scaled timestamps, d raw offsets
    tau - t in seconds; masked rows are all zeros.
    """

    X: np.ndarray
    t: np.ndarray
    d: np.ndarray
    mask: np.ndarray
    y: np.ndarray
    tau: np.ndarray
    z: np.ndarray
    item_index: np.ndarray
    record: StandardizationRecord

    def __len__(self) -> int:
        return len(self.y)

    @property
    def last_valid(self) -> np.ndarray:
        """Mask selecting only the most recent valid row of each window"""
        last = np.zeros_like(self.mask)
        has_any = self.mask.any(axis=1)
        idx = self.mask.shape[1] - 1 - np.argmax(self.mask[:, ::-1], axis=1)
        last[np.flatnonzero(has_any), idx[has_any]] = True
        return last

    def subset(self, index: np.ndarray) -> 'AssembledBatch':
        index = np.asarray(index, dtype=int)
        return AssembledBatch(X=self.X[index], t=self.t[index], d=self.d[index], mask=self.mask[index],
                              y=self.y[index], tau=self.tau[index], z=self.z[index],
                              item_index=self.item_index[index], record=self.record)


def build_levels(responses: ResponseTable, factor_names: Sequence[str]) -> Dict[str, List[str]]:
    """Sorted level labels per random factor"""
    levels = {}
    for name in factor_names:
        if name not in responses.factors:
            raise DataError(f"Responses have no random-factor column '{name}'", column=name)
        levels[name] = sorted(set(responses.factors[name].tolist()))
    return levels


def encode_levels(responses: ResponseTable, levels: Dict[str, List[str]]) -> np.ndarray:
    """(M, F) level indices; unknown labels are a data error"""
    z = np.zeros((len(responses), len(levels)), dtype=int)
    for f, (name, labels) in enumerate(levels.items()):
        if name not in responses.factors:
            raise DataError(f"Responses have no random-factor column '{name}'", column=name)
        lookup = {label: i for i, label in enumerate(labels)}
        for m, label in enumerate(responses.factors[name]):
            if label not in lookup:
                raise DataError(f"Unknown level '{label}' of random factor '{name}'", line=m + 2, column=name)
            z[m, f] = lookup[label]
    return z


def assemble_inputs(events: EventStream, responses: ResponseTable, spec,
                    record: StandardizationRecord,
                    levels: Optional[Dict[str, List[str]]] = None) -> AssembledBatch:
    """
    Build one history window per response

    Each window holds the history_length most recent events with t <= tau
    (and tau - t <= max_lookback when set), right-aligned and mask-padded.

    Args:
        events: Event stream
        responses: Response table sharing series keys with the events
        spec: ModelSpec
        record: Training standardization record
        levels: Random-factor level labels (ordered like spec.random_factors)

    Returns:
        AssembledBatch covering every response
    """
    T = spec.history_length
    names = list(spec.predictor_names)
    cols = [events.predictor_names.index(n) if n in events.predictor_names else None for n in names]
    missing = [n for n, c in zip(names, cols) if c is None]
    if missing:
        raise DataError(f"Event stream is missing predictors {missing}", column=missing[0])
    M, K = len(responses), len(names)

    X = np.zeros((M, T, K))
    t_raw = np.zeros((M, T))
    d = np.zeros((M, T))
    mask = np.zeros((M, T), dtype=bool)
    offsets = np.arange(-T, 0)

    groups = events.groups()
    for key in np.unique(responses.series):
        rows = np.flatnonzero(responses.series == key)
        ev = groups.get(key)
        if ev is None or len(ev) == 0:
            continue
        times = events.times[ev]
        tau = responses.times[rows]
        end = np.searchsorted(times, tau, side='right')
        if spec.max_lookback is not None:
            lo = np.searchsorted(times, tau - spec.max_lookback, side='left')
        else:
            lo = np.zeros_like(end)
        pos = end[:, None] + offsets[None, :]
        valid = pos >= lo[:, None]
        gather = ev[np.clip(pos, 0, None)]
        X[rows] = np.where(valid[..., None], events.values[gather][..., cols], 0.0)
        t_raw[rows] = np.where(valid, events.times[gather], 0.0)
        d[rows] = np.where(valid, tau[:, None] - events.times[gather], 0.0)
        mask[rows] = valid

    if levels:
        z = encode_levels(responses, levels)
    else:
        z = np.zeros((M, 0), dtype=int)

    x_sd = np.asarray(record.x_sd, dtype=float)[[record.predictor_names.index(n) for n in names]] if K else np.ones(0)
    return AssembledBatch(
        X=X / x_sd,
        t=t_raw / record.t_sd,
        d=d,
        mask=mask,
        y=record.standardize_y(responses.y),
        tau=responses.times.copy(),
        z=z,
        item_index=np.arange(M),
        record=record,
    )


def split_data(n_items: int, ratios: Sequence[float] = config.SPLIT_RATIOS,
               seed: int = 0) -> Dict[str, np.ndarray]:
    """
    Deterministic train / exploratory / test partition

    Items are ranked by a seeded SHA-256 hash of their index and cut into
    contiguous runs whose sizes follow the largest-remainder rule.

    Returns:
        Partition name -> sorted item indices
    """
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != len(PARTITIONS) or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"Split ratios must be three nonnegative values summing to 1, got {ratios.tolist()}")
    keys = np.array([
        int.from_bytes(hashlib.sha256(f"{seed}:{i}".encode('utf-8')).digest()[:8], 'big')
        for i in range(n_items)
    ], dtype=np.uint64)
    order = np.argsort(keys, kind='stable')

    exact = ratios * n_items
    counts = np.floor(exact).astype(int)
    shortfall = n_items - counts.sum()
    for j in np.argsort(-(exact - counts), kind='stable')[:shortfall]:
        counts[j] += 1

    partition, start = {}, 0
    for name, count in zip(PARTITIONS, counts):
        partition[name] = np.sort(order[start:start + count])
        start += count
    return partition


class DataLoader:
    """Reads and writes the event / response CSV schemas"""

    def __init__(self, data_dir: Optional[str] = None):
        self.data_dir = data_dir

    def _path(self, filename: str) -> str:
        if self.data_dir is None or os.path.isabs(filename):
            return filename
        return os.path.join(self.data_dir, filename)

    def _read_csv(self, filename: str, required: Sequence[str]) -> pd.DataFrame:
        path = self._path(filename)
        if not os.path.exists(path):
            raise DataError("File not found", file=path)
        try:
            frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
        except (pd.errors.ParserError, UnicodeDecodeError) as e:
            raise DataError(f"Could not parse CSV: {e}", file=path)
        for column in required:
            if column not in frame.columns:
                raise DataError(f"Missing required column '{column}'", file=path, line=1, column=column)
        return frame

    @staticmethod
    def _numeric(frame: pd.DataFrame, column: str, path: str) -> np.ndarray:
        values = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(values))
        if len(bad):
            row = int(bad[0])
            raise DataError(f"Non-numeric value '{frame[column].iloc[row]}'", file=path, line=row + 2, column=column)
        return values

    def load_events(self, filename: str, predictor_names: Optional[Sequence[str]] = None) -> EventStream:
        """Load events.csv: series_id,time,<predictors...>"""
        path = self._path(filename)
        frame = self._read_csv(filename, [SERIES_COLUMN, TIME_COLUMN])
        names = list(predictor_names) if predictor_names else [
            c for c in frame.columns if c not in (SERIES_COLUMN, TIME_COLUMN)
        ]
        for name in names:
            if name not in frame.columns:
                raise DataError(f"Missing predictor column '{name}'", file=path, line=1, column=name)
        values = np.column_stack([self._numeric(frame, name, path) for name in names]) if names \
            else np.zeros((len(frame), 0))
        events = EventStream(series=frame[SERIES_COLUMN].to_numpy(), times=self._numeric(frame, TIME_COLUMN, path),
                             values=values, predictor_names=names)
        logger.info("Loaded %d events with %d predictors from %s", len(events), len(names), path)
        return events

    def load_responses(self, filename: str, factor_names: Sequence[str] = ()) -> ResponseTable:
        """Load responses.csv: series_id,time,y,<random-factor columns...>"""
        path = self._path(filename)
        frame = self._read_csv(filename, [SERIES_COLUMN, TIME_COLUMN, RESPONSE_COLUMN, *factor_names])
        responses = ResponseTable(
            series=frame[SERIES_COLUMN].to_numpy(),
            times=self._numeric(frame, TIME_COLUMN, path),
            y=self._numeric(frame, RESPONSE_COLUMN, path),
            factors={name: frame[name].to_numpy() for name in factor_names},
        )
        logger.info("Loaded %d responses from %s", len(responses), path)
        return responses

    def save_events(self, events: EventStream, filename: str) -> str:
        path = self._path(filename)
        events.to_frame().to_csv(path, index=False, float_format='%.17g')
        return path

    def save_responses(self, responses: ResponseTable, filename: str) -> str:
        path = self._path(filename)
        responses.to_frame().to_csv(path, index=False, float_format='%.17g')
        return path

    def save_json(self, payload: Dict[str, Any], filename: str) -> str:
        path = self._path(filename)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return path
