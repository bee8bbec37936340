"""
Run Configuration
INI run files validated into pydantic models, data preparation shared by the
subcommands, and the run manifest
"""

import configparser
import hashlib
import json
import logging
import os
import typing
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from config import VERSION, config
from models.spec import (
    RANEF_TARGETS, IrfBlockSpec, ModelSpec, RandomFactorSpec, apply_constraint, ensure_valid,
)
from utils.data_loader import (
    PARTITIONS, AssembledBatch, DataLoader, EventStream, ResponseTable, StandardizationRecord,
    assemble_inputs, build_levels, fit_standardization, split_data,
)
from utils.errors import ConfigurationError


logger = logging.getLogger(__name__)


def _is_sequence(annotation) -> bool:
    if typing.get_origin(annotation) in (list, tuple):
        return True
    return any(typing.get_origin(arg) in (list, tuple) for arg in typing.get_args(annotation))


class _Section(BaseModel):
    """Splits comma-separated INI values into lists; blank values fall back to defaults"""

    @model_validator(mode='before')
    @classmethod
    def _from_ini(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        out = {}
        for key, value in data.items():
            if isinstance(value, str):
                value = value.strip()
                if value == '':
                    continue
                field = cls.model_fields.get(key)
                if field is not None and _is_sequence(field.annotation):
                    value = [v.strip() for v in value.split(',') if v.strip()]
            out[key] = value
        return out


class DataSection(_Section):
    events: str = 'events.csv'
    responses: str = 'responses.csv'
    output_dir: str = str(config.RUNS_DIR / 'default')
    random_factors: List[str] = Field(default_factory=list)


class ModelSection(_Section):
    predictors: List[str] = Field(default_factory=list)
    history_length: int = Field(config.HISTORY_LENGTH, ge=1)
    max_lookback: Optional[float] = Field(None, gt=0)
    f_in: Literal['identity', 'ffn'] = 'identity'
    f_in_hidden: List[int] = Field(default_factory=list)
    ranef_targets: List[str] = Field(default_factory=lambda: list(RANEF_TARGETS))
    constraint: str = ''
    seed: int = 0

    @property
    def constraints(self) -> List[str]:
        return self.constraint.split()


class BlockSection(_Section):
    name: str
    convolved: List[str]
    conditioning: List[str] = Field(default_factory=list)
    offset_d: bool = True
    timestamp_t: bool = True
    targets: List[str] = Field(default_factory=lambda: ['mu', 'sigma'])
    dirac: bool = False


class SplitSection(_Section):
    ratios: Tuple[float, float, float] = tuple(config.SPLIT_RATIOS)
    seed: int = 0


class QuerySection(_Section):
    kind: Literal['curve', 'surface', 'interaction', 'nonstationarity'] = 'curve'
    predictors: List[str] = Field(default_factory=list)
    statistic: Literal['mu', 'sigma', 'var'] = 'mu'
    horizon: float = Field(config.PLOT_HORIZON, gt=0)
    n_points: int = Field(config.DELAY_POINTS, ge=2)
    step: Optional[float] = None
    delay: float = Field(1.0, ge=0)
    n_values: int = Field(21, ge=2)
    samples: int = Field(config.QUERY_SAMPLES, ge=2)
    quantiles: Tuple[float, float, float] = tuple(config.BAND_QUANTILES)
    svg: bool = False
    seed: int = 0


class EnsembleSection(_Section):
    size: int = Field(config.ENSEMBLE_SIZE, ge=1)
    root_seed: int = 0
    n_jobs: int = Field(1, ge=1)
    retries: int = Field(1, ge=0)


class TestSection(_Section):
    __test__ = False

    iterations: int = Field(config.PERMUTATION_ITERATIONS, ge=1)
    seed: int = 0
    partition: Literal['train', 'exploratory', 'test'] = 'test'


class RunConfig(BaseModel):
    """Everything one run file declares"""

    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    blocks: List[BlockSection] = Field(default_factory=list)
    hyperparameters: Dict[str, str] = Field(default_factory=dict)
    split: SplitSection = Field(default_factory=SplitSection)
    query: QuerySection = Field(default_factory=QuerySection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    test: TestSection = Field(default_factory=TestSection)
    synth: Dict[str, str] = Field(default_factory=dict)
    kernels: Dict[str, Dict[str, str]] = Field(default_factory=dict)
    base_dir: str = '.'
    source_hash: str = ''

    @classmethod
    def from_ini(cls, path: str) -> 'RunConfig':
        """Parse and validate an INI run file"""
        if not os.path.exists(path):
            raise ConfigurationError(f"Run configuration not found: {path}")
        with open(path, 'rb') as f:
            raw = f.read()
        parser = configparser.ConfigParser(inline_comment_prefixes=('#',), interpolation=None)
        try:
            parser.read_string(raw.decode('utf-8'), source=path)
        except (configparser.Error, UnicodeDecodeError) as e:
            raise ConfigurationError(f"Could not parse run configuration: {e}")

        data: Dict[str, Any] = {'blocks': [], 'kernels': {}, 'base_dir': os.path.dirname(os.path.abspath(path)),
                                'source_hash': hashlib.sha256(raw).hexdigest()}
        simple = ('data', 'model', 'hyperparameters', 'split', 'query', 'ensemble', 'test', 'synth')
        for section in parser.sections():
            values = dict(parser.items(section))
            if section in simple:
                data[section] = values
            elif section.startswith('block:'):
                data['blocks'].append({'name': section.split(':', 1)[1].strip(), **values})
            elif section.startswith('kernel:'):
                data['kernels'][section.split(':', 1)[1].strip()] = values
            else:
                raise ConfigurationError(f"Unknown section [{section}] in {path}")
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError("Invalid run configuration",
                                     violations=[f"{'.'.join(map(str, err['loc']))}: {err['msg']}"
                                                 for err in e.errors()])

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    @property
    def output_dir(self) -> str:
        return self.resolve(self.data.output_dir)

    def synth_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = dict(self.synth)
        if 'noise_modulation' in out:
            predictor, _, strength = out['noise_modulation'].partition(':')
            out['noise_modulation'] = {'predictor': predictor.strip(), 'strength': float(strength or 1.0)}
        out['kernels'] = dict(self.kernels)
        return out

    def build_spec(self, event_predictors: List[str], levels: Dict[str, List[str]]) -> ModelSpec:
        """Model spec from [model], [block:*] and [hyperparameters], constraints applied"""
        predictors = self.model.predictors or list(event_predictors)
        payload: Dict[str, Any] = {
            'predictor_names': predictors,
            'history_length': self.model.history_length,
            'max_lookback': self.model.max_lookback,
            'f_in': {'kind': self.model.f_in, 'hidden_units': self.model.f_in_hidden},
            'hyperparameters': dict(self.hyperparameters),
            'random_factors': [RandomFactorSpec(name=name, n_levels=len(levels[name]),
                                                targets=self.model.ranef_targets).model_dump()
                               for name in self.data.random_factors],
        }
        if self.blocks:
            payload['irf_blocks'] = [IrfBlockSpec(
                name=b.name, convolved_features=b.convolved, conditioning_features=b.conditioning,
                include_offset_d=b.offset_d, include_timestamp_t=b.timestamp_t, target_params=b.targets,
                dirac_delta=b.dirac).model_dump() for b in self.blocks]
            spec = ModelSpec.from_dict(payload)
        else:
            spec = ModelSpec.base(predictors, **{k: v for k, v in payload.items() if k != 'predictor_names'})
        for constraint in self.model.constraints:
            spec = apply_constraint(spec, constraint)
        return ensure_valid(spec)


@dataclass
class PreparedData:
    events: EventStream
    responses: ResponseTable
    partition: Dict[str, Any]
    record: StandardizationRecord
    levels: Dict[str, List[str]]
    spec: ModelSpec

    def batch(self, name: str) -> AssembledBatch:
        """Assembled windows of one partition; item ids are response row numbers"""
        if name not in PARTITIONS:
            raise ConfigurationError(f"Unknown partition '{name}'")
        index = self.partition[name]
        batch = assemble_inputs(self.events, self.responses.subset(index), self.spec, self.record, self.levels)
        batch.item_index = index.copy()
        return batch


def prepare_data(run: RunConfig, spec: Optional[ModelSpec] = None, record: Optional[StandardizationRecord] = None,
                 levels: Optional[Dict[str, List[str]]] = None) -> PreparedData:
    """
    Load, partition and standardize the run's data

    A fitted model's spec, standardization record and levels can be passed to
    evaluate it on the same partitions.
    """
    loader = DataLoader()
    responses = loader.load_responses(run.resolve(run.data.responses), run.data.random_factors)
    wanted = run.model.predictors or (spec.predictor_names if spec else None)
    events = loader.load_events(run.resolve(run.data.events), wanted)
    partition = split_data(len(responses), run.split.ratios, run.split.seed)
    if levels is None:
        levels = build_levels(responses, run.data.random_factors)
    if spec is None:
        spec = run.build_spec(events.predictor_names, levels)
    if record is None:
        record = fit_standardization(events, responses.subset(partition['train']), spec.predictor_names)
    logger.info("Partitioned %d responses: %s", len(responses),
                ", ".join(f"{name}={len(idx)}" for name, idx in partition.items()))
    return PreparedData(events=events, responses=responses, partition=partition, record=record,
                        levels=levels, spec=spec)


class RunManifest(BaseModel):
    """What a subcommand produced and from which inputs"""

    command: str
    config_hash: str
    code_version: str = VERSION
    seeds: Dict[str, int] = Field(default_factory=dict)
    started_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_at: Optional[str] = None
    artifacts: Dict[str, str] = Field(default_factory=dict)

    def write(self, out_dir: str, name: Optional[str] = None) -> str:
        """Stamp the finish time and write atomically"""
        self.finished_at = datetime.now(timezone.utc).isoformat()
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, name or f'manifest_{self.command}.json')
        tmp = path + '.tmp'
        with open(tmp, 'w', encoding='utf-8') as f:
            json.dump(self.model_dump(mode='json'), f, indent=2, sort_keys=True)
        os.replace(tmp, path)
        return path
