"""
Model Specification
Declarative description of a CDRNN (predictors, IRF blocks, random factors,
hyperparameters) and constructors for the constrained models used as nulls
"""

from collections import Counter
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, ValidationError

from config import config
from utils.errors import ConfigurationError


RATE = 'rate'
DIST_PARAMS = ('mu', 'sigma')
RANEF_TARGETS = ('irf_bias', 'coef', 's0')


class IrfBlockSpec(BaseModel):
    """One IRF network and the slice of G it produces"""

    name: str = 'irf'
    convolved_features: List[str]
    conditioning_features: List[str] = Field(default_factory=list)
    include_offset_d: bool = True
    include_timestamp_t: bool = True
    target_params: List[str] = Field(default_factory=lambda: list(DIST_PARAMS))
    dirac_delta: bool = False

    @property
    def n_inputs(self) -> int:
        return int(self.include_offset_d) + int(self.include_timestamp_t) + len(self.conditioning_features)

    @property
    def n_outputs(self) -> int:
        return len(self.target_params) * len(self.convolved_features)


class InputTransformSpec(BaseModel):
    """f_in: identity, or an FFN mapping [t; x] to K impulse dimensions"""

    kind: Literal['identity', 'ffn'] = 'identity'
    hidden_units: List[int] = Field(default_factory=list)


class RandomFactorSpec(BaseModel):
    """A grouping factor whose levels receive centered parameter offsets"""

    name: str
    n_levels: int = Field(ge=1)
    targets: List[str] = Field(default_factory=lambda: list(RANEF_TARGETS))


class Hyperparameters(BaseModel):
    """Network, regularization and optimization settings"""

    hidden_layers: int = Field(config.HIDDEN_LAYERS, ge=0)
    hidden_units: int = Field(config.HIDDEN_UNITS, ge=1)
    weight_l2: float = Field(config.WEIGHT_L2, ge=0)
    ranef_l2: float = Field(config.RANEF_L2, ge=0)
    ranef_prior_scale: float = Field(config.RANEF_PRIOR_SCALE, gt=0)
    dropout: float = Field(config.DROPOUT, ge=0)
    learning_rate: float = Field(config.LEARNING_RATE, gt=0)
    batch_size: int = Field(config.BATCH_SIZE, ge=1)
    inference: Literal['mle', 'variational'] = config.INFERENCE
    epsilon: float = Field(config.EPSILON, gt=0)

    max_epochs: int = Field(config.MAX_EPOCHS, ge=1)
    checkpoint_every: int = Field(config.CHECKPOINT_EVERY, ge=1)
    max_restores: int = Field(config.MAX_RESTORES, ge=1)
    clip_norm: float = Field(config.CLIP_NORM, gt=0)
    ema_decay: float = Field(config.EMA_DECAY, ge=0, lt=1)
    guard_decay: float = Field(config.GUARD_DECAY, ge=0, lt=1)
    guard_threshold: float = Field(config.GUARD_THRESHOLD, gt=0)
    convergence_window: int = Field(config.CONVERGENCE_WINDOW, ge=3)
    convergence_alpha: float = Field(config.CONVERGENCE_ALPHA, gt=0, le=1)
    convergence_metric: Literal['train', 'exploratory'] = 'train'
    exploratory_every: int = Field(config.EXPLORATORY_EVERY, ge=1)


class ModelSpec(BaseModel):
    """Complete declarative description of a full or constrained CDRNN"""

    predictor_names: List[str]
    f_in: InputTransformSpec = Field(default_factory=InputTransformSpec)
    irf_blocks: List[IrfBlockSpec]
    distribution: Literal['normal'] = 'normal'
    history_length: int = Field(config.HISTORY_LENGTH, ge=1)
    max_lookback: Optional[float] = Field(None, gt=0)
    random_factors: List[RandomFactorSpec] = Field(default_factory=list)
    hyperparameters: Hyperparameters = Field(default_factory=Hyperparameters)
    ablated: List[Tuple[str, str]] = Field(default_factory=list)

    @property
    def features(self) -> List[str]:
        """Convolved feature columns: rate first, then the predictors"""
        return [RATE] + list(self.predictor_names)

    @property
    def n_features(self) -> int:
        return len(self.predictor_names) + 1

    @property
    def rescale(self) -> float:
        """1 / (T_hist * (J + 1)) applied to the convolution sum"""
        return 1.0 / (self.history_length * self.n_features)

    @classmethod
    def base(cls, predictor_names: Sequence[str], **kwargs: Any) -> 'ModelSpec':
        """A single unconstrained block convolving every feature for both parameters"""
        block = IrfBlockSpec(
            name='irf',
            convolved_features=[RATE] + list(predictor_names),
            conditioning_features=list(predictor_names),
        )
        return cls.from_dict({'predictor_names': list(predictor_names), 'irf_blocks': [block], **kwargs})

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelSpec':
        """Build a spec, turning field errors into ConfigurationError"""
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError("Invalid model specification",
                                     violations=[f"{'.'.join(map(str, err['loc']))}: {err['msg']}"
                                                 for err in e.errors()])


def validate_spec(spec: ModelSpec) -> List[str]:
    """
    Check block coverage and exclusivity plus the structural invariants

    Returns:
        List of violation messages; empty when the model is well formed
    """
    violations: List[str] = []
    predictors = list(spec.predictor_names)
    features = set(spec.features)

    for name, count in Counter(predictors).items():
        if count > 1:
            violations.append(f"predictor '{name}' is declared {count} times")
    if RATE in predictors:
        violations.append(f"'{RATE}' is reserved and cannot be a predictor name")
    if not spec.irf_blocks:
        violations.append("at least one IRF block is required")
    for name, count in Counter(b.name for b in spec.irf_blocks).items():
        if count > 1:
            violations.append(f"block name '{name}' is used {count} times")

    coverage: Counter = Counter()
    for block in spec.irf_blocks:
        where = f"block '{block.name}'"
        if not block.convolved_features:
            violations.append(f"{where}: convolved feature set is empty")
        for feature in block.convolved_features:
            if feature not in features:
                violations.append(f"{where}: convolved feature '{feature}' is not a model feature")
        for feature in block.conditioning_features:
            if feature == RATE:
                violations.append(f"{where}: '{RATE}' is convolved-only and cannot condition the IRF")
            elif feature not in predictors:
                violations.append(f"{where}: conditioning feature '{feature}' is not a predictor")
        for label, items in (('convolved', block.convolved_features),
                             ('conditioning', block.conditioning_features),
                             ('target', block.target_params)):
            for item, count in Counter(items).items():
                if count > 1:
                    violations.append(f"{where}: {label} entry '{item}' is repeated")
        if not block.target_params:
            violations.append(f"{where}: target_params is empty")
        for param in block.target_params:
            if param not in DIST_PARAMS:
                violations.append(f"{where}: unknown distribution parameter '{param}'")
        if block.dirac_delta and block.include_offset_d:
            violations.append(f"{where}: a Dirac-delta block cannot take the offset d as input")
        for feature in set(block.convolved_features):
            for param in set(block.target_params):
                coverage[(feature, param)] += 1

    ablated = {tuple(pair) for pair in spec.ablated}
    for feature, param in ablated:
        if feature not in features or param not in DIST_PARAMS:
            violations.append(f"ablated pair ({feature}, {param}) is not a model (feature, parameter) pair")
    for feature in spec.features:
        for param in DIST_PARAMS:
            count = coverage[(feature, param)]
            if (feature, param) in ablated:
                if count:
                    violations.append(f"({feature}, {param}) is declared ablated but convolved by {count} block(s)")
            elif count == 0:
                violations.append(f"({feature}, {param}) is not covered by any block")
            elif count > 1:
                violations.append(f"({feature}, {param}) is covered by {count} blocks")

    for name, count in Counter(f.name for f in spec.random_factors).items():
        if count > 1:
            violations.append(f"random factor '{name}' is declared {count} times")
    for factor in spec.random_factors:
        for target in factor.targets:
            if target not in RANEF_TARGETS:
                violations.append(f"random factor '{factor.name}': unknown target '{target}'")

    if not 0.0 <= spec.hyperparameters.dropout < 1.0:
        violations.append(f"dropout rate {spec.hyperparameters.dropout} is outside [0, 1)")
    if spec.f_in.kind == 'ffn' and any(u < 1 for u in spec.f_in.hidden_units):
        violations.append("f_in hidden layer sizes must be positive")
    return violations


def ensure_valid(spec: ModelSpec) -> ModelSpec:
    """Raise ConfigurationError carrying the validate_spec report"""
    violations = validate_spec(spec)
    if violations:
        raise ConfigurationError("Model specification failed validation", violations=violations)
    return spec


# ---------------------------------------------------------------------------
# Constrained-model constructors
# ---------------------------------------------------------------------------

def _require_predictor(spec: ModelSpec, *names: str):
    for name in names:
        if name not in spec.predictor_names:
            raise ConfigurationError(f"'{name}' is not a predictor of this model")


def _without(items: Sequence[str], *drop: str) -> List[str]:
    return [item for item in items if item not in drop]


def without_predictor(spec: ModelSpec, predictor: str) -> ModelSpec:
    """Remove a predictor from the model altogether"""
    _require_predictor(spec, predictor)
    blocks = []
    for block in spec.irf_blocks:
        convolved = _without(block.convolved_features, predictor)
        if convolved:
            blocks.append(block.model_copy(update={
                'convolved_features': convolved,
                'conditioning_features': _without(block.conditioning_features, predictor),
            }))
    return spec.model_copy(update={
        'predictor_names': _without(spec.predictor_names, predictor),
        'irf_blocks': blocks,
        'ablated': [pair for pair in spec.ablated if pair[0] != predictor],
    })


def linearize(spec: ModelSpec, predictor: str) -> ModelSpec:
    """Keep the predictor convolved but hide it from every IRF network input"""
    _require_predictor(spec, predictor)
    blocks = [block.model_copy(update={'conditioning_features': _without(block.conditioning_features, predictor)})
              for block in spec.irf_blocks]
    return spec.model_copy(update={'irf_blocks': blocks})


def split_interaction(spec: ModelSpec, a: str, b: str, ablate: bool = True) -> ModelSpec:
    """
    Two networks per block: one convolving everything but b, one convolving b.

    With ablate the first cannot see b and the second cannot see a, removing the
    a-by-b interaction; without it the same two-network layout keeps every input.
    """
    _require_predictor(spec, a, b)
    blocks = []
    for block in spec.irf_blocks:
        if b not in block.convolved_features:
            cond = _without(block.conditioning_features, b) if ablate else list(block.conditioning_features)
            blocks.append(block.model_copy(update={'conditioning_features': cond}))
            continue
        rest = _without(block.convolved_features, b)
        if rest:
            blocks.append(block.model_copy(update={
                'name': f"{block.name}_no_{b}",
                'convolved_features': rest,
                'conditioning_features': (_without(block.conditioning_features, b) if ablate
                                          else list(block.conditioning_features)),
            }))
        blocks.append(block.model_copy(update={
            'name': f"{block.name}_{b}",
            'convolved_features': [b],
            'conditioning_features': (_without(block.conditioning_features, a) if ablate
                                      else list(block.conditioning_features)),
        }))
    return spec.model_copy(update={'irf_blocks': blocks})


def split_distribution(spec: ModelSpec) -> ModelSpec:
    """Give each distribution parameter its own network"""
    blocks = []
    for block in spec.irf_blocks:
        if len(block.target_params) == 1:
            blocks.append(block)
            continue
        for param in block.target_params:
            blocks.append(block.model_copy(update={'name': f"{block.name}_{param}", 'target_params': [param]}))
    return spec.model_copy(update={'irf_blocks': blocks})


def ablate_parameter_effects(spec: ModelSpec, param: str,
                             predictors: Optional[Sequence[str]] = None) -> ModelSpec:
    """
    Remove the effects of predictors on one distribution parameter only

    Args:
        spec: Model to constrain
        param: 'mu' or 'sigma'
        predictors: Predictors to remove; all predictors when None
    """
    if param not in DIST_PARAMS:
        raise ConfigurationError(f"Unknown distribution parameter '{param}'")
    predictors = list(spec.predictor_names if predictors is None else predictors)
    _require_predictor(spec, *predictors)
    split = split_distribution(spec)
    blocks = []
    ablated = list(split.ablated)
    for block in split.irf_blocks:
        if block.target_params != [param]:
            blocks.append(block)
            continue
        for p in predictors:
            if p in block.convolved_features and (p, param) not in ablated:
                ablated.append((p, param))
        convolved = _without(block.convolved_features, *predictors)
        if convolved:
            blocks.append(block.model_copy(update={
                'convolved_features': convolved,
                'conditioning_features': _without(block.conditioning_features, *predictors),
            }))
    return split.model_copy(update={'irf_blocks': blocks, 'ablated': ablated})


def mu_only(spec: ModelSpec) -> ModelSpec:
    """Predictors may affect mu but not sigma"""
    return ablate_parameter_effects(spec, 'sigma')


def stationarize(spec: ModelSpec, predictor: str, ablate: bool = True) -> ModelSpec:
    """
    Make the response to one predictor independent of event timestamps.

    The predictor moves to a network without the timestamp input (conditioned on
    every predictor, so interactions survive); timestamped networks stop seeing it.
    Without ablate the two-network layout keeps the timestamp everywhere.
    """
    _require_predictor(spec, predictor)
    blocks = []
    for block in spec.irf_blocks:
        timed_cond = (_without(block.conditioning_features, predictor)
                      if ablate and block.include_timestamp_t else list(block.conditioning_features))
        if predictor not in block.convolved_features:
            blocks.append(block.model_copy(update={'conditioning_features': timed_cond}))
            continue
        rest = _without(block.convolved_features, predictor)
        if rest:
            blocks.append(block.model_copy(update={
                'name': f"{block.name}_no_{predictor}",
                'convolved_features': rest,
                'conditioning_features': timed_cond,
            }))
        blocks.append(block.model_copy(update={
            'name': f"{block.name}_{predictor}",
            'convolved_features': [predictor],
            'conditioning_features': list(spec.predictor_names),
            'include_timestamp_t': block.include_timestamp_t and not ablate,
        }))
    return spec.model_copy(update={'irf_blocks': blocks})


def apply_constraint(spec: ModelSpec, constraint: str) -> ModelSpec:
    """
    Apply a constraint written as 'kind[:arg[:arg]]', e.g. 'linear:A',
    'interaction:A,B', 'distribution:sigma:A', 'stationary:A', 'mu_only'
    """
    kind, _, rest = constraint.strip().partition(':')
    args = [a.strip() for a in rest.replace(':', ',').split(',') if a.strip()]
    try:
        if kind == 'drop':
            return without_predictor(spec, args[0])
        if kind == 'linear':
            return linearize(spec, args[0])
        if kind in ('interaction', 'interaction_full'):
            return split_interaction(spec, args[0], args[1], ablate=kind == 'interaction')
        if kind == 'split_distribution':
            return split_distribution(spec)
        if kind == 'distribution':
            return ablate_parameter_effects(spec, args[0], args[1:] or None)
        if kind == 'mu_only':
            return mu_only(spec)
        if kind in ('stationary', 'stationary_full'):
            return stationarize(spec, args[0], ablate=kind == 'stationary')
    except IndexError:
        raise ConfigurationError(f"Constraint '{constraint}' is missing arguments")
    raise ConfigurationError(f"Unknown constraint '{constraint}'")
