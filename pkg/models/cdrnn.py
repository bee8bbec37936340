"""
CDRNN Model
Parameter store, mixed-effects materialization, the convolutional forward
pass and the penalized negative log-likelihood with exact gradients
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import jsonschema
import numpy as np
from scipy import stats

from config import VERSION
from models.nnkernel import (
    ActivationTrace, DropoutMask, LayerParams, ffn_backward, ffn_forward, glorot_init,
    hidden_widths, l2_penalty, sample_dropout_mask, softplus, sigmoid,
)
from models.spec import DIST_PARAMS, ModelSpec
from utils.data_loader import AssembledBatch, StandardizationRecord
from utils.errors import ConfigurationError, DataError, NumericalError


logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
CHECKPOINT_FORMAT = 1
MU, SIGMA = 0, 1
INITIAL_LOG_SCALE = float(np.log(0.01))

CHECKPOINT_SCHEMA = {
    'type': 'object',
    'required': ['format', 'code_version', 'spec', 'record', 'levels', 'param_names'],
    'properties': {
        'format': {'const': CHECKPOINT_FORMAT},
        'code_version': {'type': 'string'},
        'spec': {'type': 'object'},
        'record': {'type': 'object'},
        'levels': {'type': 'object', 'additionalProperties': {'type': 'array', 'items': {'type': 'string'}}},
        'param_names': {'type': 'array', 'items': {'type': 'string'}},
        'trainer': {'type': 'object'},
    },
}


def _network_sizes(spec: ModelSpec) -> Dict[str, List[int]]:
    hp = spec.hyperparameters
    sizes = {}
    if spec.f_in.kind == 'ffn':
        k = len(spec.predictor_names)
        sizes['fin'] = [k + 1] + list(spec.f_in.hidden_units) + [k]
    for i, block in enumerate(spec.irf_blocks):
        sizes[f'irf{i}'] = [block.n_inputs] + [hp.hidden_units] * hp.hidden_layers + [block.n_outputs]
    return sizes


@dataclass
class ParameterStore:
    """
    Every trainable array, by name:

    - ``<net>/W<l>``, ``<net>/b<l>``: network layers (net is ``fin`` or ``irf<i>``)
    - ``coef`` (J+1,) and ``s0`` (S,): fixed coefficients and distribution bias
    - ``coef/log_scale``, ``s0/log_scale``: variational posterior scales
    - ``ranef/<factor>/<target>``: raw random offsets with levels on axis 0
    """

    spec: ModelSpec
    arrays: Dict[str, np.ndarray]

    def copy(self) -> 'ParameterStore':
        return ParameterStore(spec=self.spec, arrays={k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    @property
    def network_sizes(self) -> Dict[str, List[int]]:
        return _network_sizes(self.spec)

    def layers(self, net: str) -> List[LayerParams]:
        n_layers = len(self.network_sizes[net]) - 1
        return [LayerParams(self.arrays[f'{net}/W{l}'], self.arrays[f'{net}/b{l}'],
                            'identity' if l == n_layers - 1 else 'gelu') for l in range(n_layers)]

    def random_names(self, factor: str) -> List[str]:
        prefix = f'ranef/{factor}/'
        return [name for name in self.arrays if name.startswith(prefix)]


def init_parameters(spec: ModelSpec, rng: np.random.Generator, mu_init: float = 0.0) -> ParameterStore:
    """Glorot-initialized networks, unit coefficients, sigma starting at 1 (standardized)"""
    arrays: Dict[str, np.ndarray] = {}
    sizes = _network_sizes(spec)
    for net, net_sizes in sizes.items():
        for l, layer in enumerate(glorot_init(net_sizes, rng)):
            arrays[f'{net}/W{l}'] = layer.weights
            arrays[f'{net}/b{l}'] = layer.biases

    eps = spec.hyperparameters.epsilon
    arrays['coef'] = np.ones(spec.n_features)
    arrays['s0'] = np.array([mu_init, np.log(np.expm1(1.0 - eps))])
    if spec.hyperparameters.inference == 'variational':
        arrays['coef/log_scale'] = np.full(spec.n_features, INITIAL_LOG_SCALE)
        arrays['s0/log_scale'] = np.full(len(DIST_PARAMS), INITIAL_LOG_SCALE)

    for factor in spec.random_factors:
        Z = factor.n_levels
        if 'irf_bias' in factor.targets:
            for i in range(len(spec.irf_blocks)):
                for l, width in enumerate(sizes[f'irf{i}'][1:-1]):
                    arrays[f'ranef/{factor.name}/irf{i}/b{l}'] = np.zeros((Z, width))
        if 'coef' in factor.targets:
            arrays[f'ranef/{factor.name}/coef'] = np.zeros((Z, spec.n_features))
        if 's0' in factor.targets:
            arrays[f'ranef/{factor.name}/s0'] = np.zeros((Z, len(DIST_PARAMS)))
    return ParameterStore(spec=spec, arrays=arrays)


# ---------------------------------------------------------------------------
# Materialization (v = v0 + Vz)
# ---------------------------------------------------------------------------

@dataclass
class ModelDraw:
    """Frozen stochastic inputs: dropout masks per network and variational noise"""

    masks: Dict[str, DropoutMask] = field(default_factory=dict)
    noise: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ParameterSnapshot:
    """Effective parameters for one batch; per-response arrays have a leading M axis"""

    spec: ModelSpec
    networks: Dict[str, List[LayerParams]]
    coef: np.ndarray
    s0: np.ndarray
    z: Optional[np.ndarray]
    noise: Dict[str, np.ndarray]
    variational: bool


def centered_offsets(raw: np.ndarray) -> np.ndarray:
    """Project raw offsets so that they sum to zero across levels"""
    return raw - raw.mean(axis=0, keepdims=True)


def materialized_offsets(store: ParameterStore, factor: str) -> Dict[str, np.ndarray]:
    """Centered offset matrices (levels on axis 0) of one factor"""
    return {name: centered_offsets(store.arrays[name]) for name in store.random_names(factor)}


def _check_levels(spec: ModelSpec, z: np.ndarray):
    if z.ndim != 2 or z.shape[1] != len(spec.random_factors):
        raise DataError(f"Level indicators must be (M, {len(spec.random_factors)}), got {z.shape}")
    for f, factor in enumerate(spec.random_factors):
        bad = np.flatnonzero((z[:, f] < 0) | (z[:, f] >= factor.n_levels))
        if len(bad):
            raise DataError(f"Unknown level {int(z[bad[0], f])} of random factor '{factor.name}'")


def materialize_params(store: ParameterStore, z: Optional[np.ndarray] = None,
                       sample_variational: bool = False, rng: Optional[np.random.Generator] = None,
                       noise: Optional[Dict[str, np.ndarray]] = None) -> ParameterSnapshot:
    """
    v = v0 + sum over factors of the centered offset of the selected level

    Args:
        store: Parameter store
        z: (M, F) level indices; None gives population-level parameters
        sample_variational: Draw coef and s0 as mean + scale * N(0, 1)
        rng: Generator for the variational draw (unless noise is given)
        noise: Frozen standard-normal draws keyed 'coef' / 's0'

    Returns:
        ParameterSnapshot
    """
    spec, arrays = store.spec, store.arrays
    variational = sample_variational and spec.hyperparameters.inference == 'variational'
    if z is not None:
        z = np.asarray(z, dtype=int)
        if z.shape[-1:] == (0,) or not spec.random_factors:
            z = None
        else:
            _check_levels(spec, z)

    coef, s0 = arrays['coef'], arrays['s0']
    used_noise: Dict[str, np.ndarray] = {}
    if variational:
        for name in ('coef', 's0'):
            eps = noise[name] if noise and name in noise else None
            if eps is None:
                if rng is None:
                    raise ConfigurationError("A generator or frozen noise is required for variational sampling")
                eps = rng.standard_normal(arrays[name].shape)
            used_noise[name] = eps
        coef = coef + np.exp(arrays['coef/log_scale']) * used_noise['coef']
        s0 = s0 + np.exp(arrays['s0/log_scale']) * used_noise['s0']

    networks: Dict[str, List[LayerParams]] = {}
    for net, sizes in store.network_sizes.items():
        n_layers = len(sizes) - 1
        layers = []
        for l in range(n_layers):
            bias = arrays[f'{net}/b{l}']
            if z is not None and l < n_layers - 1:
                for f, factor in enumerate(spec.random_factors):
                    name = f'ranef/{factor.name}/{net}/b{l}'
                    if name in arrays:
                        bias = bias + centered_offsets(arrays[name])[z[:, f]]
                if bias.ndim == 2:
                    bias = bias[:, None, :]
            layers.append(LayerParams(arrays[f'{net}/W{l}'], bias, 'identity' if l == n_layers - 1 else 'gelu'))
        networks[net] = layers

    if z is not None:
        for f, factor in enumerate(spec.random_factors):
            if f'ranef/{factor.name}/coef' in arrays:
                coef = coef + centered_offsets(arrays[f'ranef/{factor.name}/coef'])[z[:, f]]
            if f'ranef/{factor.name}/s0' in arrays:
                s0 = s0 + centered_offsets(arrays[f'ranef/{factor.name}/s0'])[z[:, f]]

    return ParameterSnapshot(spec=spec, networks=networks, coef=coef, s0=s0, z=z,
                             noise=used_noise, variational=variational)


def sample_draw(store: ParameterStore, rng: np.random.Generator, shape: Tuple[int, ...] = (),
                dropout: Optional[float] = None) -> ModelDraw:
    """
    Sample one dropout-mask set (and variational noise when applicable)

    Args:
        shape: Leading mask shape; (M, T) for per-row training masks, () for a
            single mask shared by every evaluation of a query
        dropout: Override of the configured dropout rate
    """
    spec = store.spec
    rate = spec.hyperparameters.dropout if dropout is None else dropout
    masks = {}
    for net, sizes in store.network_sizes.items():
        masks[net] = sample_dropout_mask(rate, sizes[1:-1], rng, shape)
    noise = {}
    if spec.hyperparameters.inference == 'variational':
        noise = {'coef': rng.standard_normal(spec.n_features), 's0': rng.standard_normal(len(DIST_PARAMS))}
    return ModelDraw(masks=masks, noise=noise)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

@dataclass
class PredictiveParams:
    """Normal predictive parameters in response units"""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class _BlockCache:
    trace: ActivationTrace
    G: np.ndarray
    weight: np.ndarray
    conv_idx: np.ndarray
    cond_idx: np.ndarray
    target_idx: np.ndarray
    n_time_inputs: int


@dataclass
class _ForwardCache:
    s: np.ndarray
    sigma_std: np.ndarray
    Xc: np.ndarray
    fin_trace: Optional[ActivationTrace]
    blocks: List[_BlockCache]


def _block_inputs(block, batch: AssembledBatch, Xp: np.ndarray, cond_idx: np.ndarray) -> Tuple[np.ndarray, int]:
    parts = []
    if block.include_offset_d:
        parts.append(batch.d[..., None])
    if block.include_timestamp_t:
        parts.append(batch.t[..., None])
    n_time = len(parts)
    parts.append(Xp[..., cond_idx])
    return np.concatenate(parts, axis=-1), n_time


def _forward(snapshot: ParameterSnapshot, batch: AssembledBatch, masks: Dict[str, DropoutMask]) -> _ForwardCache:
    spec = snapshot.spec
    M, T, _ = batch.X.shape
    features = spec.features
    predictors = list(spec.predictor_names)

    fin_trace = None
    if spec.f_in.kind == 'ffn':
        fin_trace = ffn_forward(snapshot.networks['fin'], np.concatenate([batch.t[..., None], batch.X], axis=-1),
                                masks.get('fin'))
        Xp = fin_trace.output
    else:
        Xp = batch.X
    Xc = np.concatenate([np.ones((M, T, 1)), Xp], axis=-1)

    coef = np.broadcast_to(snapshot.coef, (M, spec.n_features))
    s = np.array(np.broadcast_to(snapshot.s0, (M, len(DIST_PARAMS))), dtype=float)
    valid = batch.mask.astype(float)
    last = batch.last_valid.astype(float)

    blocks = []
    for i, block in enumerate(spec.irf_blocks):
        conv_idx = np.array([features.index(f) for f in block.convolved_features], dtype=int)
        cond_idx = np.array([predictors.index(f) for f in block.conditioning_features], dtype=int)
        target_idx = np.array([DIST_PARAMS.index(p) for p in block.target_params], dtype=int)
        inputs, n_time = _block_inputs(block, batch, Xp, cond_idx)
        trace = ffn_forward(snapshot.networks[f'irf{i}'], inputs, masks.get(f'irf{i}'))
        G = trace.output.reshape(M, T, len(target_idx), len(conv_idx))
        weight = (last if block.dirac_delta else valid) * spec.rescale
        terms = G * coef[:, None, None, conv_idx] * Xc[:, :, None, conv_idx]
        s[:, target_idx] += np.einsum('mt,mtpc->mp', weight, terms)
        blocks.append(_BlockCache(trace=trace, G=G, weight=weight, conv_idx=conv_idx, cond_idx=cond_idx,
                                  target_idx=target_idx, n_time_inputs=n_time))

    sigma_std = softplus(s[:, SIGMA]) + spec.hyperparameters.epsilon
    bad = np.flatnonzero(~(np.isfinite(s).all(axis=1) & np.isfinite(sigma_std)))
    if len(bad):
        raise NumericalError("Non-finite predictive parameters", response_index=int(batch.item_index[bad[0]]))
    return _ForwardCache(s=s, sigma_std=sigma_std, Xc=Xc, fin_trace=fin_trace, blocks=blocks)


def forward(snapshot: ParameterSnapshot, batch: AssembledBatch, mode: str = 'eval',
            masks: Optional[Dict[str, DropoutMask]] = None,
            rng: Optional[np.random.Generator] = None) -> PredictiveParams:
    """
    Predictive parameters for every response of a batch

    Args:
        snapshot: Materialized parameters
        batch: Windows assembled under the same spec
        mode: 'train' applies dropout (sampling masks from rng when none are
            given); 'eval' applies only explicitly supplied masks
        masks: Frozen dropout masks per network

    Returns:
        PredictiveParams in response units
    """
    masks = _resolve_masks(snapshot.spec, batch, mode, masks, rng)
    cache = _forward(snapshot, batch, masks)
    y_sd = batch.record.y_sd
    return PredictiveParams(mu=cache.s[:, MU] * y_sd, sigma=cache.sigma_std * y_sd)


def _resolve_masks(spec: ModelSpec, batch: AssembledBatch, mode: str,
                   masks: Optional[Dict[str, DropoutMask]], rng: Optional[np.random.Generator]):
    if mode not in ('train', 'eval'):
        raise ConfigurationError(f"Unknown mode '{mode}'")
    if masks is not None:
        return masks
    if mode == 'train' and spec.hyperparameters.dropout > 0:
        if rng is None:
            raise ConfigurationError("Training-mode forward needs a generator for dropout")
        sizes = _network_sizes(spec)
        return {net: sample_dropout_mask(spec.hyperparameters.dropout, s[1:-1], rng, batch.mask.shape)
                for net, s in sizes.items()}
    return {}


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

@dataclass
class LossResult:
    """Penalized objective, its parts and gradients for every store array"""

    loss: float
    nll: float
    penalty: float
    grads: Dict[str, np.ndarray]
    params: PredictiveParams


def _reduce_to_store(store: ParameterStore, snapshot: ParameterSnapshot, name: str, grad: np.ndarray,
                     random_key: str, grads: Dict[str, np.ndarray]):
    """Split a (possibly per-response) snapshot gradient into fixed and random parts"""
    base = store.arrays[name]
    if grad.ndim > base.ndim:
        per_response = grad.reshape(grad.shape[0], -1)
        grads[name] += per_response.sum(axis=0).reshape(base.shape)
        if snapshot.z is not None:
            for f, factor in enumerate(store.spec.random_factors):
                rname = f'ranef/{factor.name}/{random_key}'
                if rname not in store.arrays:
                    continue
                by_level = np.zeros((factor.n_levels, per_response.shape[1]))
                np.add.at(by_level, snapshot.z[:, f], per_response)
                by_level -= by_level.mean(axis=0, keepdims=True)
                grads[rname] += by_level.reshape(store.arrays[rname].shape)
    else:
        grads[name] += grad


def nll_loss(store: ParameterStore, batch: AssembledBatch, draw: Optional[ModelDraw] = None,
             rng: Optional[np.random.Generator] = None, n_train: Optional[int] = None) -> LossResult:
    """
    Mean normal NLL (standardized units) plus weight L2, random-effects L2 and,
    in variational mode, KL(q || prior) / n_train

    Args:
        store: Parameter store
        batch: Training windows
        draw: Frozen dropout masks and variational noise; sampled from rng if None
        rng: Generator used when draw is None
        n_train: Training-set size for the KL scaling (defaults to the batch size)

    Returns:
        LossResult with gradients keyed like store.arrays
    """
    spec = store.spec
    hp = spec.hyperparameters
    if draw is None:
        if rng is None:
            raise ConfigurationError("nll_loss needs a frozen draw or a generator")
        draw = sample_draw(store, rng, shape=batch.mask.shape)
    snapshot = materialize_params(store, batch.z, sample_variational=True, noise=draw.noise, rng=rng)
    cache = _forward(snapshot, batch, draw.masks)

    M = len(batch)
    n_train = n_train or M
    mu, sigma, y = cache.s[:, MU], cache.sigma_std, batch.y
    resid = y - mu
    nll_terms = 0.5 * LOG_2PI + np.log(sigma) + 0.5 * (resid / sigma) ** 2
    nll = float(nll_terms.mean())

    gs = np.zeros_like(cache.s)
    gs[:, MU] = -resid / sigma ** 2 / M
    gs[:, SIGMA] = (1.0 / sigma - resid ** 2 / sigma ** 3) * sigmoid(cache.s[:, SIGMA]) / M

    grads = store.zeros_like()
    g_coef = np.zeros((M, spec.n_features))
    g_xp = np.zeros(batch.X.shape) if spec.f_in.kind == 'ffn' else None
    coef = np.broadcast_to(snapshot.coef, (M, spec.n_features))

    for i, bc in enumerate(cache.blocks):
        gp = gs[:, bc.target_idx]
        xc = cache.Xc[..., bc.conv_idx]
        cb = coef[:, None, None, bc.conv_idx]
        wg = bc.weight[:, :, None, None] * gp[:, None, :, None]
        dG = wg * cb * xc[:, :, None, :]
        wG = (wg * bc.G).sum(axis=2)
        g_coef[:, bc.conv_idx] += (wG * xc).sum(axis=1)

        net = f'irf{i}'
        layers = snapshot.networks[net]
        gb = ffn_backward(layers, bc.trace, dG.reshape(bc.trace.output.shape))
        for l in range(len(layers)):
            grads[f'{net}/W{l}'] += gb.weights[l]
            _reduce_to_store(store, snapshot, f'{net}/b{l}', gb.biases[l][:, 0, :] if gb.biases[l].ndim == 3
                             else gb.biases[l], f'{net}/b{l}', grads)

        if g_xp is not None:
            dxc = wG * coef[:, None, bc.conv_idx]
            predictor_cols = bc.conv_idx > 0
            g_xp[..., bc.conv_idx[predictor_cols] - 1] += dxc[..., predictor_cols]
            g_xp[..., bc.cond_idx] += gb.inputs[..., bc.n_time_inputs:]

    if g_xp is not None:
        layers = snapshot.networks['fin']
        gb = ffn_backward(layers, cache.fin_trace, g_xp)
        for l in range(len(layers)):
            grads[f'fin/W{l}'] += gb.weights[l]
            grads[f'fin/b{l}'] += gb.biases[l]

    for name, g in (('coef', g_coef), ('s0', gs)):
        _reduce_to_store(store, snapshot, name, g, name, grads)
        if snapshot.variational:
            scale = np.exp(store.arrays[f'{name}/log_scale'])
            grads[f'{name}/log_scale'] += g.sum(axis=0) * snapshot.noise[name] * scale

    penalty = _add_penalties(store, grads, n_train)
    return LossResult(loss=nll + penalty, nll=nll, penalty=penalty, grads=grads,
                      params=PredictiveParams(mu=mu * batch.record.y_sd, sigma=sigma * batch.record.y_sd))


def penalized_weight_names(store: ParameterStore) -> List[str]:
    """Hidden-layer weights of the IRF networks; f_in and output layers are unpenalized"""
    names = []
    for net, sizes in store.network_sizes.items():
        if net.startswith('irf'):
            names.extend(f'{net}/W{l}' for l in range(len(sizes) - 2))
    return names


def _add_penalties(store: ParameterStore, grads: Dict[str, np.ndarray], n_train: int) -> float:
    spec, arrays = store.spec, store.arrays
    hp = spec.hyperparameters
    total = 0.0

    weight_names = penalized_weight_names(store)
    if weight_names:
        value, wgrads = l2_penalty([LayerParams(arrays[n], np.zeros(arrays[n].shape[0]), 'identity')
                                    for n in weight_names], hp.weight_l2)
        total += value
        for name, g in zip(weight_names, wgrads):
            grads[name] += g

    ranef_names = [name for name in arrays if name.startswith('ranef/')]
    count = sum(arrays[n].size for n in ranef_names)
    if count and hp.ranef_l2 > 0:
        total += hp.ranef_l2 * sum(float(np.sum(arrays[n] ** 2)) for n in ranef_names) / count
        for name in ranef_names:
            grads[name] += 2.0 * hp.ranef_l2 * arrays[name] / count

    if hp.inference == 'variational':
        # priors in standardized units: N(0, 1) on coef and s0, N(0, prior_scale) on their offsets
        for name in ('coef', 's0'):
            m, log_s = arrays[name], arrays[f'{name}/log_scale']
            s2 = np.exp(2.0 * log_s)
            total += float(np.sum(-log_s + 0.5 * (s2 + m ** 2) - 0.5)) / n_train
            grads[name] += m / n_train
            grads[f'{name}/log_scale'] += (s2 - 1.0) / n_train
        prior_var = hp.ranef_prior_scale ** 2
        for name in ranef_names:
            if name.endswith('/coef') or name.endswith('/s0'):
                total += float(np.sum(arrays[name] ** 2)) / (2.0 * prior_var * n_train)
                grads[name] += arrays[name] / (prior_var * n_train)
    return total


# ---------------------------------------------------------------------------
# Model object and checkpoints
# ---------------------------------------------------------------------------

class CDRNNModel:
    """A spec, its parameters, the standardization record and factor levels"""

    def __init__(self, store: ParameterStore, record: StandardizationRecord,
                 levels: Optional[Dict[str, List[str]]] = None):
        self.store = store
        self.record = record
        self.levels = dict(levels or {})

    @property
    def spec(self) -> ModelSpec:
        return self.store.spec

    @classmethod
    def initialize(cls, spec: ModelSpec, record: StandardizationRecord,
                   levels: Optional[Dict[str, List[str]]] = None, seed: int = 0,
                   mu_init: float = 0.0) -> 'CDRNNModel':
        store = init_parameters(spec, np.random.default_rng(seed), mu_init=mu_init)
        return cls(store, record, levels)

    def snapshot(self, z: Optional[np.ndarray] = None, draw: Optional[ModelDraw] = None) -> ParameterSnapshot:
        """Evaluation parameters: variational means unless a draw supplies noise"""
        sample = bool(draw and draw.noise)
        return materialize_params(self.store, z, sample_variational=sample, noise=draw.noise if draw else None)

    def predict(self, batch: AssembledBatch, draw: Optional[ModelDraw] = None,
                use_levels: bool = True) -> PredictiveParams:
        """Eval-mode predictions; a draw adds frozen dropout masks and variational noise"""
        snap = self.snapshot(batch.z if use_levels else None, draw)
        return forward(snap, batch, mode='eval', masks=draw.masks if draw else None)

    def loglik(self, batch: AssembledBatch) -> np.ndarray:
        """Per-response log density of y in response units"""
        params = self.predict(batch)
        return stats.norm.logpdf(batch.record.destandardize_y(batch.y), loc=params.mu, scale=params.sigma)

    def save(self, path: str, trainer_arrays: Optional[Dict[str, np.ndarray]] = None,
             trainer_meta: Optional[Dict[str, Any]] = None) -> str:
        return save_checkpoint(path, self, trainer_arrays, trainer_meta)

    @classmethod
    def load(cls, path: str) -> 'CDRNNModel':
        model, _, _ = load_checkpoint(path)
        return model


def save_checkpoint(path: str, model: CDRNNModel, trainer_arrays: Optional[Dict[str, np.ndarray]] = None,
                    trainer_meta: Optional[Dict[str, Any]] = None) -> str:
    """Write spec, parameters, standardization record and trainer state to one .npz"""
    meta = {
        'format': CHECKPOINT_FORMAT,
        'code_version': VERSION,
        'spec': model.spec.model_dump(mode='json'),
        'record': model.record.to_dict(),
        'levels': model.levels,
        'param_names': sorted(model.store.arrays),
        'trainer': trainer_meta or {},
    }
    payload = {f'param:{k}': v for k, v in model.store.arrays.items()}
    payload.update({f'trainer:{k}': v for k, v in (trainer_arrays or {}).items()})
    payload['__meta__'] = np.array(json.dumps(meta, sort_keys=True))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + '.tmp.npz'
    np.savez(tmp, **payload)
    os.replace(tmp, path)
    logger.debug("Saved checkpoint %s", path)
    return path


def load_checkpoint(path: str) -> Tuple[CDRNNModel, Dict[str, np.ndarray], Dict[str, Any]]:
    """Inverse of save_checkpoint; arrays are restored bit for bit"""
    if not os.path.exists(path):
        raise DataError("Checkpoint not found", file=path)
    with np.load(path, allow_pickle=False) as data:
        try:
            meta = json.loads(str(data['__meta__']))
            jsonschema.validate(meta, CHECKPOINT_SCHEMA)
        except (KeyError, ValueError, jsonschema.ValidationError) as e:
            raise DataError(f"Invalid checkpoint metadata: {e}", file=path)
        arrays = {k[len('param:'):]: data[k].copy() for k in data.files if k.startswith('param:')}
        trainer = {k[len('trainer:'):]: data[k].copy() for k in data.files if k.startswith('trainer:')}
    if sorted(arrays) != meta['param_names']:
        raise DataError("Checkpoint parameter list does not match its metadata", file=path)
    spec = ModelSpec.from_dict(meta['spec'])
    model = CDRNNModel(ParameterStore(spec=spec, arrays=arrays),
                       StandardizationRecord.from_dict(meta['record']), meta['levels'])
    return model, trainer, meta['trainer']
