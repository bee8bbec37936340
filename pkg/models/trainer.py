"""
CDRNN Trainer
Minibatch Adam with global-norm clipping, loss-spike checkpoint restore,
iterate averaging and the time-loss convergence criterion
"""

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from models.cdrnn import CDRNNModel, ParameterStore, nll_loss, sample_draw, save_checkpoint
from models.spec import ModelSpec, ensure_valid
from utils.data_loader import AssembledBatch, StandardizationRecord
from utils.errors import NumericalError, TrainingError


logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GUARD_SD_FLOOR = 1e-12
GUARD_WARMUP = 2

LossHook = Callable[[int, int, float], float]


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values())))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float = 1.0) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Rescale all gradients by max_norm / norm when the global norm exceeds max_norm

    Returns:
        (clipped gradients, pre-clip norm)
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"Non-finite gradient for '{name}'")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass
class AdamState:
    """First/second moments mirroring the parameter store"""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    learning_rate: float = 0.003

    @classmethod
    def zeros(cls, arrays: Dict[str, np.ndarray], learning_rate: float) -> 'AdamState':
        return cls(m={k: np.zeros_like(a) for k, a in arrays.items()},
                   v={k: np.zeros_like(a) for k, a in arrays.items()}, learning_rate=learning_rate)

    def copy(self) -> 'AdamState':
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                         self.step, self.learning_rate)


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam update; params are updated in place and returned"""
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        params[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params


@dataclass
class LossGuard:
    """Moving mean/SD of the batch loss; flags losses far above the mean"""

    decay: float = 0.999
    threshold: float = 1000.0
    mean: float = 0.0
    sq_mean: float = 0.0
    count: int = 0

    def stats(self) -> Tuple[float, float]:
        correction = 1.0 - self.decay ** self.count
        mean = self.mean / correction
        var = max(self.sq_mean / correction - mean ** 2, 0.0)
        return mean, max(np.sqrt(var), GUARD_SD_FLOOR)

    def check(self, loss: float) -> bool:
        """True if the loss is a spike; state only advances on ok losses"""
        if not np.isfinite(loss):
            return True
        if self.count >= GUARD_WARMUP:
            mean, sd = self.stats()
            if loss > mean + self.threshold * sd:
                return True
        self.mean = self.decay * self.mean + (1.0 - self.decay) * loss
        self.sq_mean = self.decay * self.sq_mean + (1.0 - self.decay) * loss * loss
        self.count += 1
        return False

    def copy(self) -> 'LossGuard':
        return LossGuard(self.decay, self.threshold, self.mean, self.sq_mean, self.count)


def loss_guard(guard: LossGuard, loss: float) -> str:
    return 'spike' if guard.check(loss) else 'ok'


@dataclass
class IterateAverage:
    """Exponential moving average of every parameter array"""

    decay: float
    values: Dict[str, np.ndarray]
    count: int = 0

    @classmethod
    def zeros(cls, arrays: Dict[str, np.ndarray], decay: float) -> 'IterateAverage':
        return cls(decay=decay, values={k: np.zeros_like(a) for k, a in arrays.items()})

    def update(self, params: Dict[str, np.ndarray]):
        for name, value in params.items():
            avg = self.values[name]
            avg *= self.decay
            avg += (1.0 - self.decay) * value
        self.count += 1

    def debiased(self) -> Dict[str, np.ndarray]:
        if self.count == 0:
            raise TrainingError("Iterate average read before any update")
        correction = 1.0 - self.decay ** self.count
        return {name: avg / correction for name, avg in self.values.items()}

    def copy(self) -> 'IterateAverage':
        return IterateAverage(self.decay, {k: a.copy() for k, a in self.values.items()}, self.count)


def iterate_average(avg: IterateAverage, params: Dict[str, np.ndarray]) -> IterateAverage:
    avg.update(params)
    return avg


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------

def fails_to_reject(values: Sequence[float], alpha: float) -> Tuple[bool, float, float]:
    """
    Pearson test of loss against epoch index for one trailing window

    Returns:
        (fails to reject, r, p); flat windows fail to reject, windows with
        fewer than 3 points reject
    """
    values = np.asarray(values, dtype=float)
    if len(values) < 3:
        return False, float('nan'), 0.0
    if np.ptp(values) == 0:
        return True, 0.0, 1.0
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        r, p = stats.pearsonr(np.arange(len(values), dtype=float), values)
    r, p = float(r), float(p)
    if not np.isfinite(r):
        return True, 0.0, 1.0
    return bool(p > alpha or r >= 0), r, p


@dataclass
class ConvergenceStatus:
    converged: bool
    n_fail: int
    r: float
    p: float


def convergence_check(loss_history: Sequence[float], window: int = 100, alpha: float = 0.5) -> ConvergenceStatus:
    """Converged when at least half of the last `window` epochs fail to reject"""
    history = np.asarray(loss_history, dtype=float)
    if len(history) < window:
        r, p = fails_to_reject(history, alpha)[1:] if len(history) else (float('nan'), 0.0)
        return ConvergenceStatus(False, 0, r, p)
    n_fail, r, p = 0, float('nan'), 0.0
    for end in range(len(history) - window + 1, len(history) + 1):
        fail, r, p = fails_to_reject(history[max(0, end - window):end], alpha)
        n_fail += int(fail)
    return ConvergenceStatus(n_fail >= window / 2, n_fail, r, p)


class ConvergenceMonitor:
    """Incremental form of convergence_check (each epoch's test is run once)"""

    def __init__(self, window: int, alpha: float):
        self.window = window
        self.alpha = alpha
        self.history: List[float] = []
        self.fails: List[bool] = []

    def add(self, loss: float) -> ConvergenceStatus:
        self.history.append(float(loss))
        fail, r, p = fails_to_reject(self.history[-self.window:], self.alpha)
        self.fails.append(fail)
        n_fail = sum(self.fails[-self.window:])
        converged = len(self.history) >= self.window and n_fail >= self.window / 2
        return ConvergenceStatus(converged, n_fail, r, p)


# ---------------------------------------------------------------------------
# Training log
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    """Structured training records, serialized one JSON object per line"""

    records: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, kind: str, **fields):
        record = {'type': kind}
        record.update({k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in fields.items()})
        self.records.append(record)

    def of_type(self, kind: str) -> List[Dict[str, Any]]:
        return [r for r in self.records if r['type'] == kind]

    @property
    def n_restores(self) -> int:
        return len(self.of_type('restore'))

    def tail(self, n: int = 20) -> List[Dict[str, Any]]:
        return self.records[-n:]

    def to_jsonl(self) -> str:
        return ''.join(json.dumps(r, sort_keys=True, allow_nan=True) + '\n' for r in self.records)

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w') as f:
            f.write(self.to_jsonl())
        return path


@dataclass
class FitResult:
    model: CDRNNModel
    log: TrainingLog
    converged: bool
    epochs: int


@dataclass
class _Checkpoint:
    epoch: int
    params: Dict[str, np.ndarray]
    adam: AdamState
    average: IterateAverage
    guard: LossGuard


class CDRNNTrainer:
    """Training engine for one model specification"""

    def __init__(self, spec: ModelSpec, record: StandardizationRecord,
                 levels: Optional[Dict[str, List[str]]] = None, seed: int = 0):
        self.spec = ensure_valid(spec)
        self.record = record
        self.levels = dict(levels or {})
        self.seed = int(seed)
        self.model: Optional[CDRNNModel] = None
        self.log = TrainingLog()

    def train(self, train: AssembledBatch, exploratory: Optional[AssembledBatch] = None,
              loss_hook: Optional[LossHook] = None, guard_enabled: bool = True,
              checkpoint_path: Optional[str] = None) -> FitResult:
        """
        Fit the model; returns a model holding the de-biased averaged parameters

        Args:
            train: Training windows
            exploratory: Held-out windows, required when the convergence
                metric is 'exploratory'
            loss_hook: Test hook mapping (epoch, batch, loss) to the loss the
                guard sees
            guard_enabled: Disable to train without spike detection
            checkpoint_path: Also write each checkpoint to this .npz file
        """
        hp = self.spec.hyperparameters
        if len(train) == 0:
            raise TrainingError("Training set is empty")
        if hp.convergence_metric == 'exploratory' and exploratory is None:
            raise TrainingError("Exploratory convergence metric needs an exploratory set")

        rng = np.random.default_rng(self.seed)
        mu_init = float(np.mean(train.y))
        self.model = CDRNNModel.initialize(self.spec, self.record, self.levels, seed=self.seed, mu_init=mu_init)
        store = self.model.store
        params = store.arrays
        adam = AdamState.zeros(params, hp.learning_rate)
        average = IterateAverage.zeros(params, hp.ema_decay)
        guard = LossGuard(hp.guard_decay, hp.guard_threshold)
        monitor = ConvergenceMonitor(hp.convergence_window, hp.convergence_alpha)
        self.log = TrainingLog()

        M = len(train)
        checkpoint = None
        consecutive = 0
        converged = False
        epoch = 0
        logger.info("Training %d responses, %d parameters, seed %d", M,
                    sum(a.size for a in params.values()), self.seed)

        while epoch < hp.max_epochs and not converged:
            if epoch % hp.checkpoint_every == 0:
                checkpoint = _Checkpoint(epoch, {k: a.copy() for k, a in params.items()},
                                         adam.copy(), average.copy(), guard.copy())
                if checkpoint_path:
                    self._save_disk_checkpoint(checkpoint_path, checkpoint)

            order = rng.permutation(M)
            epoch_losses = []
            for b, start in enumerate(range(0, M, hp.batch_size)):
                batch = train.subset(order[start:start + hp.batch_size])
                draw = sample_draw(store, rng, shape=batch.mask.shape)
                spike = False
                try:
                    result = nll_loss(store, batch, draw=draw, n_train=M)
                    loss = result.loss
                    if loss_hook is not None:
                        loss = loss_hook(epoch, b, loss)
                    if guard_enabled:
                        spike = guard.check(loss)
                    elif not np.isfinite(loss):
                        raise NumericalError("Non-finite loss with the loss guard disabled")
                    if not spike:
                        grads, norm = clip_global_norm(result.grads, hp.clip_norm)
                except NumericalError as e:
                    if not guard_enabled:
                        raise TrainingError(str(e), log=self.log.tail())
                    loss, spike = float('nan'), True

                if spike:
                    if consecutive >= hp.max_restores:
                        self.log.add('divergence', epoch=epoch, batch=b, loss=loss)
                        raise TrainingError(f"Training diverged after {consecutive} consecutive restores",
                                            log=self.log.tail())
                    consecutive += 1
                    self._restore(params, checkpoint)
                    adam = checkpoint.adam.copy()
                    average = checkpoint.average.copy()
                    guard = checkpoint.guard.copy()
                    self.log.add('restore', epoch=epoch, batch=b, loss=loss,
                                 from_epoch=checkpoint.epoch, consecutive=consecutive)
                    logger.warning("Loss spike at epoch %d batch %d (loss=%s); restored epoch %d checkpoint",
                                   epoch, b, loss, checkpoint.epoch)
                    continue

                consecutive = 0
                adam_step(adam, params, grads)
                average.update(params)
                clipped = min(norm, hp.clip_norm)
                epoch_losses.append(loss)
                self.log.add('batch', epoch=epoch, batch=b, loss=loss, grad_norm=norm, clipped_norm=clipped)

            diagnostic = self._diagnostic(epoch, epoch_losses, exploratory, average)
            if diagnostic is not None:
                status = monitor.add(diagnostic)
                converged = status.converged
                self.log.add('epoch', epoch=epoch, loss=diagnostic, n_fail=status.n_fail,
                             r=status.r, p=status.p, converged=converged)
                if epoch % 100 == 0 or converged:
                    logger.info("Epoch %d: loss=%.6f fail-to-reject=%d/%d%s", epoch, diagnostic,
                                status.n_fail, hp.convergence_window, " (converged)" if converged else "")
            epoch += 1

        if average.count == 0:
            raise TrainingError("No successful optimization step", log=self.log.tail())
        if not converged:
            logger.warning("Stopped at the %d-epoch cap before convergence", hp.max_epochs)
        self.model.store = ParameterStore(spec=self.spec, arrays=average.debiased())
        return FitResult(model=self.model, log=self.log, converged=converged, epochs=epoch)

    def _diagnostic(self, epoch: int, epoch_losses: List[float], exploratory: Optional[AssembledBatch],
                    average: IterateAverage) -> Optional[float]:
        hp = self.spec.hyperparameters
        if hp.convergence_metric == 'train':
            return float(np.mean(epoch_losses)) if epoch_losses else None
        if epoch % hp.exploratory_every != 0 or average.count == 0:
            return None
        model = CDRNNModel(ParameterStore(self.spec, average.debiased()), self.record, self.levels)
        return self.evaluate(exploratory, model)['nll']

    @staticmethod
    def _restore(params: Dict[str, np.ndarray], checkpoint: _Checkpoint):
        for name, value in checkpoint.params.items():
            params[name][...] = value

    def _save_disk_checkpoint(self, path: str, checkpoint: _Checkpoint):
        arrays = {}
        for name in checkpoint.params:
            arrays[f'adam_m/{name}'] = checkpoint.adam.m[name]
            arrays[f'adam_v/{name}'] = checkpoint.adam.v[name]
            arrays[f'average/{name}'] = checkpoint.average.values[name]
        meta = {'epoch': checkpoint.epoch, 'adam_step': checkpoint.adam.step,
                'average_count': checkpoint.average.count, 'guard_mean': checkpoint.guard.mean,
                'guard_sq_mean': checkpoint.guard.sq_mean, 'guard_count': checkpoint.guard.count,
                'seed': self.seed}
        snapshot = CDRNNModel(ParameterStore(self.spec, checkpoint.params), self.record, self.levels)
        save_checkpoint(path, snapshot, arrays, meta)

    def evaluate(self, batch: AssembledBatch, model: Optional[CDRNNModel] = None) -> Dict[str, float]:
        """Eval-mode NLL per response (standardized and response units) and MSE"""
        model = model or self.model
        if model is None:
            raise TrainingError("Model has not been trained")
        loglik = model.loglik(batch)
        params = model.predict(batch)
        y = batch.record.destandardize_y(batch.y)
        return {
            'nll': float(-np.mean(loglik) - np.log(batch.record.y_sd)),
            'nll_raw': float(-np.mean(loglik)),
            'mse': float(np.mean((y - params.mu) ** 2)),
        }

    def save_model(self, path: str) -> str:
        if self.model is None:
            raise TrainingError("Model has not been trained")
        self.log.save(os.path.splitext(path)[0] + '.log.jsonl')
        return self.model.save(path)

    def load_model(self, path: str) -> CDRNNModel:
        self.model = CDRNNModel.load(path)
        self.spec = self.model.spec
        self.record = self.model.record
        self.levels = self.model.levels
        return self.model


def fit(spec: ModelSpec, train: AssembledBatch, seed: int = 0, record: Optional[StandardizationRecord] = None,
        levels: Optional[Dict[str, List[str]]] = None, exploratory: Optional[AssembledBatch] = None,
        loss_hook: Optional[LossHook] = None, guard_enabled: bool = True) -> FitResult:
    """Train a fresh model on one batch source"""
    trainer = CDRNNTrainer(spec, record or train.record, levels, seed)
    return trainer.train(train, exploratory=exploratory, loss_hook=loss_hook, guard_enabled=guard_enabled)
