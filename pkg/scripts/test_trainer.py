"""
Tests for the optimizer pieces, the loss guard, convergence and the
training loop
"""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import make_batch, make_record, random_batch, small_spec
from models.cdrnn import load_checkpoint
from models.spec import ModelSpec
from models.trainer import (
    AdamState, CDRNNTrainer, ConvergenceMonitor, IterateAverage, LossGuard, TrainingLog, adam_step,
    clip_global_norm, convergence_check, fails_to_reject, fit, global_norm, iterate_average, loss_guard,
)
from utils.data_loader import EventStream, ResponseTable, assemble_inputs, fit_standardization
from utils.errors import NumericalError, TrainingError
from utils.synth import SynthConfig, generate


TRUE_SLOPES = (1.5, -0.8)


def _dirac_linear_spec(**hyper):
    hp = {'hidden_layers': 0, 'weight_l2': 0.0, 'dropout': 0.0, 'inference': 'mle', 'learning_rate': 0.01,
          'batch_size': 128, 'ema_decay': 0.99, 'max_epochs': 1500}
    hp.update(hyper)
    return ModelSpec.from_dict({
        'predictor_names': ['x1', 'x2'],
        'history_length': 1,
        'irf_blocks': [{'name': 'dirac', 'convolved_features': ['rate', 'x1', 'x2'], 'conditioning_features': [],
                        'include_offset_d': False, 'include_timestamp_t': False, 'dirac_delta': True}],
        'hyperparameters': hp,
    })


@pytest.fixture(scope='module')
def linear_problem():
    """y = 0.5 + 1.5 x1 - 0.8 x2 + noise, one response per event"""
    rng = np.random.default_rng(11)
    n = 600
    times = np.arange(n, dtype=float)
    x = rng.normal(size=(n, 2))
    y = 0.5 + TRUE_SLOPES[0] * x[:, 0] + TRUE_SLOPES[1] * x[:, 1] + rng.normal(0.0, 0.1, n)
    events = EventStream(series=['s'] * n, times=times, values=x, predictor_names=['x1', 'x2'])
    responses = ResponseTable(series=['s'] * n, times=times, y=y)
    record = fit_standardization(events, responses)
    ols = np.linalg.lstsq(np.column_stack([np.ones(n), x]), y, rcond=None)[0]
    return events, responses, record, ols[1:]


def _fitted_slopes(model, record):
    slopes = []
    for k in range(2):
        X = np.zeros((2, 1, 2))
        X[1, 0, k] = 1.0 / record.x_sd[k]
        batch = make_batch(X, np.zeros((2, 1)), np.zeros((2, 1)), np.ones((2, 1), bool), np.zeros(2), record)
        mu = model.predict(batch).mu
        slopes.append(mu[1] - mu[0])
    return np.array(slopes)


class TestClipping:
    def test_small_norm_untouched(self):
        grads = {'a': np.array([0.3, 0.4])}
        clipped, norm = clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(0.5)
        assert_array_equal(clipped['a'], grads['a'])

    def test_single_large_entry(self):
        clipped, norm = clip_global_norm({'a': np.array([3.0])}, 1.0)
        assert norm == 3.0
        assert_allclose(clipped['a'], [1.0])

    def test_random_direction(self, rng):
        grads = {'a': rng.normal(size=(3, 4)), 'b': rng.normal(size=5)}
        scale = 7.3 / global_norm(grads)
        grads = {k: v * scale for k, v in grads.items()}
        clipped, norm = clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(7.3)
        assert global_norm(clipped) == pytest.approx(1.0, abs=1e-12)
        assert_allclose(clipped['b'], grads['b'] / 7.3)

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            clip_global_norm({'a': np.array([np.inf])})


class TestAdam:
    def test_zero_gradient(self):
        params = {'w': np.array([1.0, -2.0])}
        state = AdamState.zeros(params, 0.1)
        adam_step(state, params, {'w': np.zeros(2)})
        assert_array_equal(params['w'], [1.0, -2.0])

    def test_first_step_size(self):
        params = {'w': np.array([1.0, -2.0])}
        state = AdamState.zeros(params, 0.01)
        adam_step(state, params, {'w': np.array([4.0, -0.001])})
        assert_allclose(params['w'], [0.99, -1.99], atol=1e-6)

    def test_quadratic(self):
        params = {'p': np.array([0.5, -0.3])}
        state = AdamState.zeros(params, 0.01)
        losses = []
        for _ in range(100):
            x, y = params['p']
            losses.append(x ** 2 + 2 * y ** 2)
            adam_step(state, params, {'p': np.array([2 * x, 4 * y])})
        assert np.all(np.diff(losses[5:]) < 0)
        assert np.linalg.norm(params['p']) < 0.05

    def test_copy_is_independent(self):
        params = {'w': np.zeros(2)}
        state = AdamState.zeros(params, 0.1)
        clone = state.copy()
        adam_step(state, params, {'w': np.ones(2)})
        assert clone.step == 0 and not clone.m['w'].any()


class TestLossGuard:
    def test_constant_stream(self):
        guard = LossGuard()
        assert all(loss_guard(guard, 2.5) == 'ok' for _ in range(1000))

    def test_spike_after_stable_stream(self, rng):
        guard = LossGuard()
        for loss in rng.normal(1.0, 0.01, size=1000):
            assert loss_guard(guard, loss) == 'ok'
        assert loss_guard(guard, 1e6) == 'spike'

    def test_non_finite_is_spike(self):
        guard = LossGuard()
        assert loss_guard(guard, float('nan')) == 'spike'
        assert loss_guard(guard, float('inf')) == 'spike'
        assert guard.count == 0

    def test_warmup(self):
        guard = LossGuard()
        assert loss_guard(guard, 1.0) == 'ok'
        assert loss_guard(guard, 1e9) == 'ok'

    def test_spike_does_not_update_statistics(self, rng):
        guard = LossGuard()
        for loss in rng.normal(1.0, 0.01, size=50):
            guard.check(loss)
        before = guard.copy()
        assert guard.check(1e6)
        assert (guard.mean, guard.sq_mean, guard.count) == (before.mean, before.sq_mean, before.count)


class TestIterateAverage:
    def test_constant_parameters(self):
        avg = IterateAverage.zeros({'w': np.zeros(3)}, 0.999)
        for _ in range(50):
            iterate_average(avg, {'w': np.array([1.0, -2.0, 0.5])})
        assert_allclose(avg.debiased()['w'], [1.0, -2.0, 0.5], rtol=1e-12)

    def test_single_update(self):
        avg = IterateAverage.zeros({'w': np.zeros(2)}, 0.999)
        avg.update({'w': np.array([3.0, -7.0])})
        assert_allclose(avg.debiased()['w'], [3.0, -7.0], rtol=1e-14)

    def test_alternating(self):
        avg = IterateAverage.zeros({'w': np.zeros(1)}, 0.999)
        for i in range(10000):
            avg.update({'w': np.array([1.0 if i % 2 == 0 else -1.0])})
        assert abs(avg.debiased()['w'][0]) < 1e-3

    def test_read_before_update(self):
        with pytest.raises(TrainingError):
            IterateAverage.zeros({'w': np.zeros(1)}, 0.9).debiased()


class TestConvergence:
    def test_decreasing_trend_rejects(self):
        assert not convergence_check(np.linspace(10.0, 1.0, 200)).converged

    def test_flat_history_converges(self):
        status = convergence_check(np.ones(200))
        assert status.converged
        assert status.n_fail == 100

    def test_short_history(self):
        assert not convergence_check(np.ones(50)).converged

    def test_tiny_window_rejects(self):
        assert fails_to_reject([1.0, 0.5], 0.5)[0] is False

    def test_increasing_trend_fails_to_reject(self):
        assert fails_to_reject(np.arange(20.0), 0.5)[0] is True

    def test_noisy_exponential_decay(self, rng):
        monitor = ConvergenceMonitor(100, 0.5)
        converged_at = None
        for epoch in range(2000):
            status = monitor.add(np.exp(-epoch / 10.0) + rng.normal(0.0, 0.01))
            if status.converged:
                converged_at = epoch
                break
        assert converged_at is not None
        assert converged_at > 10 * np.log(10.0)

    def test_monitor_matches_batch_check(self, rng):
        history = np.exp(-np.arange(300) / 30.0) + rng.normal(0.0, 0.01, 300)
        monitor = ConvergenceMonitor(100, 0.5)
        for loss in history:
            status = monitor.add(loss)
        batch = convergence_check(history, 100, 0.5)
        assert (status.converged, status.n_fail) == (batch.converged, batch.n_fail)


def test_training_log_is_deterministic(tmp_path):
    log = TrainingLog()
    log.add('batch', epoch=0, batch=1, loss=np.float64(0.25), grad_norm=2.0, clipped_norm=1.0)
    log.add('restore', epoch=3, batch=0, loss=float('nan'), from_epoch=0, consecutive=1)
    text = log.to_jsonl()
    assert text.splitlines()[0] == json.dumps({'batch': 1, 'clipped_norm': 1.0, 'epoch': 0, 'grad_norm': 2.0,
                                               'loss': 0.25, 'type': 'batch'}, sort_keys=True)
    assert log.n_restores == 1
    path = log.save(str(tmp_path / 'train.log.jsonl'))
    assert open(path).read() == text


class TestTraining:
    @pytest.fixture
    def small_problem(self, rng):
        record = make_record(['x1', 'x2'])
        return small_spec(), random_batch(record, 200, 4, rng)

    def test_loss_decreases(self, small_problem):
        spec, train = small_problem
        result = fit(spec, train, seed=0)
        losses = [r['loss'] for r in result.log.of_type('epoch')]
        assert losses[-1] < losses[0]
        assert result.epochs == 20

    @pytest.mark.slow
    def test_base_spec_halves_the_loss(self):
        dataset = generate(SynthConfig.from_dict({'n_predictors': 2, 'n_events': 200, 'noise_sd': 0.1,
                                                  'interval': 0.2, 'seed': 0}))
        spec = ModelSpec.base(['x1', 'x2'], history_length=32)
        record = fit_standardization(dataset.events, dataset.responses)
        result = fit(spec, assemble_inputs(dataset.events, dataset.responses, spec, record), seed=0)
        losses = [r['loss'] for r in result.log.of_type('epoch')]
        assert result.converged
        assert losses[-1] <= losses[0] - 0.5 * abs(losses[0])

    def test_clipped_norm_bound(self, small_problem):
        spec, train = small_problem
        result = fit(spec, train, seed=1)
        assert all(r['clipped_norm'] <= 1.0 + 1e-9 for r in result.log.of_type('batch'))

    def test_same_seed_is_identical(self, small_problem):
        spec, train = small_problem
        a = fit(spec, train, seed=5)
        b = fit(spec, train, seed=5)
        assert a.log.to_jsonl() == b.log.to_jsonl()
        for name, value in a.model.store.arrays.items():
            assert_array_equal(b.model.store.arrays[name], value)

    def test_different_seeds_differ(self, small_problem):
        spec, train = small_problem
        a, b = fit(spec, train, seed=1), fit(spec, train, seed=2)
        assert not np.array_equal(a.model.store.arrays['irf0/W0'], b.model.store.arrays['irf0/W0'])

    def test_guard_is_passive_without_spikes(self, small_problem):
        spec, train = small_problem
        a = fit(spec, train, seed=3)
        b = fit(spec, train, seed=3, guard_enabled=False)
        for name, value in a.model.store.arrays.items():
            assert_array_equal(b.model.store.arrays[name], value)

    def test_persistent_nan_diverges(self, small_problem):
        spec, train = small_problem
        trainer = CDRNNTrainer(spec, train.record, seed=0)
        with pytest.raises(TrainingError) as exc:
            trainer.train(train, loss_hook=lambda epoch, batch, loss: float('nan'))
        assert trainer.log.n_restores == spec.hyperparameters.max_restores
        assert len(trainer.log.of_type('divergence')) == 1
        assert exc.value.exit_code == 4

    def test_nan_without_guard(self, small_problem):
        spec, train = small_problem
        with pytest.raises(TrainingError):
            fit(spec, train, loss_hook=lambda epoch, batch, loss: float('nan'), guard_enabled=False)

    def test_empty_training_set(self, small_problem):
        spec, train = small_problem
        with pytest.raises(TrainingError):
            fit(spec, train.subset(np.array([], dtype=int)))

    def test_exploratory_metric_needs_set(self, small_problem):
        _, train = small_problem
        spec = small_spec(convergence_metric='exploratory')
        with pytest.raises(TrainingError):
            fit(spec, train)

    def test_exploratory_metric(self, small_problem, rng):
        _, train = small_problem
        spec = small_spec(convergence_metric='exploratory', exploratory_every=5)
        result = fit(spec, train, exploratory=random_batch(train.record, 50, 4, rng))
        assert [r['epoch'] for r in result.log.of_type('epoch')] == [0, 5, 10, 15]

    def test_disk_checkpoint(self, small_problem, tmp_path):
        spec, train = small_problem
        path = str(tmp_path / 'ckpt.npz')
        CDRNNTrainer(spec, train.record, seed=0).train(train, checkpoint_path=path)
        model, arrays, meta = load_checkpoint(path)
        assert meta['epoch'] == 10
        assert set(model.store.arrays) == {name[len('adam_m/'):] for name in arrays if name.startswith('adam_m/')}

    def test_evaluate_and_save(self, small_problem, tmp_path):
        spec, train = small_problem
        trainer = CDRNNTrainer(spec, train.record, seed=0)
        trainer.train(train)
        metrics = trainer.evaluate(train)
        assert set(metrics) == {'nll', 'nll_raw', 'mse'}
        path = trainer.save_model(str(tmp_path / 'model.npz'))
        assert (tmp_path / 'model.log.jsonl').exists()
        loaded = CDRNNTrainer(spec, train.record).load_model(path)
        assert_array_equal(loaded.loglik(train), trainer.model.loglik(train))


class TestRecovery:
    def test_dirac_linear_model_matches_least_squares(self, linear_problem):
        events, responses, record, ols = linear_problem
        spec = _dirac_linear_spec()
        train = assemble_inputs(events, responses, spec, record)
        result = fit(spec, train, seed=0)
        assert result.converged
        assert_allclose(_fitted_slopes(result.model, record), ols, rtol=0.05)

    def test_injected_spike_is_restored(self, linear_problem):
        events, responses, record, ols = linear_problem
        spec = _dirac_linear_spec()
        train = assemble_inputs(events, responses, spec, record)

        def spike(epoch, batch, loss):
            return 1e6 if (epoch, batch) == (7, 0) else loss

        result = fit(spec, train, seed=0, loss_hook=spike)
        restores = result.log.of_type('restore')
        assert len(restores) == 1
        assert (restores[0]['epoch'], restores[0]['from_epoch']) == (7, 0)
        assert result.converged
        assert_allclose(_fitted_slopes(result.model, record), ols, rtol=0.05)
