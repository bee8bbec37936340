"""
Tests for the synthetic data generator
"""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate

from utils.data_loader import DataLoader, EventStream, ResponseTable
from utils.errors import ConfigurationError
from utils.synth import (
    KernelSpec, SynthConfig, convolve_kernels, gen_events, gen_predictors, gen_response_times, generate,
    kernel_eval, synth_response, write_dataset,
)


class TestKernels:
    def test_exponential_at_zero(self):
        assert kernel_eval(KernelSpec(family='exponential', rate=1.0), 0.0) == pytest.approx(1.0)

    def test_normal_at_mean(self):
        assert kernel_eval(KernelSpec(family='normal', mean=1.0, sd=1.0), 1.0) == pytest.approx(0.3989, abs=1e-4)

    def test_shifted_gamma(self):
        kernel = KernelSpec(family='shifted_gamma', shape=2.0, rate=2.0, shift=-0.5)
        # Gamma(2, rate 2) density at 0.5 is 4 * 0.5 * exp(-1)
        assert kernel_eval(kernel, 0.0) == pytest.approx(2.0 * np.exp(-1.0), rel=1e-12)
        assert kernel_eval(kernel, -0.75) == 0.0

    def test_coefficient_scales(self):
        assert kernel_eval(KernelSpec(coefficient=-2.0), 0.0) == pytest.approx(-2.0)

    @pytest.mark.parametrize('kernel', [
        KernelSpec(family='exponential', rate=3.0),
        KernelSpec(family='normal', mean=1.0, sd=0.5),
        KernelSpec(family='shifted_gamma', shape=2.0, rate=1.0, shift=-0.5),
    ])
    def test_unit_mass(self, kernel):
        lower = kernel.distribution().support()[0]
        mass, _ = integrate.quad(lambda d: kernel_eval(kernel, d), max(lower, -50.0), np.inf)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_vectorized(self):
        values = kernel_eval(KernelSpec(), np.array([0.0, 1.0, 2.0]))
        assert_allclose(values, np.exp(-np.array([0.0, 1.0, 2.0])))


class TestEvents:
    def test_fixed_timing(self, rng):
        config = SynthConfig(n_events=5, timing='fixed', interval=1.0)
        assert gen_events(config, rng).times.tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]

    def test_fixed_interval_five(self, rng):
        config = SynthConfig(n_events=3, timing='fixed', interval=5.0)
        assert gen_events(config, rng).times.tolist() == [0.0, 5.0, 10.0]

    def test_random_gap_mean(self, rng):
        config = SynthConfig(n_events=100000, timing='random', interval=1.0)
        gaps = np.diff(gen_events(config, rng).times)
        assert gaps.mean() == pytest.approx(1.0, rel=0.02)
        assert np.all(gaps >= 0)

    def test_same_seed_same_stream(self):
        config = SynthConfig(n_events=50)
        a = gen_events(config, np.random.default_rng(4))
        b = gen_events(config, np.random.default_rng(4))
        assert_array_equal(a.times, b.times)
        assert_array_equal(a.values, b.values)

    def test_series(self, rng):
        config = SynthConfig(n_events=10, n_series=3)
        events = gen_events(config, rng)
        assert sorted(events.groups()) == ['s0', 's1', 's2']
        assert len(events) == 30


class TestPredictors:
    def test_correlation(self, rng):
        values = gen_predictors(3, 0.5, 100000, rng)
        corr = np.corrcoef(values.T)
        assert_allclose(corr[np.triu_indices(3, 1)], 0.5, atol=0.02)
        assert_allclose(values.std(axis=0), 1.0, atol=0.02)

    def test_single_predictor(self, rng):
        assert gen_predictors(1, 0.9, 10, rng).shape == (10, 1)

    def test_not_positive_definite(self, rng):
        with pytest.raises(ConfigurationError):
            gen_predictors(3, 1.0, 10, rng)


class TestResponses:
    def _single_event(self):
        events = EventStream(series=['s'], times=[0.0], values=[[2.0]], predictor_names=['x1'])
        return events, ResponseTable(series=['s', 's'], times=[1.0, -1.0], y=[0.0, 0.0])

    def test_single_event(self, rng):
        events, responses = self._single_event()
        out = synth_response(events, {'x1': KernelSpec()}, 0.0, responses, rng)
        assert_allclose(out.y, [2.0 * np.exp(-1.0), 0.0])

    def test_quadratic_transform(self, rng):
        events, responses = self._single_event()
        out = synth_response(events, {'x1': KernelSpec(transform='quadratic')}, 0.0, responses, rng)
        assert out.y[0] == pytest.approx(4.0 * np.exp(-1.0))

    def test_matches_double_loop(self, rng):
        config = SynthConfig(n_predictors=2, n_events=40, n_series=2, noise_sd=0.0)
        events = gen_events(config, rng)
        responses = gen_response_times(config, events, rng)
        signal = convolve_kernels(events, config.kernels, responses)
        for m in range(len(responses)):
            expected = 0.0
            for i in range(len(events)):
                d = responses.times[m] - events.times[i]
                if events.series[i] == responses.series[m] and d >= 0:
                    for k, name in enumerate(events.predictor_names):
                        expected += events.values[i, k] * kernel_eval(config.kernels[name], d)
            assert signal[m] == pytest.approx(expected, abs=1e-10)

    def test_superposition(self, rng):
        config = SynthConfig(n_predictors=2, n_events=100, noise_sd=0.0)
        events = gen_events(config, rng)
        responses = gen_response_times(config, events, rng)
        both = convolve_kernels(events, config.kernels, responses)
        parts = sum(convolve_kernels(events, config.kernels, responses, [name]) for name in ('x1', 'x2'))
        assert_allclose(both, parts, atol=1e-12)

    def test_missing_predictor(self, rng):
        events, responses = self._single_event()
        with pytest.raises(ConfigurationError):
            synth_response(events, {'x9': KernelSpec()}, 0.0, responses, rng)

    def test_async_times(self, rng):
        config = SynthConfig(n_events=200, n_responses=150, timing='async')
        events = gen_events(config, rng)
        responses = gen_response_times(config, events, rng)
        assert len(responses) == 150
        assert np.all(np.diff(responses.times) > 0)
        assert not np.isin(responses.times, events.times).any()

    def test_synchronous_times(self, rng):
        config = SynthConfig(n_events=20, n_responses=10, timing='random')
        events = gen_events(config, rng)
        assert_array_equal(gen_response_times(config, events, rng).times, events.times[:10])


class TestGenerate:
    def test_deterministic(self):
        config = SynthConfig(n_events=200, seed=9)
        a, b = generate(config), generate(config)
        assert_array_equal(a.responses.y, b.responses.y)
        assert a.truth == b.truth

    def test_noise_level(self):
        config = SynthConfig(n_predictors=1, n_events=5000, noise_sd=0.5, seed=2)
        data = generate(config)
        clean = convolve_kernels(data.events, config.kernels, data.responses)
        assert np.std(data.responses.y - clean) == pytest.approx(0.5, rel=0.05)

    def test_noise_modulation(self):
        config = SynthConfig.from_dict({'n_predictors': 1, 'n_events': 5000, 'noise_sd': 0.5, 'seed': 3,
                                        'noise_modulation': {'predictor': 'x1', 'strength': 0.5}})
        data = generate(config)
        clean = convolve_kernels(data.events, config.kernels, data.responses)
        scale = np.exp(0.5 * convolve_kernels(data.events, config.kernels, data.responses, ['x1']))
        assert np.std((data.responses.y - clean) / scale) == pytest.approx(0.5, rel=0.05)

    def test_subjects(self):
        config = SynthConfig(n_events=100, n_series=4, n_subjects=2, subject_sd=1.0, seed=1)
        data = generate(config)
        assert set(data.responses.factors['subject']) == {'subj0', 'subj1'}
        assert set(data.truth['subject_effects']) == {'subj0', 'subj1'}

    def test_default_kernel_families(self):
        config = SynthConfig(n_predictors=4)
        assert [config.kernels[f'x{k}'].family for k in range(1, 5)] == [
            'exponential', 'normal', 'shifted_gamma', 'exponential']

    @pytest.mark.parametrize('payload', [
        {'correlation': 1.0},
        {'kernels': {'x7': {}}},
        {'noise_modulation': {'predictor': 'x9'}},
        {'timing': 'weekly'},
    ])
    def test_invalid_config(self, payload):
        with pytest.raises(ConfigurationError):
            SynthConfig.from_dict(payload)

    def test_write_dataset(self, tmp_path):
        data = generate(SynthConfig(n_events=30, n_subjects=2))
        paths = write_dataset(data, str(tmp_path / 'events.csv'), str(tmp_path / 'responses.csv'))
        assert paths['ground_truth'] == str(tmp_path / 'ground_truth.json')
        loader = DataLoader()
        assert_array_equal(loader.load_events(paths['events']).values, data.events.values)
        responses = loader.load_responses(paths['responses'], ['subject'])
        assert_array_equal(responses.y, data.responses.y)
        with open(paths['ground_truth']) as f:
            assert json.load(f)['kernels']['x1']['family'] == 'exponential'
