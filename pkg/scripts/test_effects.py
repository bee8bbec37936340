"""
Tests for effect queries, plot data and uncertainty bands
"""

import json
import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import make_record
from evaluation.effects import (
    QueryInputs, ReferenceConfig, curve_query, delay_grid, effect_query, interaction_surface, irf_curve,
    irf_surface, nonstationarity_slice, reference_config, save_result, uncertainty_band,
)
from models.cdrnn import CDRNNModel, init_parameters, sample_draw
from models.spec import ModelSpec, stationarize
from utils.data_loader import EventStream, ResponseTable, fit_standardization
from utils.errors import ConfigurationError


def _linear_model(y_sd=2.0, x_sd=(0.5, 1.0)):
    """Constant IRF: mu gains 1.0 (response units) per unit of x1"""
    spec = ModelSpec.from_dict({
        'predictor_names': ['x1', 'x2'],
        'history_length': 2,
        'irf_blocks': [{'name': 'const', 'convolved_features': ['rate', 'x1', 'x2'], 'conditioning_features': []}],
        'hyperparameters': {'hidden_layers': 0, 'dropout': 0.0, 'inference': 'mle'},
    })
    store = init_parameters(spec, np.random.default_rng(0))
    store.arrays['irf0/W0'][:] = 0.0
    store.arrays['irf0/b0'] = np.array([0.3, 1.5, -0.7, 0.0, 0.0, 0.0])
    return CDRNNModel(store, make_record(['x1', 'x2'], y_sd=y_sd, x_sd=x_sd))


def _random_model(spec, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    store = init_parameters(spec, rng)
    for name in store.arrays:
        store.arrays[name] = store.arrays[name] + scale * rng.standard_normal(store.arrays[name].shape)
    return CDRNNModel(store, make_record(spec.predictor_names, x_sd=np.full(len(spec.predictor_names), 1.3)))


@pytest.fixture
def nonlinear_model():
    return _random_model(ModelSpec.base(['x1', 'x2'], history_length=3,
                                        hyperparameters={'hidden_layers': 2, 'hidden_units': 8, 'dropout': 0.0,
                                                         'inference': 'mle'}))


class TestReference:
    def test_training_means(self):
        ref = reference_config(make_record(['x1', 'x2'], x_mean=[0.2, -1.0]))
        assert_array_equal(ref.x, [0.2, -1.0])
        assert len(ref.delays) == 101
        assert ref.delays[-1] == pytest.approx(2.5)

    def test_from_toy_table(self):
        events = EventStream(series=['a'] * 3, times=[0.0, 1.0, 2.0], values=[[0.0, -1.0], [0.3, -1.0], [0.3, -1.0]],
                             predictor_names=['x1', 'x2'])
        record = fit_standardization(events, ResponseTable(series=['a'], times=[2.0], y=[1.0]))
        assert_allclose(reference_config(record).x, [0.2, -1.0])

    @pytest.mark.parametrize('delays', [[0.0, 0.5, 0.5], [-0.1, 1.0], []])
    def test_invalid_grid(self, delays):
        with pytest.raises(ConfigurationError):
            ReferenceConfig(predictor_names=['x1'], x=[0.0], t=0.0, delays=delays)

    def test_unknown_statistic(self):
        with pytest.raises(ConfigurationError):
            reference_config(make_record(['x1']), statistic='skew')

    def test_delay_grid(self):
        assert_allclose(delay_grid(1.0, 3), [0.0, 0.5, 1.0])


class TestQueries:
    def test_linear_curve(self):
        model = _linear_model()
        result = irf_curve(model, 'x1', step=1.0)
        assert_allclose(result.median, np.ones(101), atol=1e-12)

    def test_default_step_is_one_sd(self):
        model = _linear_model()
        result = irf_curve(model, 'x1')
        assert_allclose(result.median, np.full(101, 0.5), atol=1e-12)

    def test_zero_step(self, nonlinear_model):
        assert_allclose(irf_curve(nonlinear_model, 'x1', step=0.0).median, 0.0, atol=1e-12)

    def test_identical_configurations(self, nonlinear_model):
        inputs = QueryInputs(x=np.array([[0.1, 0.2], [1.0, -1.0]]), t=np.array([0.5, 1.0]), d=np.array([0.0, 2.0]))
        assert_allclose(effect_query(nonlinear_model, inputs, inputs), 0.0, atol=1e-12)

    def test_antisymmetry(self, nonlinear_model, rng):
        a = QueryInputs(x=rng.normal(size=(4, 2)), t=rng.uniform(0, 2, 4), d=rng.uniform(0, 2, 4))
        b = QueryInputs(x=rng.normal(size=(4, 2)), t=rng.uniform(0, 2, 4), d=rng.uniform(0, 2, 4))
        assert_allclose(effect_query(nonlinear_model, a, b), -effect_query(nonlinear_model, b, a), atol=1e-12)

    def test_shape_mismatch(self, nonlinear_model):
        a = QueryInputs(x=np.zeros((2, 2)), t=np.zeros(2), d=np.zeros(2))
        b = QueryInputs(x=np.zeros((3, 2)), t=np.zeros(3), d=np.zeros(3))
        with pytest.raises(ConfigurationError):
            effect_query(nonlinear_model, a, b)

    def test_dirac_curve_is_flat(self):
        spec = ModelSpec.from_dict({'predictor_names': ['x1', 'x2'], 'history_length': 2, 'irf_blocks': [
            {'name': 'dirac', 'convolved_features': ['rate', 'x1', 'x2'], 'conditioning_features': ['x1', 'x2'],
             'include_offset_d': False, 'dirac_delta': True}],
            'hyperparameters': {'hidden_units': 8, 'dropout': 0.0}})
        curve = irf_curve(_random_model(spec), 'x1').median
        assert_allclose(curve, curve[0], atol=1e-12)
        assert abs(curve[0]) > 0

    def test_surface_slice_matches_curve(self, nonlinear_model):
        ref = reference_config(nonlinear_model.record)
        curve = irf_curve(nonlinear_model, 'x2', ref=ref, step=0.7).median
        surface = irf_surface(nonlinear_model, 'x2', [ref.x[1] - 0.5, ref.x[1] + 0.7], ref=ref).median
        assert surface.shape == (2, 101)
        assert_allclose(surface[1], curve, atol=1e-12)

    def test_stationary_predictor(self):
        spec = stationarize(ModelSpec.base(['x1', 'x2'], history_length=2,
                                           hyperparameters={'hidden_units': 8, 'dropout': 0.0}), 'x1')
        model = _random_model(spec, seed=3)
        values = nonstationarity_slice(model, 'x1', 0.5, np.linspace(0.0, 10.0, 11)).median
        assert_allclose(values, values[0], atol=1e-8)
        timed = nonstationarity_slice(_random_model(ModelSpec.base(['x1', 'x2'], history_length=2), seed=3),
                                      'x1', 0.5, np.linspace(0.0, 10.0, 11)).median
        assert np.ptp(timed) > 1e-6

    def test_interaction_grid(self, nonlinear_model):
        result = interaction_surface(nonlinear_model, 'x1', 'x2', 0.5, [-1.0, 0.0, 1.0], [0.0, 2.0])
        assert result.median.shape == (3, 2)
        with pytest.raises(ConfigurationError):
            interaction_surface(nonlinear_model, 'x1', 'x1', 0.5, [0.0], [1.0])

    def test_statistics(self):
        model = _linear_model()
        assert_allclose(irf_curve(model, 'x1', statistic='sigma').median, 0.0, atol=1e-12)
        assert_allclose(irf_curve(model, 'x1', statistic='var').median, 0.0, atol=1e-12)
        query = curve_query(model.record, 'x1', reference_config(model.record), statistic='skew')
        with pytest.raises(ConfigurationError):
            query.evaluate(model)

    def test_unknown_predictor(self, nonlinear_model):
        with pytest.raises(ConfigurationError):
            irf_curve(nonlinear_model, 'x9')

    def test_out_of_range_flag(self, nonlinear_model, caplog):
        with caplog.at_level(logging.WARNING):
            result = irf_curve(nonlinear_model, 'x1', step=10.0)
        assert result.out_of_range.all()
        assert 'outside the training range' in caplog.text
        assert not irf_curve(nonlinear_model, 'x1', step=0.5).out_of_range.any()


class TestUncertainty:
    def test_deterministic_model_has_zero_width(self, nonlinear_model):
        query = curve_query(nonlinear_model.record, 'x1', reference_config(nonlinear_model.record))
        band = uncertainty_band([nonlinear_model], query, n_samples=5, rng=np.random.default_rng(0))
        assert_array_equal(band.lower, band.upper)
        assert_allclose(band.median, query.evaluate(nonlinear_model), atol=1e-12)

    def test_band_is_ordered(self):
        spec = ModelSpec.base(['x1', 'x2'], history_length=3, hyperparameters={'hidden_units': 8, 'dropout': 0.3})
        models = [_random_model(spec, seed=s) for s in (1, 2)]
        query = curve_query(models[0].record, 'x1', reference_config(models[0].record))
        band = uncertainty_band(models, query, n_samples=40, rng=np.random.default_rng(0))
        assert np.all(band.lower <= band.median) and np.all(band.median <= band.upper)
        assert np.any(band.upper > band.lower)

    def test_frozen_draw_is_coherent(self):
        spec = ModelSpec.base(['x1', 'x2'], history_length=3, hyperparameters={'hidden_units': 8, 'dropout': 0.5})
        model = _random_model(spec)
        query = curve_query(model.record, 'x1', reference_config(model.record))
        draw = sample_draw(model.store, np.random.default_rng(5))
        assert_array_equal(query.evaluate(model, draw), query.evaluate(model, draw))

    def test_needs_two_samples(self, nonlinear_model):
        query = curve_query(nonlinear_model.record, 'x1', reference_config(nonlinear_model.record))
        with pytest.raises(ConfigurationError):
            uncertainty_band([nonlinear_model], query, n_samples=1)


class TestPlotData:
    def test_curve_frame(self, nonlinear_model):
        frame = irf_curve(nonlinear_model, 'x1').to_frame()
        assert len(frame) == 101
        assert list(frame.columns) == ['delay', 'statistic', 'lower', 'median', 'upper', 'out_of_range']

    def test_surface_frame(self, nonlinear_model):
        frame = irf_surface(nonlinear_model, 'x1', [0.0, 1.0, 2.0]).to_frame()
        assert len(frame) == 303
        assert frame['x1'].iloc[101] == 1.0

    def test_save_result(self, nonlinear_model, tmp_path):
        result = irf_curve(nonlinear_model, 'x1')
        paths = save_result(result, str(tmp_path), 'irf_curve_x1', svg=True)
        assert set(paths) == {'csv', 'json', 'svg'}
        with open(paths['json']) as f:
            payload = json.load(f)
        assert payload['kind'] == 'curve' and len(payload['median']) == 101
        assert open(paths['svg']).read().lstrip().startswith('<?xml')

    def test_save_surface_svg(self, nonlinear_model, tmp_path):
        result = irf_surface(nonlinear_model, 'x1', [0.0, 1.0])
        assert save_result(result, str(tmp_path), 'surface', svg=True)['svg'].endswith('.svg')
