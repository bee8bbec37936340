"""
Tests for loading, standardization, levels and partitioning
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import make_batch, make_record
from utils.data_loader import (
    DataLoader, EventStream, ResponseTable, build_levels, encode_levels, fit_standardization, split_data,
)
from utils.errors import ConfigurationError, DataError


@pytest.fixture
def loader(tmp_path):
    return DataLoader(str(tmp_path))


def _write(path, text):
    path.write_text(text, encoding='utf-8')
    return str(path)


class TestSplitData:
    def test_four_items(self):
        parts = split_data(4, (0.5, 0.25, 0.25), seed=0)
        assert [len(parts[p]) for p in ('train', 'exploratory', 'test')] == [2, 1, 1]
        assert sorted(np.concatenate(list(parts.values())).tolist()) == [0, 1, 2, 3]

    def test_deterministic(self):
        a = split_data(100, seed=7)
        b = split_data(100, seed=7)
        for name in a:
            assert_array_equal(a[name], b[name])

    def test_seed_changes_assignment(self):
        assert not np.array_equal(split_data(100, seed=1)['train'], split_data(100, seed=2)['train'])

    def test_proportions(self):
        parts = split_data(100000, (0.5, 0.25, 0.25), seed=3)
        assert len(parts['train']) / 100000 == pytest.approx(0.5, abs=0.01)
        assert len(parts['test']) / 100000 == pytest.approx(0.25, abs=0.01)

    def test_largest_remainder(self):
        parts = split_data(5, (0.5, 0.25, 0.25))
        assert sum(len(v) for v in parts.values()) == 5
        assert len(parts['train']) in (2, 3)

    @pytest.mark.parametrize('ratios', [(0.5, 0.5), (0.6, 0.3, 0.3), (1.2, -0.1, -0.1)])
    def test_invalid_ratios(self, ratios):
        with pytest.raises(ConfigurationError):
            split_data(10, ratios)


class TestLoader:
    def test_events_sorted_within_series(self, loader, tmp_path):
        _write(tmp_path / 'events.csv', 'series_id,time,x\nb,1,5\na,2,2\na,1,1\n')
        events = loader.load_events('events.csv')
        assert events.series.tolist() == ['a', 'a', 'b']
        assert events.times.tolist() == [1.0, 2.0, 1.0]
        assert events.column('x').tolist() == [1.0, 2.0, 5.0]

    def test_predictor_subset(self, loader, tmp_path):
        _write(tmp_path / 'events.csv', 'series_id,time,x,w\na,0,1,2\n')
        assert loader.load_events('events.csv', ['w']).predictor_names == ['w']

    def test_non_numeric_cell(self, loader, tmp_path):
        _write(tmp_path / 'events.csv', 'series_id,time,x\na,0,1\na,1,oops\n')
        with pytest.raises(DataError) as exc:
            loader.load_events('events.csv')
        assert exc.value.line == 3
        assert exc.value.column == 'x'

    def test_missing_column(self, loader, tmp_path):
        _write(tmp_path / 'responses.csv', 'series_id,time\na,0\n')
        with pytest.raises(DataError) as exc:
            loader.load_responses('responses.csv')
        assert exc.value.column == 'y'

    def test_missing_file(self, loader):
        with pytest.raises(DataError):
            loader.load_events('nothing.csv')

    def test_responses_with_factor(self, loader, tmp_path):
        _write(tmp_path / 'responses.csv', 'series_id,time,y,subject\na,0,1.5,s2\na,1,2.5,s1\n')
        responses = loader.load_responses('responses.csv', ['subject'])
        assert responses.y.tolist() == [1.5, 2.5]
        assert responses.factors['subject'].tolist() == ['s2', 's1']

    def test_save_and_reload(self, loader):
        events = EventStream(series=['a', 'a'], times=[0.0, 0.1], values=[[1 / 3], [2 / 3]], predictor_names=['x'])
        path = loader.save_events(events, 'out.csv')
        assert_array_equal(loader.load_events(path).values, events.values)


class TestStandardization:
    def test_sd_only(self):
        events = EventStream(series=['a'] * 3, times=[0.0, 1.0, 2.0], values=[[1.0], [2.0], [3.0]],
                             predictor_names=['x'])
        responses = ResponseTable(series=['a'] * 2, times=[0.0, 1.0], y=[1.0, 3.0])
        record = fit_standardization(events, responses)
        assert_allclose(record.x_sd, [np.std([1.0, 2.0, 3.0])])
        assert record.y_sd == pytest.approx(1.0)
        assert_allclose(record.x_mean, [2.0])
        assert record.t_mean == pytest.approx(1.0)
        assert_allclose(record.standardize_y([2.0]), [2.0])
        assert_allclose(record.destandardize_y(record.standardize_y([7.5])), [7.5])

    def test_empty_training_set(self):
        events = EventStream(series=[], times=[], values=np.zeros((0, 1)), predictor_names=['x'])
        responses = ResponseTable(series=[], times=[], y=[])
        with pytest.raises(DataError):
            fit_standardization(events, responses)

    def test_record_dict(self):
        record = make_record(['x1', 'x2'], y_sd=2.0, x_sd=[0.5, 4.0])
        again = type(record).from_dict(record.to_dict())
        assert_array_equal(again.x_sd, record.x_sd)
        assert again.y_sd == 2.0


class TestLevels:
    def test_sorted_levels(self):
        responses = ResponseTable(series=['a'] * 3, times=[0, 1, 2], y=[0, 0, 0],
                                  factors={'subject': ['s2', 's1', 's2']})
        levels = build_levels(responses, ['subject'])
        assert levels == {'subject': ['s1', 's2']}
        assert encode_levels(responses, levels)[:, 0].tolist() == [1, 0, 1]

    def test_unknown_level(self):
        responses = ResponseTable(series=['a'], times=[0], y=[0], factors={'subject': ['s9']})
        with pytest.raises(DataError) as exc:
            encode_levels(responses, {'subject': ['s1']})
        assert exc.value.line == 2

    def test_missing_factor(self):
        responses = ResponseTable(series=['a'], times=[0], y=[0])
        with pytest.raises(DataError):
            build_levels(responses, ['subject'])


def test_last_valid_row():
    record = make_record(['x'])
    mask = np.array([[False, True, True], [False, False, False], [True, True, True]])
    batch = make_batch(np.zeros((3, 3, 1)), np.zeros((3, 3)), np.zeros((3, 3)), mask, np.zeros(3), record)
    assert_array_equal(batch.last_valid, [[False, False, True], [False, False, False], [False, False, True]])
    sub = batch.subset([2, 0])
    assert sub.item_index.tolist() == [2, 0]
    assert_array_equal(sub.mask, mask[[2, 0]])
