import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from tanml.predictors import InvalidArgument
from tanml.taskgen import (Task, TaskBatch, TaskSourceSpec, gen_linear_task, gen_outlier_task, gen_sine_task,
                           gen_task, gen_task_set, outlier_count, read_task_file, task_function, task_rng,
                           write_task_file)

LIN = TaskSourceSpec("linear-bimodal", 16, 16, 1.0, input_dim=16)
AMP = TaskSourceSpec("sine-amplitude", 4, 25, 0.0, input_dim=1)
FREQ = TaskSourceSpec("sine-frequency", 4, 25, 0.0, input_dim=1)


def same_tasks(a, b):
    return all(np.array_equal(x.train.inputs, y.train.inputs) and np.array_equal(x.train.targets, y.train.targets)
               and np.array_equal(x.test.inputs, y.test.inputs) and np.array_equal(x.test.targets, y.test.targets)
               and x.meta == y.meta for x, y in zip(a, b)) and len(a) == len(b)


class TestLinear:
    def test_noiseless_exact(self, rng):
        spec = TaskSourceSpec("linear-bimodal", 8, 8, 0.0, input_dim=5)
        t = gen_linear_task(spec, rng)
        beta = np.array(t.meta["beta"])
        assert np.array_equal(t.train.targets[:, 0], t.train.inputs @ beta)

    def test_mode_balance_and_mean(self):
        spec = TaskSourceSpec("linear-bimodal", 1, 1, 1.0, input_dim=4)
        tasks = gen_task_set(spec, 10000, 3)
        modes = np.array([t.meta["mode"] for t in tasks])
        assert abs(np.mean(modes == 1) - 0.5) < 0.02
        betas = np.array([t.meta["beta"] for t in tasks])
        assert np.all(np.abs(betas.mean(axis=0)) < 0.25)
        for m in (-1, 1):
            assert np.allclose(betas[modes == m].mean(axis=0), 4 * m, atol=0.1)

    def test_shapes(self, rng):
        t = gen_linear_task(LIN, rng)
        assert t.train.inputs.shape == (16, 16) and t.test.targets.shape == (16, 1)


class TestSine:
    @given(st.integers(0, 2**32 - 1))
    def test_amplitude_bound(self, seed):
        t = gen_sine_task(AMP, task_rng(seed, 0, 0))
        a = t.meta["amplitude"]
        assert 0 < a <= 1
        assert np.all(np.abs(t.train.targets) <= a) and np.all(np.abs(t.test.targets) <= a)

    def test_zero_at_origin(self):
        f = task_function({"kind": "sine", "amplitude": 1.0, "frequency": 1.0})
        assert f(np.zeros((1, 1)))[0, 0] == 0.0

    def test_frequency_range(self):
        ws = [t.meta["frequency"] for t in gen_task_set(FREQ, 500, 1)]
        assert min(ws) >= 1.0 and max(ws) <= 1.5

    def test_x_uniform(self):
        xs = np.concatenate([t.train.inputs.ravel() for t in gen_task_set(AMP, 2000, 5)])
        assert stats.kstest(xs, stats.uniform(loc=-1, scale=2).cdf).pvalue > 0.01

    @given(st.integers(0, 2**32 - 1))
    def test_inliers_are_nonlinear(self, seed):
        t = gen_sine_task(AMP, task_rng(seed, 0, 1))
        x, y = t.train.inputs[:, 0], t.train.targets[:, 0]
        slope = (x @ y) / (x @ x)
        assert np.max(np.abs(y - slope * x)) > 1e-9


class TestOutliers:
    @pytest.mark.parametrize("spec", [AMP, FREQ])
    def test_linear_exact(self, spec, rng):
        t = gen_outlier_task(spec, rng)
        s = t.meta["slope"]
        assert np.array_equal(t.train.targets, s * t.train.inputs)
        assert task_function(t.meta)(np.ones((1, 1)))[0, 0] == s

    @pytest.mark.parametrize("fraction,T,expected", [(0.2, 256, 51), (0.1, 256, 26), (0.0, 256, 0),
                                                     (0.1, 64, 6), (0.1, 25, 3)])
    def test_counts(self, fraction, T, expected):
        spec = TaskSourceSpec("sine-amplitude", 4, 25, 0.0, fraction, input_dim=1)
        assert outlier_count(fraction, T) == expected
        assert sum(t.is_outlier for t in gen_task_set(spec, T, 0)) == expected

    def test_outliers_on_linear_rejected(self):
        with pytest.raises(InvalidArgument):
            TaskSourceSpec("linear-bimodal", outlier_fraction=0.1)


class TestDeterminism:
    def test_same_seed(self):
        spec = TaskSourceSpec("sine-frequency", 4, 25, 0.0, 0.2, input_dim=1)
        assert same_tasks(gen_task_set(spec, 30, 9), gen_task_set(spec, 30, 9))

    def test_different_seed(self):
        a, b = gen_task_set(LIN, 2, 1), gen_task_set(LIN, 2, 2)
        assert not np.array_equal(a[0].train.inputs, b[0].train.inputs)

    def test_order_independent(self):
        spec = TaskSourceSpec("sine-amplitude", 4, 25, 0.0, 0.1, input_dim=1)
        full = gen_task_set(spec, 20, 4)
        out = {i for i, t in enumerate(full) if t.is_outlier}
        rev = [gen_task(spec, i, 4, 0, i in out) for i in reversed(range(20))][::-1]
        assert same_tasks(full, rev)

    def test_streams_differ(self):
        a, b = gen_task_set(AMP, 3, 0, 0), gen_task_set(AMP, 3, 0, 1)
        assert not np.array_equal(a[0].train.inputs, b[0].train.inputs)

    def test_meta_reproduces_both_splits(self):
        for t in gen_task_set(TaskSourceSpec("sine-amplitude", 4, 25, 0.0, 0.2, input_dim=1), 20, 0):
            f = task_function(t.meta)
            assert np.array_equal(f(t.train.inputs), t.train.targets)
            assert np.array_equal(f(t.test.inputs), t.test.targets)


def test_task_file_round_trip(tmp_path):
    tasks = gen_task_set(TaskSourceSpec("sine-amplitude", 4, 25, 0.0, 0.2, input_dim=1), 10, 0)
    path = tmp_path / "t.jsonl"
    write_task_file(path, tasks, {"note": "x"})
    assert same_tasks(tasks, read_task_file(path))


def test_batch_stacking():
    b = TaskBatch.from_tasks(gen_task_set(LIN, 5, 0))
    assert b.x_train.shape == (5, 16, 16) and b.y_test.shape == (5, 16, 1) and len(b) == 5
    with pytest.raises(InvalidArgument):
        TaskBatch.from_tasks([])


def test_spec_validation():
    with pytest.raises(InvalidArgument):
        TaskSourceSpec("sine-amplitude", input_dim=2)
    with pytest.raises(InvalidArgument):
        TaskSourceSpec("gaussian-process")
    assert isinstance(gen_task(AMP, 0, 0), Task)
