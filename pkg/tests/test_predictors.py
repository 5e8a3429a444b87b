import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fd_grad, rel_err
from tanml.predictors import (Dataset, InvalidArgument, LayerLayout, LinearModel, MLPModel, glorot_init,
                              make_model)


def naive_mlp(theta, x, widths):
    """Straight-line forward pass, one layer at a time, no batching."""
    pos, h = 0, np.asarray(x, dtype=np.float64)
    n_layers = len(widths) - 1
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        W = theta[pos:pos + a * b].reshape(a, b)
        pos += a * b
        bias = theta[pos:pos + b]
        pos += b
        out = np.zeros(b)
        for j in range(b):
            out[j] = sum(h[k] * W[k, j] for k in range(a)) + bias[j]
        h = np.maximum(out, 0.0) if i < n_layers - 1 else out
    return h


def smooth_mlp_point(rng, widths, k=6):
    """Random MLP parameters and data with every pre-activation well away from 0."""
    model = MLPModel(widths)
    while True:
        theta = rng.normal(size=model.dim)
        X = rng.normal(size=(k, widths[0]))
        _, _, pre, _ = model._forward(theta[None], X[None])
        if all(np.min(np.abs(p)) > 1e-2 for p in pre):
            return model, theta, Dataset(X, rng.normal(size=(k, widths[-1])))


class TestLayout:
    def test_dense_layout_offsets(self):
        lay = LayerLayout.dense([1, 16, 16, 1])
        assert lay.total_dim == 16 + 16 + 256 + 16 + 16 + 1
        assert lay.num_layers == 3
        assert [s.stop - s.start for s in lay.layer_slices()] == [32, 272, 17]

    def test_rejects_gaps(self):
        lay = LayerLayout.dense([2, 3])
        bad = (lay.segments[0], lay.segments[1].__class__(7, 3, "bias", (1, 3), 0))
        with pytest.raises(InvalidArgument):
            LayerLayout(bad, 10)

    def test_dict_round_trip(self):
        lay = LayerLayout.dense([1, 4, 1])
        assert LayerLayout.from_dict(lay.to_dict()) == lay


class TestForward:
    def test_linear_zero_params(self, rng):
        m = LinearModel(5)
        assert m.forward(np.zeros(5), rng.normal(size=5)) == 0.0

    def test_mlp_zero_params(self, rng):
        m = MLPModel()
        assert np.all(m.forward(np.zeros(m.dim), rng.normal(size=1)) == 0.0)

    def test_linear_reproduces_generator(self, rng):
        beta, x = rng.normal(size=4), rng.normal(size=4)
        assert LinearModel(4).forward(beta, x)[0] == pytest.approx(beta @ x, rel=1e-15)

    def test_mlp_matches_naive_loop(self, rng):
        widths = (2, 5, 3, 1)
        m = MLPModel(widths)
        theta = rng.normal(size=m.dim)
        for _ in range(5):
            x = rng.normal(size=2)
            assert m.forward(theta, x) == pytest.approx(naive_mlp(theta, x, widths), rel=1e-12)

    def test_wrong_theta_length(self):
        with pytest.raises(InvalidArgument):
            LinearModel(3).forward(np.zeros(4), np.zeros(3))


class TestLoss:
    def test_perfect_fit(self, rng):
        m = MLPModel((1, 4, 1))
        theta = rng.normal(size=m.dim)
        X = rng.normal(size=(5, 1))
        assert m.loss(Dataset(X, m.forward(theta, X)), theta) == 0.0

    def test_zero_predictor_single_pair(self):
        assert LinearModel(2).loss(Dataset([[1.0, 2.0]], [[3.0]]), np.zeros(2)) == 9.0

    def test_mlp_loss_matches_naive(self, rng):
        widths = (1, 4, 4, 1)
        m = MLPModel(widths)
        theta = rng.normal(size=m.dim)
        X, Y = rng.normal(size=(6, 1)), rng.normal(size=(6, 1))
        naive = sum(float((naive_mlp(theta, x, widths) - y) @ (naive_mlp(theta, x, widths) - y)) for x, y in zip(X, Y))
        assert m.loss(Dataset(X, Y), theta) == pytest.approx(naive, rel=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        r = np.random.default_rng(seed)
        m = MLPModel((1, 3, 1))
        theta = r.normal(size=m.dim)
        X, Y = r.normal(size=(7, 1)), r.normal(size=(7, 1))
        p = r.permutation(7)
        assert m.loss(Dataset(X[p], Y[p]), theta) == pytest.approx(m.loss(Dataset(X, Y), theta), rel=1e-13)

    @given(st.integers(0, 2**32 - 1))
    def test_linear_loss_is_quadratic(self, seed):
        r = np.random.default_rng(seed)
        m = LinearModel(3)
        data = Dataset(r.normal(size=(5, 3)), r.normal(size=(5, 1)))
        theta, v = r.normal(size=3), r.normal(size=3)
        ts = np.array([-1.0, 0.0, 1.0])
        coef = np.polyfit(ts, [m.loss(data, theta + t * v) for t in ts], 2)
        pred = np.polyval(coef, 2.0)
        assert pred == pytest.approx(m.loss(data, theta + 2.0 * v), rel=1e-9, abs=1e-9)


class TestGrad:
    def test_hand_example(self):
        g = LinearModel(4).grad(Dataset([[1.0, 0, 0, 0]], [[1.0]]), np.zeros(4))
        assert np.array_equal(g, [-2.0, 0, 0, 0])

    def test_zero_at_realizable_minimum(self, rng):
        beta = rng.normal(size=3)
        X = rng.normal(size=(8, 3))
        g = LinearModel(3).grad(Dataset(X, X @ beta[:, None]), beta)
        assert np.max(np.abs(g)) < 1e-12

    @given(st.integers(0, 2**32 - 1))
    def test_linear_matches_fd(self, seed):
        r = np.random.default_rng(seed)
        m = LinearModel(4)
        data = Dataset(r.normal(size=(6, 4)), r.normal(size=(6, 1)))
        theta = r.normal(size=4)
        assert rel_err(m.grad(data, theta), fd_grad(lambda t: m.loss(data, t), theta)) < 1e-6

    @given(st.integers(0, 2**32 - 1))
    def test_mlp_matches_fd(self, seed):
        model, theta, data = smooth_mlp_point(np.random.default_rng(seed), (1, 6, 5, 1))
        num = fd_grad(lambda t: model.loss(data, t), theta)
        assert rel_err(model.grad(data, theta), num) < 1e-5

    def test_relu_kink_subgradient_is_zero(self):
        m = MLPModel((1, 1, 1))
        # hidden pre-activation is exactly 0 for x = 0 with zero bias
        theta = np.array([1.0, 0.0, 1.0, 0.0])
        g = m.grad(Dataset([[0.0]], [[1.0]]), theta)
        assert g[0] == 0.0 and g[1] == 0.0


class TestHvp:
    def test_zero_direction(self, rng):
        m = MLPModel((1, 3, 1))
        data = Dataset(rng.normal(size=(4, 1)), rng.normal(size=(4, 1)))
        assert np.all(m.hvp(data, rng.normal(size=m.dim), np.zeros(m.dim)) == 0.0)

    def test_linear_exact_and_theta_free(self, rng):
        m = LinearModel(3)
        X = rng.normal(size=(5, 3))
        data = Dataset(X, rng.normal(size=(5, 1)))
        v = rng.normal(size=3)
        h1 = m.hvp(data, rng.normal(size=3), v)
        h2 = m.hvp(data, rng.normal(size=3), v)
        assert np.array_equal(h1, h2)
        assert np.allclose(h1, 2 * X.T @ X @ v, rtol=1e-13)

    def test_mlp_matches_dense_hessian(self, rng):
        model, theta, data = smooth_mlp_point(rng, (1, 4, 3, 1))
        assert model.dim <= 50
        H = np.stack([fd_grad(lambda t: model.grad(data, t)[i], theta, 1e-5) for i in range(model.dim)])
        v = rng.normal(size=model.dim)
        assert rel_err(model.hvp(data, theta, v), H @ v) < 1e-3

    @given(st.integers(0, 2**32 - 1))
    def test_hvp_symmetry(self, seed):
        r = np.random.default_rng(seed)
        model, theta, data = smooth_mlp_point(r, (1, 4, 1))
        u, v = r.normal(size=model.dim), r.normal(size=model.dim)
        a, b = v @ model.hvp(data, theta, u), u @ model.hvp(data, theta, v)
        assert a == pytest.approx(b, rel=1e-5, abs=1e-6)


def test_glorot_init_bounds(rng):
    lay = LayerLayout.dense([1, 16, 16, 1])
    theta = glorot_init(lay, rng)
    for seg in lay.segments:
        part = theta[seg.offset:seg.offset + seg.length]
        if seg.role == "bias":
            assert np.all(part == 0)
        else:
            assert np.max(np.abs(part)) <= np.sqrt(6 / sum(seg.shape))


def test_make_model_kinds():
    assert make_model("linear", 16).dim == 16
    assert make_model("mlp").dim == 321
    with pytest.raises(InvalidArgument):
        make_model("cnn")


def test_dataset_validation():
    with pytest.raises(InvalidArgument):
        Dataset(np.zeros((3, 1)), np.zeros((2, 1)))
    with pytest.raises(InvalidArgument):
        Dataset(np.zeros((0, 1)), np.zeros((0, 1)))
