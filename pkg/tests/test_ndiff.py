import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drvae import ndiff
from drvae.errors import ContractError, DimensionError, DomainError
from drvae.ndiff import Adam, AdamState, DenseLayer, Value, adam_step

from gradcheck import check_gradients, numeric_grad


def layer(w, b):
    return DenseLayer(Value(np.array(w, dtype=float)), Value(np.array(b, dtype=float).reshape(1, -1)))


class TestDense:
    def test_identity(self):
        out = ndiff.dense_forward(layer([[1, 0], [0, 1]], [0, 0]), Value([[3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0]])

    def test_hand_product(self):
        out = ndiff.dense_forward(layer([[2], [1]], [1]), Value([[1.0, 1.0]]))
        np.testing.assert_array_equal(out.data, [[4.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
            ndiff.dense_forward(layer([[1, 0], [0, 1]], [0, 0]), Value([[1.0, 2.0, 3.0]]))

    def test_weight_grad_equals_input_on_identity_input(self):
        lay = layer([[0.3, -0.2], [0.5, 0.1]], [0.0, 0.0])
        x = Value(np.eye(2))
        ndiff.backward(ndiff.dense_forward(lay, x).sum())
        # d sum(XW)/dW_ij = sum_r X_ri = 1 for the identity
        np.testing.assert_array_equal(lay.weights.grad, np.ones((2, 2)))
        np.testing.assert_array_equal(lay.bias.grad, [[2.0, 2.0]])

    def test_glorot_init_bounds(self):
        rng = np.random.default_rng(0)
        lay = DenseLayer.init(6, 10, rng)
        limit = math.sqrt(6 / 16)
        assert np.all(np.abs(lay.weights.data) <= limit)
        assert np.all(lay.bias.data == 0)


class TestActivations:
    @pytest.mark.parametrize("x, expected", [(0.0, 0.0), (2.0, 2.0), (-1.0, math.exp(-1) - 1)])
    def test_elu_values(self, x, expected):
        assert ndiff.elu(Value([[x]]), 1.0).item() == pytest.approx(expected, abs=1e-15)

    def test_elu_derivative_at_zero_is_one(self):
        x = Value([[0.0]])
        ndiff.backward(ndiff.elu(x, 1.0))
        assert x.grad[0, 0] == 1.0

    def test_elu_alpha_must_be_positive(self):
        with pytest.raises(DomainError):
            ndiff.elu(Value([[1.0]]), 0.0)

    def test_logistic_values(self):
        assert ndiff.logistic(Value([[0.0]])).item() == 0.5
        assert ndiff.logistic(Value([[math.log(3.0)]])).item() == pytest.approx(0.75, abs=1e-15)
        with np.errstate(over="raise", invalid="raise"):
            assert ndiff.logistic(Value([[1000.0]])).item() == 1.0
            assert ndiff.logistic(Value([[-1000.0]])).item() == 0.0

    @given(arrays(np.float64, (5,), elements=st.floats(-30, 30)))
    def test_logistic_strictly_inside_unit_interval(self, xs):
        out = ndiff.logistic(Value(xs)).data
        assert np.all((out > 0) & (out < 1))


class TestLikelihoods:
    def test_gaussian_standard_at_zero(self):
        out = ndiff.gaussian_log_prob(np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 1)))
        assert out.item() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)

    @pytest.mark.parametrize("v", [0.1, 1.0, 7.5])
    def test_gaussian_at_mean(self, v):
        out = ndiff.gaussian_log_prob([[1.3]], [[1.3]], [[v]])
        assert out.item() == pytest.approx(-0.5 * math.log(2 * math.pi * v), abs=1e-14)

    def test_gaussian_rejects_zero_variance(self):
        with pytest.raises(DomainError):
            ndiff.gaussian_log_prob([[0.0]], [[0.0]], [[0.0]])

    def test_gaussian_sums_over_dimensions(self):
        out = ndiff.gaussian_log_prob(np.zeros((2, 3)), np.zeros((2, 3)), np.ones((2, 3)))
        assert out.shape == (2, 1)
        np.testing.assert_allclose(out.data, -1.5 * math.log(2 * math.pi))

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 10))
    def test_gaussian_maximised_at_mean(self, x, mu, v):
        at_mean = ndiff.gaussian_log_prob([[mu]], [[mu]], [[v]]).item()
        assert ndiff.gaussian_log_prob([[x]], [[mu]], [[v]]).item() <= at_mean

    def test_bernoulli_values(self):
        eps = ndiff.BERNOULLI_EPS
        assert ndiff.bernoulli_log_prob([[1.0]], [[1 - eps]]).item() == pytest.approx(0.0, abs=1e-6)
        assert ndiff.bernoulli_log_prob([[1.0]], [[0.5]]).item() == pytest.approx(math.log(0.5))
        assert ndiff.bernoulli_log_prob([[0.0]], [[0.25]]).item() == pytest.approx(math.log(0.75))

    def test_bernoulli_clamps_probability(self):
        out = ndiff.bernoulli_log_prob([[1.0]], [[0.0]]).item()
        assert out == pytest.approx(math.log(ndiff.BERNOULLI_EPS))

    def test_bernoulli_rejects_non_binary(self):
        with pytest.raises(DomainError):
            ndiff.bernoulli_log_prob([[0.5]], [[0.5]])

    @pytest.mark.parametrize(
        "m, v, expected",
        [(0.0, 1.0, 0.0), (1.0, 1.0, 0.5), (0.0, 4.0, 0.5 * (4 - math.log(4) - 1))],
    )
    def test_kl_values(self, m, v, expected):
        assert ndiff.kl_std_normal([[m]], [[v]]).item() == pytest.approx(expected, abs=1e-15)

    def test_kl_rejects_nonpositive_variance(self):
        with pytest.raises(DomainError):
            ndiff.kl_std_normal([[0.0]], [[-1.0]])

    @given(st.floats(-10, 10), st.floats(1e-3, 50))
    def test_kl_nonnegative_and_zero_only_at_prior(self, m, v):
        kl = ndiff.kl_std_normal([[m]], [[v]]).item()
        assert kl >= 0
        if kl == 0:
            assert abs(m) < 1e-7 and abs(v - 1) < 1e-3


class TestReparam:
    def test_zero_noise_returns_mean(self):
        out = ndiff.reparam_sample(Value([[1.5, -2.0]]), Value([[3.0, 0.2]]), np.zeros((1, 2)))
        np.testing.assert_array_equal(out.data, [[1.5, -2.0]])

    def test_hand_value(self):
        assert ndiff.reparam_sample(Value([[0.0]]), Value([[4.0]]), [[1.5]]).item() == 3.0

    def test_mean_gradient_is_one(self):
        mean, var = Value(np.zeros((2, 3))), Value(np.ones((2, 3)))
        ndiff.backward(ndiff.reparam_sample(mean, var, np.full((2, 3), 0.7)).sum())
        np.testing.assert_array_equal(mean.grad, np.ones((2, 3)))

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(DomainError):
            ndiff.reparam_sample(Value([[0.0]]), Value([[0.0]]), [[1.0]])


class TestBackward:
    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            ndiff.backward(Value(np.ones((2, 2))))

    def test_constant_loss_gives_zero_grads(self):
        lay = layer([[1.0]], [0.0])
        _ = ndiff.dense_forward(lay, Value([[2.0]]))
        ndiff.backward(Value([[3.0]]))
        assert not lay.weights.grad.any()

    def test_grad_shape_matches_data_after_zero(self):
        v = Value(np.ones((3, 4)))
        v.zero_grad()
        assert v.grad.shape == v.data.shape and not v.grad.any()

    def test_elu_dense_composite_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        lay = DenseLayer.init(3, 4, rng)
        x = Value(rng.normal(size=(5, 3)))
        err = check_gradients(lambda: ndiff.elu(ndiff.dense_forward(lay, x)).sum(),
                              [lay.weights, lay.bias, x])
        assert err < 1e-4

    def test_shared_subexpression_accumulates(self):
        x = Value([[2.0]])
        y = x * x + x
        ndiff.backward(y)
        assert x.grad[0, 0] == pytest.approx(5.0)

    def test_no_grad_records_nothing(self):
        x = Value([[1.0]])
        with ndiff.no_grad():
            y = ndiff.elu(x * 2.0)
        ndiff.backward(y.sum())
        assert x.grad[0, 0] == 0.0


def _random_net(rng, sizes):
    return [DenseLayer.init(a, b, rng) for a, b in zip(sizes, sizes[1:])]


def _forward(layers, x):
    h = x
    for i, lay in enumerate(layers):
        h = ndiff.dense_forward(lay, h)
        if i < len(layers) - 1:
            h = ndiff.elu(h)
    return h


PRIMITIVE_LOSSES = {
    "gaussian": lambda out, tgt: ndiff.gaussian_log_prob(
        tgt, ndiff.columns(out, 0, 1), ndiff.positive(ndiff.columns(out, 1, 2))).mean(),
    "bernoulli": lambda out, tgt: ndiff.bernoulli_log_prob(
        (tgt > 0).astype(float), ndiff.logistic(ndiff.columns(out, 0, 1))).mean(),
    "kl": lambda out, tgt: ndiff.kl_std_normal(
        ndiff.columns(out, 0, 1), ndiff.positive(ndiff.columns(out, 1, 2))).mean(),
    "reparam": lambda out, tgt: ndiff.square(ndiff.reparam_sample(
        ndiff.columns(out, 0, 1), ndiff.positive(ndiff.columns(out, 1, 2)), tgt)).mean(),
    "logistic": lambda out, tgt: ndiff.logistic(out).sum(),
    "softplus": lambda out, tgt: ndiff.softplus(out).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_LOSSES))
def test_random_networks_match_finite_differences(name):
    """Networks of <= 3 layers and <= 8 units, 100 random draws per primitive."""
    loss_fn = PRIMITIVE_LOSSES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 9)) for _ in range(depth)] + [2]
        layers = _random_net(rng, sizes)
        x = Value(rng.normal(size=(3, sizes[0])))
        tgt = rng.normal(size=(3, 1))
        leaves = [p for lay in layers for p in lay.parameters()]
        worst = max(worst, check_gradients(lambda: loss_fn(_forward(layers, x), tgt), leaves))
    assert worst < 1e-4


class TestAdam:
    def test_zero_grad_zero_decay_leaves_params(self):
        p = np.array([[1.0, -2.0]])
        state = AdamState.for_params([Value(p)], weight_decay=0.0)
        adam_step(state, [p], [np.zeros_like(p)])
        np.testing.assert_array_equal(p, [[1.0, -2.0]])

    def test_first_step_moves_by_learning_rate(self):
        p = np.array([[0.0]])
        state = AdamState.for_params([Value(p)], learning_rate=0.1, weight_decay=0.0)
        adam_step(state, [p], [np.ones_like(p)])
        # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert p[0, 0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)
        assert state.step_count == 1

    def test_weight_decay_is_added_to_gradient(self):
        p = np.array([[2.0]])
        q = np.array([[2.0]])
        s1 = AdamState.for_params([Value(p)], learning_rate=0.1, weight_decay=0.5)
        s2 = AdamState.for_params([Value(q)], learning_rate=0.1, weight_decay=0.0)
        adam_step(s1, [p], [np.array([[0.3]])])
        adam_step(s2, [q], [np.array([[0.3 + 0.5 * 2.0]])])
        assert p[0, 0] == q[0, 0]

    def test_shape_mismatch(self):
        p = np.zeros((1, 2))
        state = AdamState.for_params([Value(p)])
        with pytest.raises(ContractError):
            adam_step(state, [p], [np.zeros((2, 1))])

    def test_second_moment_nonnegative_and_steps_count(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=(3, 3))
        state = AdamState.for_params([Value(p)])
        for i in range(5):
            adam_step(state, [p], [rng.normal(size=(3, 3))])
            assert state.step_count == i + 1
            assert np.all(state.second_moment[0] >= 0)

    def test_determinism(self):
        def run(seed):
            rng = np.random.default_rng(seed)
            layers = _random_net(rng, [4, 8, 8, 1])
            params = [p for lay in layers for p in lay.parameters()]
            opt = Adam(params)
            for _ in range(20):
                x = Value(rng.normal(size=(16, 4)))
                opt.zero_grad()
                ndiff.backward(ndiff.square(_forward(layers, x)).mean())
                opt.step()
                assert all(np.isfinite(p.data).all() for p in params)
            return [p.data.copy() for p in params]

        a, b = run(3), run(3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_descends_quadratic(self):
        w = Value(np.array([[3.0, -4.0]]))
        opt = Adam([w], lr=0.1, weight_decay=0.0)
        for _ in range(300):
            opt.zero_grad()
            ndiff.backward(ndiff.square(w).sum())
            opt.step()
        assert np.abs(w.data).max() < 0.05


def test_numeric_grad_oracle_on_known_function():
    a = np.array([[1.0, 2.0]])
    g = numeric_grad(lambda: float(np.sum(a**3)), a)
    np.testing.assert_allclose(g, 3 * np.array([[1.0, 4.0]]), rtol=1e-8)
