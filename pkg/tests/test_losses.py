import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eyeopen.errors import ConfigError, DataError
from eyeopen.losses import LossWeights, combined_loss, loss1_mse, loss2_binary, loss3_distribution
from eyeopen.tensor import finite_diff_grad, relative_error


def col(*v):
    return np.array(v, dtype=np.float64).reshape(-1, 1)


class TestLoss1:
    def test_exact_prediction_is_zero(self):
        assert loss1_mse(col(10), col(10))[0].value == 0.0

    def test_hand_value(self):
        assert abs(loss1_mse(col(10, 20), col(0, 10))[0].value - 100.0) < 1e-6

    def test_hand_gradient(self):
        _, g = loss1_mse(col(10), col(0))
        assert g.shape == (1, 1) and abs(g[0, 0] - 20.0) < 1e-12

    def test_empty_is_inactive(self):
        term, g = loss1_mse(np.zeros((0, 1)), np.zeros(0))
        assert term.value == 0.0 and not term.active and g.shape == (0, 1)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            loss1_mse(col(1, 2), col(1))


class TestLoss2:
    def test_both_terms_vanish(self):
        assert loss2_binary(col(0, 20), np.array([0, 1]), 15)[0].value == 0.0

    def test_closed_is_squared(self):
        assert abs(loss2_binary(col(5), np.array([0]))[0].value - 25.0) < 1e-6

    def test_open_hinge_value_and_gradient(self):
        term, g = loss2_binary(col(5), np.array([1]), 15)
        assert abs(term.value - 10.0) < 1e-6 and g[0, 0] == -1.0

    def test_open_above_threshold_has_no_gradient(self):
        _, g = loss2_binary(col(40), np.array([1]), 15)
        assert g[0, 0] == 0.0

    def test_rejects_non_binary_labels(self):
        with pytest.raises(DataError):
            loss2_binary(col(5), np.array([0.5]))

    def test_gradient_matches_finite_differences_off_hinge(self):
        rng = np.random.default_rng(2)
        o = col(*rng.uniform(-10, 40, size=12))
        o[np.abs(o - 15) < 0.1] += 0.5
        lab = rng.integers(0, 2, size=12)
        _, g = loss2_binary(o, lab, 15)
        fd = finite_diff_grad(lambda v: loss2_binary(v, lab, 15)[0].value, o)
        assert relative_error(g, fd) <= 1e-4


class TestLoss3:
    def test_identical_batches(self):
        a = np.random.default_rng(0).normal(size=(4, 6))
        assert loss3_distribution(a, a.copy())[0].value == 0.0

    def test_hand_value(self):
        assert abs(loss3_distribution(np.array([[1.0, 3.0]]), np.array([[2.0, 2.0]]))[0].value - 1.0) < 1e-6

    def test_inactive_when_a_domain_is_missing(self):
        term, gs, gr = loss3_distribution(np.ones((3, 4)), np.zeros((0, 4)))
        assert not term.active and not gs.any() and gr.shape == (0, 4)

    def test_width_mismatch(self):
        with pytest.raises(DataError):
            loss3_distribution(np.ones((2, 3)), np.ones((2, 4)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        s = rng.normal(1.0, 2.0, size=(5, 4))
        r = rng.normal(0.0, 1.0, size=(3, 4))
        _, gs, gr = loss3_distribution(s, r)
        assert relative_error(gs, finite_diff_grad(lambda v: loss3_distribution(v, r)[0].value, s)) <= 1e-4
        assert relative_error(gr, finite_diff_grad(lambda v: loss3_distribution(s, v)[0].value, r)) <= 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)),
       arrays(np.float64, (2, 4), elements=st.floats(-50, 50)))
def test_loss3_is_symmetric_and_non_negative(a, b):
    ab = loss3_distribution(a, b)[0].value
    assert ab >= 0.0
    assert abs(ab - loss3_distribution(b, a)[0].value) <= 1e-9 * max(1.0, ab)


class TestCombined:
    def test_perfect_everything_is_zero(self):
        f = np.random.default_rng(1).normal(size=(2, 4))
        out = combined_loss(f, col(10, 50), col(10, 50), f.copy(), col(0, 30), np.array([0, 1]))
        assert out.total == 0.0

    def test_default_lambda1_scales_loss1(self):
        out = combined_loss(np.ones((1, 4)), col(10), col(0), np.zeros((0, 4)), np.zeros((0, 1)), np.zeros(0))
        assert abs(out.total - 1.0) < 1e-9 and not out.loss3.active

    def test_doubling_lambda2_doubles_its_contribution(self):
        o1s, o1r = np.ones((1, 4)), np.ones((2, 4))
        args = (o1s, col(10), col(10), o1r, col(5, 3), np.array([0, 1]))
        a = combined_loss(*args, w=LossWeights(lambda2=1.0))
        b = combined_loss(*args, w=LossWeights(lambda2=2.0))
        assert abs((b.total - a.total) - a.loss2.value) < 1e-9
        assert np.allclose(b.d_o2_r, 2 * a.d_o2_r)

    def test_empty_batch_is_an_error(self):
        with pytest.raises(DataError):
            combined_loss(np.zeros((0, 4)), np.zeros((0, 1)), np.zeros(0),
                          np.zeros((0, 4)), np.zeros((0, 1)), np.zeros(0))

    def test_invalid_weights(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda1=-1)
        with pytest.raises(ConfigError):
            LossWeights(ot=0)
