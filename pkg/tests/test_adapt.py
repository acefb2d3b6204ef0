import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gfca import adapt
from gfca import autograd as ag
from gfca.errors import NumericError, ParameterError
from gfca.numerics import make_rng


def test_encoder_examples():
    x = np.abs(np.random.default_rng(0).normal(size=(4, 3))) + 0.1
    ident = adapt.EncoderParams([np.eye(3)], [np.zeros(3)], slope=0.7)
    np.testing.assert_array_equal(adapt.encoder_forward(ident, x), x)
    zero = adapt.EncoderParams([np.zeros((3, 5)), np.zeros((5, 2))], [np.zeros(5), np.zeros(2)])
    np.testing.assert_array_equal(adapt.encoder_forward(zero, x), 0)
    with pytest.raises(ParameterError):
        adapt.encoder_forward(ident, np.zeros((2, 4)))
    with pytest.raises(ParameterError):
        adapt.EncoderParams([np.zeros((3, 5)), np.zeros((4, 2))], [np.zeros(5), np.zeros(2)])


def test_encoder_step_by_step_oracle():
    rng = np.random.default_rng(1)
    e = adapt.init_encoder(4, rng, d_h=6, layers=2, slope=0.1)
    x = rng.normal(size=(5, 4))
    h = x
    for w, b in zip(e.weights, e.biases):
        pre = h @ w + b
        h = np.where(pre > 0, pre, 0.1 * pre)
    np.testing.assert_allclose(adapt.encoder_forward(e, x), h, rtol=1e-14)
    assert adapt.encoder_forward(e, x).shape == (5, 6)


def test_classify_examples():
    cl = adapt.ClassifierParams(np.zeros((4, 3)))
    np.testing.assert_allclose(adapt.classify(cl, np.ones((2, 3))), 0.25)
    cl = adapt.ClassifierParams(np.array([[1.0], [0.0]]))
    p = adapt.classify(cl, np.array([[50.0]]))
    assert p[0, 0] == pytest.approx(1.0, abs=1e-15) and p[0, 1] < 1e-20
    cl = adapt.ClassifierParams(np.array([[1.0], [2.0], [3.0]]))
    p = adapt.classify(cl, np.array([[1.0]]))[0]
    e = [math.exp(v) for v in (1, 2, 3)]
    np.testing.assert_allclose(p, [v / sum(e) for v in e], rtol=1e-14)


@given(st.integers(0, 5000), st.floats(1, 1e4))
def test_softmax_rows_and_stable_cross_entropy(seed, scale):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, 5)) * scale
    cl = adapt.ClassifierParams(np.eye(5))
    p = adapt.classify(cl, z)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)
    ce = adapt.cross_entropy_from_logits(z, rng.integers(0, 5, 4))
    assert math.isfinite(ce) and ce >= 0


def test_cross_entropy_examples():
    assert adapt.cross_entropy(np.eye(3), [0, 1, 2]) == 0.0
    assert adapt.cross_entropy(np.full((2, 4), 0.25), [1, 3]) == pytest.approx(math.log(4))
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert adapt.cross_entropy(p, [1, 1]) == pytest.approx(-(math.log(0.8) + math.log(0.4)) / 2)
    z = np.array([[0.3, -1.2], [2.0, 0.5]])
    hand = -np.mean([z[0, 1] - np.log(np.exp(z[0]).sum()), z[1, 0] - np.log(np.exp(z[1]).sum())])
    assert adapt.cross_entropy_from_logits(z, [1, 0]) == pytest.approx(hand, rel=1e-14)


def test_fc_alpha_examples():
    cl = adapt.ClassifierParams(np.array([[1.0, 0], [0, 1], [3, 0]]))
    assert adapt.fc_alpha(cl, [0, 1]) == 1.0
    cl = adapt.ClassifierParams(np.array([[1.0, 0], [1, np.sqrt(2)], [5, 5]]))
    assert adapt.fc_alpha(cl, [0, 1]) == pytest.approx(2.0)
    scaled = adapt.ClassifierParams(3 * cl.W_c)
    assert adapt.fc_alpha(scaled, [0, 1]) == pytest.approx(9 * adapt.fc_alpha(cl, [0, 1]))
    with pytest.raises(ParameterError):
        adapt.fc_alpha(cl, [])
    before = adapt.fc_alpha(cl, [0, 1])
    cl.W_c[2] *= 7
    assert adapt.fc_alpha(cl, [0, 1]) == before


def test_fc_loss_examples():
    cl = adapt.ClassifierParams(np.array([[2.0, 0], [1, 0], [0, 1]]))
    assert adapt.fc_loss(cl, [0], 1.0) == pytest.approx(9.0)
    a = adapt.fc_alpha(cl, [1, 2])
    assert adapt.fc_loss(adapt.ClassifierParams(np.array([[1.0, 0], [1, 0], [0, 1]])), [0], a) == 0.0
    w = np.random.default_rng(0).normal(size=(5, 3))
    perm = w[[0, 1, 4, 3, 2]]
    assert adapt.fc_loss(adapt.ClassifierParams(w), [2, 4], 1.3) == pytest.approx(
        adapt.fc_loss(adapt.ClassifierParams(perm), [2, 4], 1.3), rel=1e-14)
    with pytest.raises(ParameterError):
        adapt.fc_loss(cl, [], 1.0)


def test_fc_zero_iff_mean_norm_equals_alpha():
    w = np.random.default_rng(1).normal(size=(4, 3))
    alpha = float((w[[2, 3]] ** 2).sum(axis=1).mean())
    assert adapt.fc_loss(adapt.ClassifierParams(w), [2, 3], alpha) < 1e-28
    w[2] *= 1.01
    assert adapt.fc_loss(adapt.ClassifierParams(w), [2, 3], alpha) > 0


def test_alpha_receives_no_gradient():
    w = np.random.default_rng(2).normal(size=(4, 3))
    alpha = adapt.fc_alpha(adapt.ClassifierParams(w), [0, 1])
    _, g = ag.grad(lambda p: adapt.fc_term(p["W_c"], [2, 3], alpha), {"W_c": w})
    np.testing.assert_array_equal(g["W_c"][[0, 1]], 0)


def test_total_loss_examples():
    assert adapt.total_loss_ec(1.5, 0.3, 0.2, 0.0, 0.0) == 1.5
    assert adapt.total_loss_ec(1.0, 0.2, 0.01) == pytest.approx(1.21, abs=1e-15)
    assert adapt.total_loss_ec(2.0, 0.2, 0.01) - adapt.total_loss_ec(1.0, 0.2, 0.01) == pytest.approx(1.0)
    with pytest.raises(NumericError, match="L_e"):
        adapt.total_loss_ec(1.0, float("nan"), 0.0)
    with pytest.raises(NumericError, match="L_fc"):
        adapt.total_loss_ec(1.0, 0.0, float("inf"))


def test_classifier_encoder_gradients():
    for seed in range(5):
        rng = make_rng(seed)
        e = adapt.init_encoder(4, rng, d_h=5, layers=2)
        W_c = rng.normal(size=(3, 5))
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)

        def loss(p):
            h = adapt.encode([p["W0"], p["W1"]], [e.biases[0], e.biases[1]], x, 0.2)
            return ag.softmax_cross_entropy(adapt.logits(p["W_c"], None, h), y)
        rep = ag.finite_difference_check(loss, {"W0": e.weights[0], "W1": e.weights[1], "W_c": W_c})
        assert rep.passed
