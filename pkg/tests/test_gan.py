import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gfca import autograd as ag
from gfca import gan
from gfca.datasets import DomainDataset, one_hot, one_hot_matrix
from gfca.errors import DegenerateSampleError, MissingClassError, ParameterError
from gfca.numerics import class_centroids, make_rng, pca_fit


def _source(seed=0, c=3, d=5, n_per=8):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(c), n_per)
    return DomainDataset(rng.normal(size=(y.size, d)) + 2 * y[:, None], y, c)


def test_init_generator_composition():
    src = _source()
    g = gan.init_generator(src, 3)
    cent = class_centroids(src.features, src.labels, 3)
    for k in range(3):
        np.testing.assert_array_equal(g.W_y @ one_hot(k, 3), cent[:, k])
    pc = pca_fit(src.features, 3)
    np.testing.assert_array_equal(g.W_z, pc.components)
    np.testing.assert_allclose(np.linalg.norm(g.W_z, axis=0), pc.eigenvalues, atol=1e-8)
    with pytest.raises(ValueError):
        g.W_y_init[0, 0] = 1.0
    assert gan.wy_anchor_penalty(g, [0, 1]) == 0.0


def test_init_generator_errors():
    src = _source()
    with pytest.raises(ParameterError):
        gan.init_generator(src, 6)
    gap = DomainDataset(src.features[:16], src.labels[:16], 3)
    with pytest.raises(MissingClassError):
        gan.init_generator(gap, 2)


def test_zero_noise_gives_normalized_centroid():
    src = _source()
    g = gan.init_generator(src, 2)
    k = 2
    assert np.all(g.W_y[:, k] > 0)
    out = gan.generator_forward(g, np.zeros(2), one_hot(k, 3), 1.7)
    np.testing.assert_allclose(out, 1.7 * g.W_y[:, k] / np.linalg.norm(g.W_y[:, k]), rtol=1e-13)


@given(st.integers(0, 5000), st.floats(0.1, 10))
def test_generator_output_norm_and_oracle(seed, beta):
    rng = np.random.default_rng(seed)
    g = gan.GeneratorParams(rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), np.zeros((4, 3)), 0.2)
    z = rng.uniform(-1, 1, size=(6, 2))
    y = rng.integers(0, 3, size=6)
    out = gan.generator_forward(g, z, one_hot_matrix(y, 3), beta)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), beta, rtol=1e-10)
    pre = z @ g.W_z.T + g.W_y[:, y].T
    act = np.where(pre > 0, pre, 0.2 * pre)
    np.testing.assert_allclose(out, beta * act / np.linalg.norm(act, axis=1, keepdims=True), rtol=1e-12)


def test_one_hot_conditioning_shifts_preactivation():
    rng = np.random.default_rng(1)
    W_z, W_y = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    z = rng.uniform(-1, 1, size=2)
    diff = (W_z @ z + W_y @ one_hot(2, 3)) - (W_z @ z + W_y @ one_hot(0, 3))
    np.testing.assert_allclose(diff, W_y[:, 2] - W_y[:, 0], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(W_y @ one_hot(2, 3), W_y[:, 2])


def test_degenerate_sample():
    g = gan.GeneratorParams(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(DegenerateSampleError):
        gan.generator_forward(g, np.zeros(2), one_hot(0, 2), 1.0)
    with pytest.raises(DegenerateSampleError):
        gan.sample_fake_batch(g, make_rng(0), 1.0, 4)


def test_discriminator_examples():
    d = gan.DiscriminatorParams(np.zeros(3), np.asarray(0.0))
    assert gan.discriminator_forward(d, np.array([5.0, -1, 2])) == 0.5
    d = gan.DiscriminatorParams(np.array([1.0, 0, 0]), np.asarray(0.0))
    vals = [gan.discriminator_forward(d, np.array([t, 0, 0])) for t in (0, 5, 20, 40)]
    assert vals == sorted(vals) and vals[-1] > 1 - 1e-12
    rng = np.random.default_rng(2)
    d = gan.DiscriminatorParams(rng.normal(size=3), np.asarray(0.3))
    x = rng.normal(size=3)
    assert gan.discriminator_forward(d, x) == pytest.approx(1 / (1 + np.exp(-(d.W_d @ x + 0.3))), rel=1e-14)
    with pytest.raises(ParameterError):
        gan.discriminator_forward(d, np.zeros(4))


def test_gan_loss_examples():
    assert gan.loss_g([0.5, 0.5]) == -0.5
    assert gan.loss_g([1.0, 1.0]) == -1.0
    assert gan.loss_g([0.2, 0.6]) == pytest.approx(-0.4, abs=1e-15)
    assert gan.loss_d([1.0, 1.0], [0.0]) == -2.0
    assert gan.loss_d([0.5], [0.5, 0.5]) == -1.0
    with pytest.raises(ParameterError):
        gan.loss_g([])
    with pytest.raises(ParameterError):
        gan.loss_d([0.5], [])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_loss_identities(r, f):
    ld = gan.loss_d(r, f)
    assert ld == pytest.approx(-np.mean(r) + np.mean(f) - 1, abs=1e-12)
    assert ld + gan.loss_g(f) == pytest.approx(-np.mean(r) - 1, abs=1e-12)
    adopted = gan.discriminator_loss(np.asarray(r), np.asarray(f)).value.item()
    assert adopted == pytest.approx(ld, abs=1e-12)


def test_printed_discriminator_loss_matches_adopted():
    rng = np.random.default_rng(11)
    xr, xf = rng.normal(size=(6, 4)), rng.normal(size=(5, 4))
    params = {"W_d": rng.normal(size=4), "b_d": np.asarray(0.3)}

    def make(as_printed):
        def loss(p):
            sr = ag.sigmoid(gan.discriminator_logits(p["W_d"], p["b_d"], xr))
            sf = ag.sigmoid(gan.discriminator_logits(p["W_d"], p["b_d"], xf))
            return gan.discriminator_loss(sr, sf, as_printed=as_printed)
        return loss

    v0, g0 = ag.grad(make(False), params)
    v1, g1 = ag.grad(make(True), params)
    assert v0 == pytest.approx(v1, abs=1e-15)
    for k in params:
        np.testing.assert_allclose(g0[k], g1[k], atol=1e-15)


def test_anchor_penalty_examples():
    src = _source()
    g = gan.init_generator(src, 2)
    g.W_y[:, 1] += np.eye(5)[0]
    assert gan.wy_anchor_penalty(g, [0, 1]) == pytest.approx(1.0)
    assert gan.wy_anchor_penalty(g, [0, 2]) == 0.0
    rng = np.random.default_rng(3)
    g.W_y[:] = g.W_y_init + rng.normal(size=g.W_y.shape)
    oracle = sum(((g.W_y[:, k] - g.W_y_init[:, k]) ** 2).sum() for k in (0, 2))
    assert gan.wy_anchor_penalty(g, [0, 2]) == pytest.approx(oracle, rel=1e-14)
    with pytest.raises(ParameterError):
        gan.wy_anchor_penalty(g, [])


def test_fake_batch_policies_and_determinism():
    g = gan.init_generator(_source(), 3)
    fb = gan.sample_fake_batch(g, make_rng(0), 2.0, 5, label_policy=1)
    assert list(fb.labels) == [1] * 5
    fb = gan.sample_fake_batch(g, make_rng(0), 2.0, 3, label_policy="balanced")
    assert sorted(fb.labels) == [0, 1, 2]
    a = gan.sample_fake_batch(g, make_rng(9), 2.0, 16)
    b = gan.sample_fake_batch(g, make_rng(9), 2.0, 16)
    assert a.features.tobytes() == b.features.tobytes()
    np.testing.assert_allclose(np.linalg.norm(a.features, axis=1), 2.0, rtol=1e-10)
    assert np.all(np.abs(a.noise) <= 1)


def test_generator_and_discriminator_gradients():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        W_z, W_y = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
        z = rng.uniform(-1, 1, size=(6, 2))
        oh = one_hot_matrix(rng.integers(0, 3, 6), 3)
        W_d = rng.normal(size=4)

        def lg(p):
            xf = gan.generate(p["W_z"], p["W_y"], z, oh, 1.5, 0.2)
            return gan.generator_loss(ag.sigmoid(gan.discriminator_logits(W_d, 0.1, xf)))
        assert ag.finite_difference_check(lg, {"W_z": W_z, "W_y": W_y}).passed
