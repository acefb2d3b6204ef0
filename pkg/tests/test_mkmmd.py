import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gfca import autograd as ag
from gfca.datasets import SyntheticDomainConfig, synthesize_domain_pair
from gfca.errors import DegenerateDataError, ParameterError
from gfca.mkmmd import KernelBank, median_heuristic_bank, mmd_loss, mmd_sq_biased, mmd_sq_unbiased


def _k(x, y, s):
    return math.exp(-sum((xi - yi) ** 2 for xi, yi in zip(x, y)) / (2 * s * s))


def loop_mmd(a, b, bank, unbiased=False):
    n, m = len(a), len(b)
    total = 0.0
    for s, w in zip(bank.bandwidths, bank.weights):
        aa = sum(_k(a[i], a[j], s) for i in range(n) for j in range(n) if not (unbiased and i == j))
        bb = sum(_k(b[i], b[j], s) for i in range(m) for j in range(m) if not (unbiased and i == j))
        ab = sum(_k(a[i], b[j], s) for i in range(n) for j in range(m))
        if unbiased:
            total += w * (aa / (n * (n - 1)) + bb / (m * (m - 1)) - 2 * ab / (n * m))
        else:
            total += w * (aa / n ** 2 + bb / m ** 2 - 2 * ab / (n * m))
    return total


def test_small_single_kernel_oracles():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    bank = KernelBank.single(0.9)
    assert abs(mmd_sq_biased(a, b, bank) - loop_mmd(a, b, bank)) <= 1e-12
    a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    assert abs(mmd_sq_unbiased(a, b, bank) - loop_mmd(a, b, bank, True)) <= 1e-12


def test_median_heuristic_two_points():
    bank = median_heuristic_bank(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]), k=1)
    assert bank.bandwidths[0] == pytest.approx(math.sqrt(2))
    assert bank.weights[0] == 1.0


def test_median_heuristic_ratios_and_scaling():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(8, 3))
    bank = median_heuristic_bank(a, b, k=5, factor=2.0)
    sq = np.asarray(bank.bandwidths) ** 2
    np.testing.assert_allclose(sq / sq[2], [0.25, 0.5, 1, 2, 4], rtol=1e-12)
    np.testing.assert_allclose(bank.weights, 0.2)
    scaled = median_heuristic_bank(3 * a, 3 * b, k=5, factor=2.0)
    np.testing.assert_allclose(scaled.bandwidths, 3 * np.asarray(bank.bandwidths), rtol=1e-12)
    with pytest.raises(DegenerateDataError):
        median_heuristic_bank(np.ones((3, 2)), np.ones((2, 2)))


def test_kernel_bank_validation():
    with pytest.raises(ParameterError):
        KernelBank((1.0, -1.0), (0.5, 0.5))
    with pytest.raises(ParameterError):
        KernelBank((1.0,), (0.7,))


@given(st.integers(0, 10_000), st.integers(1, 9), st.integers(1, 9), st.integers(1, 4))
def test_biased_identity_symmetry_nonnegativity(seed, n, m, d):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)), rng.normal(size=(m, d)) + rng.normal()
    bank = KernelBank.uniform(rng.uniform(0.2, 3.0, size=3))
    assert mmd_sq_biased(a, a, bank) <= 1e-12
    assert mmd_sq_biased(a, b, bank) == mmd_sq_biased(b, a, bank)
    assert mmd_sq_biased(a, b, bank) >= -1e-12
    if n >= 2 and m >= 2:
        assert mmd_sq_unbiased(a, b, bank) == mmd_sq_unbiased(b, a, bank)


def test_unbiased_needs_two_rows_and_dims_match():
    bank = KernelBank.single(1.0)
    with pytest.raises(ParameterError):
        mmd_sq_unbiased(np.zeros((1, 2)), np.zeros((3, 2)), bank)
    with pytest.raises(ParameterError):
        mmd_sq_biased(np.zeros((2, 2)), np.zeros((3, 3)), bank)


def test_unbiased_monte_carlo_mean_near_zero():
    bank = KernelBank.uniform([0.5, 1.0, 2.0])
    vals = []
    for seed in range(200):
        rng = np.random.default_rng(seed)
        vals.append(mmd_sq_unbiased(rng.normal(size=(12, 2)), rng.normal(size=(10, 2)), bank))
    vals = np.asarray(vals)
    assert abs(vals.mean()) < 3 * vals.std(ddof=1) / math.sqrt(vals.size)


def test_mmd_grows_with_translation():
    out = []
    for shift in (0.0, 1.0, 5.0):
        pair = synthesize_domain_pair(SyntheticDomainConfig(
            class_count=3, feature_dim=4, rotation_deg=(0.0,), translation=shift,
            samples_per_class=30, seed=2))
        bank = KernelBank.uniform([0.5, 1.0, 2.0, 4.0])
        out.append(mmd_sq_biased(pair.source.features, pair.target.features, bank))
    assert out[0] < out[1] < out[2]


def test_traced_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(5, 3)) + 0.5
    bank = median_heuristic_bank(a, b)
    rep = ag.finite_difference_check(lambda p: mmd_loss(p["a"], b, bank), {"a": a})
    assert rep.passed and rep.worst <= 1e-4
    assert mmd_loss(a, b, bank).value.item() == pytest.approx(mmd_sq_biased(a, b, bank), abs=1e-14)
