"""Multi-kernel maximum mean discrepancy between two samples.

Kernels are Gaussian, ``k(x, y) = exp(-|x - y|^2 / (2 sigma^2))``, mixed with
nonnegative weights.  The biased (V-statistic) estimator is the training
loss and has a traced version, :func:`mmd_loss`; the unbiased U-statistic is
provided for analysis.

Both estimators are exactly symmetric in their two arguments: the cross
block is evaluated in an order-independent way.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Var, const, node
from .errors import DegenerateDataError, ParameterError


@dataclass(frozen=True)
class KernelBank:
    bandwidths: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        bw = np.asarray(self.bandwidths, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if bw.ndim != 1 or bw.size == 0 or bw.shape != w.shape:
            raise ParameterError("bank needs k >= 1 bandwidths and one weight per bandwidth")
        if np.any(bw <= 0) or not np.all(np.isfinite(bw)):
            raise ParameterError("bandwidths must be positive and finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "bandwidths", tuple(float(x) for x in bw))
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    @classmethod
    def single(cls, sigma: float) -> KernelBank:
        return cls((sigma,), (1.0,))

    @classmethod
    def uniform(cls, bandwidths) -> KernelBank:
        bandwidths = tuple(bandwidths)
        return cls(bandwidths, (1.0 / len(bandwidths),) * len(bandwidths))


def _check_pair(a, b, min_rows=1):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ParameterError("samples must be 2-D matrices")
    if a.shape[1] != b.shape[1]:
        raise ParameterError(f"column mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < min_rows or b.shape[0] < min_rows:
        raise ParameterError(f"each sample needs at least {min_rows} rows")
    return a, b


def median_heuristic_bank(a, b, k: int = 5, factor: float = 2.0) -> KernelBank:
    """Bandwidth bank centred on the median pooled squared distance.

    The centre squared bandwidth is the median of nonzero squared pairwise
    distances over the pooled rows; the bank spans ``factor**i`` times that
    for ``i`` in ``-(k // 2) .. k - 1 - k // 2``.  Weights are uniform.
    """
    a, b = _check_pair(a, b, min_rows=0)
    pooled = np.vstack([a, b])
    if pooled.shape[0] < 2:
        raise ParameterError("median heuristic needs at least 2 pooled rows")
    if k < 1:
        raise ParameterError("k must be >= 1")
    if k > 1 and factor <= 1.0:
        raise ParameterError("factor must exceed 1")
    iu = np.triu_indices(pooled.shape[0], k=1)
    diff = pooled[iu[0]] - pooled[iu[1]]
    sq = np.einsum("ij,ij->i", diff, diff)
    sq = sq[sq > 0]
    if sq.size == 0:
        raise DegenerateDataError("all pooled rows are identical; median distance is zero")
    center = float(np.median(sq))
    lo = -(k // 2)
    sig2 = [center * factor**i for i in range(lo, lo + k)]
    return KernelBank.uniform(np.sqrt(sig2))


def _sqdist_self(x):
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _sqdist_cross(x, y):
    # averaging both product orders makes D(y, x) == D(x, y).T bit for bit
    gram = 0.5 * (x @ y.T + (y @ x.T).T)
    d = (x * x).sum(axis=1)[:, None] + (y * y).sum(axis=1)[None, :] - 2.0 * gram
    return np.maximum(d, 0.0)


def _sym_sum(m):
    return 0.5 * (np.sum(m) + np.sum(np.ascontiguousarray(m.T)))


def _kernels(d, bank):
    """Weighted kernel matrix and its 1/sigma^2-weighted counterpart."""
    k = np.zeros_like(d)
    p = np.zeros_like(d)
    for sigma, w in zip(bank.bandwidths, bank.weights):
        kj = np.exp(-d / (2.0 * sigma * sigma))
        k += w * kj
        p += (w / (sigma * sigma)) * kj
    return k, p


def mmd_loss(a, b, bank: KernelBank) -> Var:
    """Traced biased MMD^2; gradients flow to whichever inputs are traced."""
    a, b = const(a), const(b)
    av, bv = _check_pair(a.value, b.value)
    n, m = av.shape[0], bv.shape[0]
    kaa, paa = _kernels(_sqdist_self(av), bank)
    kbb, pbb = _kernels(_sqdist_self(bv), bank)
    kab, pab = _kernels(_sqdist_cross(av, bv), bank)
    value = kaa.sum() / n**2 + kbb.sum() / m**2 - 2.0 * _sym_sum(kab) / (n * m)

    def vjp(g):
        g = float(g)
        ga = (2.0 / n**2) * (paa @ av - paa.sum(axis=1)[:, None] * av) \
            - (2.0 / (n * m)) * (pab @ bv - pab.sum(axis=1)[:, None] * av)
        gb = (2.0 / m**2) * (pbb @ bv - pbb.sum(axis=1)[:, None] * bv) \
            - (2.0 / (n * m)) * (pab.T @ av - pab.sum(axis=0)[:, None] * bv)
        return g * ga, g * gb

    return node(value, (a, b), vjp, "mmd_biased")


def mmd_sq_biased(a, b, bank: KernelBank) -> float:
    """V-statistic estimate of MMD^2 (diagonal terms included, never negative)."""
    return float(mmd_loss(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), bank).value)


def mmd_sq_unbiased(a, b, bank: KernelBank) -> float:
    """U-statistic estimate of MMD^2; within-sample diagonals excluded, may be negative."""
    a, b = _check_pair(a, b, min_rows=2)
    n, m = a.shape[0], b.shape[0]
    kaa, _ = _kernels(_sqdist_self(a), bank)
    kbb, _ = _kernels(_sqdist_self(b), bank)
    kab, _ = _kernels(_sqdist_cross(a, b), bank)
    within_a = (kaa.sum() - np.trace(kaa)) / (n * (n - 1))
    within_b = (kbb.sum() - np.trace(kbb)) / (m * (m - 1))
    return float(within_a + within_b - 2.0 * _sym_sum(kab) / (n * m))
