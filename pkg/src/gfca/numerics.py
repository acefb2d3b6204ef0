"""Dense linear algebra helpers, PCA and the seeded random number source.

Everything here is a pure function of its inputs.  Random streams come from
numpy's Philox counter-based bit generator so a seed reproduces the same
draws on every platform, and child streams can be split off without
correlating with the parent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, MissingClassError, ParameterError

DENSE_PCA_MAX_DIM = 512
POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Return a Philox-backed generator for ``seed``.

    Extra ``key`` integers select an independent named sub-stream, so e.g.
    ``make_rng(seed, class_id)`` gives the same draws for a class no matter
    which other streams were consumed.
    """
    if not 0 <= seed < 2**64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Spawn ``n`` independent child streams from ``rng``."""
    return list(rng.spawn(n))


def as_matrix(data, name: str = "data") -> np.ndarray:
    """Validate ``data`` as a finite 2-D float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class PrincipalComponents:
    """Top-k eigenpairs of a sample covariance.

    ``components[:, j]`` is ``eigenvectors[:, j] * eigenvalues[j]``.
    """

    components: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _power_eigs(cov: np.ndarray, k: int, tol: float, max_iter: int):
    d = cov.shape[0]
    start_rng = make_rng(0)
    vals = np.zeros(k)
    vecs = np.zeros((d, k))
    for j in range(k):
        v = start_rng.standard_normal(d)
        basis = vecs[:, :j]
        v -= basis @ (basis.T @ v)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = cov @ v
            w -= basis @ (basis.T @ w)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                lam = 0.0
                break
            lam_new = float(v @ w)
            v_new = w / norm
            done = abs(lam_new - lam) <= tol * max(1.0, abs(lam_new))
            v, lam = v_new, lam_new
            if done and np.linalg.norm(cov @ v - lam * v) <= 100 * tol * max(1.0, abs(lam)):
                break
        vals[j] = max(lam, 0.0)
        vecs[:, j] = v
    return vals, vecs


def pca_fit(data, k: int, method: str = "auto") -> PrincipalComponents:
    """Top-``k`` principal components of ``data`` (rows are samples).

    The data are mean-centred and the covariance uses the ``n - 1`` divisor.
    ``method`` is ``"dense"`` (symmetric eigendecomposition), ``"power"``
    (deflated power iteration) or ``"auto"``, which picks dense up to
    512 dimensions.
    """
    x = as_matrix(data)
    n, d = x.shape
    if n < 2:
        raise ParameterError(f"pca_fit needs at least 2 samples, got {n}")
    if not 1 <= k <= min(n, d):
        raise ParameterError(f"k must lie in [1, {min(n, d)}], got {k}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    if method == "auto":
        method = "dense" if d <= DENSE_PCA_MAX_DIM else "power"
    if method == "dense":
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(vals)[::-1][:k]
        vals = np.clip(vals[order], 0.0, None)
        vecs = vecs[:, order]
    elif method == "power":
        vals, vecs = _power_eigs(cov, k, POWER_TOL, POWER_MAX_ITER)
    else:
        raise ParameterError(f"unknown PCA method {method!r}")
    vecs = _fix_signs(vecs)
    return PrincipalComponents(components=vecs * vals, eigenvalues=vals, eigenvectors=vecs)


def class_centroids(features, labels, num_classes: int) -> np.ndarray:
    """Per-class means as the columns of a ``d x c`` matrix."""
    x = as_matrix(features, "features")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ParameterError("labels must have one entry per row")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ParameterError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(y, minlength=num_classes)
    for k in range(num_classes):
        if counts[k] == 0:
            raise MissingClassError(k, "class_centroids")
    sums = np.zeros((num_classes, x.shape[1]))
    np.add.at(sums, y, x)
    return (sums / counts[:, None]).T


def mean_row_norm(features) -> float:
    x = as_matrix(features, "features")
    if x.shape[0] == 0:
        raise ParameterError("mean_row_norm of an empty matrix")
    return float(np.linalg.norm(x, axis=1).mean())


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ParameterError(f"shape mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ParameterError("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))
