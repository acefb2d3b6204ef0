"""Conditional feature generator and linear discriminator.

The generator maps uniform noise ``z`` and a one-hot label ``y`` to
``N(leaky(W_z z + W_y y))`` where ``N`` rescales to norm ``beta``.  ``W_y``
starts at the class centroids and ``W_z`` at the top principal components
scaled by their eigenvalues.  The discriminator is ``sigmoid(W_d x + b_d)``.

Functions taking :class:`~gfca.autograd.Var` arguments build traced graphs;
the public numeric entry points return plain arrays or floats.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .datasets import DomainDataset, one_hot_matrix
from .errors import DegenerateSampleError, ParameterError
from .numerics import class_centroids, pca_fit

DEFAULT_SLOPE = 0.2
MAX_RESAMPLE = 100


@dataclass
class GeneratorParams:
    W_z: np.ndarray  # d_x x d_z
    W_y: np.ndarray  # d_x x c
    W_y_init: np.ndarray
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        self.W_y_init = np.array(self.W_y_init, dtype=np.float64)
        self.W_y_init.setflags(write=False)
        if self.W_z.shape[0] != self.W_y.shape[0] or self.W_y.shape != self.W_y_init.shape:
            raise ParameterError("generator weight shapes are inconsistent")

    @property
    def noise_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def class_count(self) -> int:
        return self.W_y.shape[1]

    def group(self) -> ag.ParamGroup:
        return {"W_z": self.W_z, "W_y": self.W_y}


@dataclass
class DiscriminatorParams:
    W_d: np.ndarray  # length d_x
    b_d: np.ndarray  # 0-d

    def group(self) -> ag.ParamGroup:
        return {"W_d": self.W_d, "b_d": self.b_d}


class FakeBatch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray
    noise: np.ndarray


def init_generator(source_train: DomainDataset, d_z: int | None = None,
                   slope: float = DEFAULT_SLOPE) -> GeneratorParams:
    if not source_train.labeled:
        raise ParameterError("generator initialisation needs labeled source features")
    x = source_train.features
    if d_z is None:
        d_z = min(x.shape[1], 100)
    if not 1 <= d_z <= min(x.shape):
        raise ParameterError(f"d_z must lie in [1, {min(x.shape)}], got {d_z}")
    centroids = class_centroids(x, source_train.labels, source_train.class_count)
    pcs = pca_fit(x, d_z)
    return GeneratorParams(W_z=pcs.components.copy(), W_y=centroids.copy(),
                           W_y_init=centroids.copy(), slope=slope)


def init_discriminator(d_x: int, rng: np.random.Generator, scale: float = 0.01) -> DiscriminatorParams:
    return DiscriminatorParams(W_d=scale * rng.standard_normal(d_x), b_d=np.zeros(()))


def generate(W_z, W_y, noise, onehots, beta: float, slope: float) -> ag.Var:
    """Traced generator for a batch: rows of ``noise`` and ``onehots``."""
    pre = ag.matmul(noise, ag.transpose(W_z)) + ag.matmul(onehots, ag.transpose(W_y))
    return ag.rescale_rows(ag.leaky_relu(pre, slope), beta)


def generator_forward(g: GeneratorParams, z, y, beta: float) -> np.ndarray:
    """Generate one feature (1-D ``z`` and ``y``) or a batch (2-D)."""
    if beta <= 0:
        raise ParameterError("beta must be positive")
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = z.ndim == 1
    z2, y2 = np.atleast_2d(z), np.atleast_2d(y)
    if z2.shape[1] != g.noise_dim or y2.shape[1] != g.class_count or z2.shape[0] != y2.shape[0]:
        raise ParameterError("noise/label dimensions do not match the generator")
    pre = z2 @ g.W_z.T + y2 @ g.W_y.T
    act = np.where(pre > 0, pre, g.slope * pre)
    if np.any(np.linalg.norm(act, axis=1) == 0.0):
        raise DegenerateSampleError("generator output is the zero vector; resample z")
    out = ag.rescale_rows(act, beta).value
    return out[0] if single else out


def discriminator_logits(W_d, b_d, x) -> ag.Var:
    return ag.matmul(x, W_d) + b_d


def discriminator_forward(d: DiscriminatorParams, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d.W_d.shape[0]:
        raise ParameterError(f"feature dimension {x.shape[-1]} != {d.W_d.shape[0]}")
    out = ag.sigmoid(discriminator_logits(d.W_d, d.b_d, np.atleast_2d(x))).value
    return float(out[0]) if x.ndim == 1 else out


def _nonempty(scores, name):
    s = scores if isinstance(scores, ag.Var) else np.asarray(scores, dtype=np.float64)
    if np.size(s.value if isinstance(s, ag.Var) else s) == 0:
        raise ParameterError(f"{name} batch is empty")
    return s


def generator_loss(scores_fake) -> ag.Var:
    return -ag.mean(_nonempty(scores_fake, "fake"))


def discriminator_loss(scores_real, scores_fake, as_printed: bool = False) -> ag.Var:
    """``-mean(r) + mean(f) - 1``.

    ``as_printed=True`` evaluates the grouping ``-mean(r) - mean(1 - f)``;
    the two agree up to rounding.
    """
    r = _nonempty(scores_real, "real")
    f = _nonempty(scores_fake, "fake")
    if as_printed:
        return -ag.mean(r) - ag.mean(1.0 - ag.const(f))
    return -ag.mean(r) + ag.mean(f) - 1.0


def generator_loss_logistic(logits_fake) -> ag.Var:
    """-E[log D(x_f)] written on logits."""
    return ag.mean(ag.softplus(-ag.const(_nonempty(logits_fake, "fake"))))


def discriminator_loss_logistic(logits_real, logits_fake) -> ag.Var:
    """-E[log D(x_r)] - E[log(1 - D(x_f))] written on logits."""
    r = ag.const(_nonempty(logits_real, "real"))
    f = ag.const(_nonempty(logits_fake, "fake"))
    return ag.mean(ag.softplus(-r)) + ag.mean(ag.softplus(f))


def loss_g(scores_fake) -> float:
    """Generator loss: negative mean discriminator score on fakes."""
    return float(generator_loss(scores_fake).value)


def loss_d(scores_real, scores_fake) -> float:
    """Discriminator loss ``-mean(D(real)) - mean(1 - D(fake))``."""
    return float(discriminator_loss(scores_real, scores_fake, as_printed=True).value)


def anchor_penalty(W_y, W_y_init, normal_classes) -> ag.Var:
    idx = np.asarray(sorted(normal_classes), dtype=np.int64)
    if idx.size == 0:
        raise ParameterError("anchor penalty needs at least one normal class")
    return ag.total(ag.square(ag.take_cols(W_y, idx) - W_y_init[:, idx]))


def wy_anchor_penalty(g: GeneratorParams, normal_classes) -> float:
    """Squared drift of the normal-class columns of ``W_y`` from their initial values."""
    return float(anchor_penalty(g.W_y, g.W_y_init, normal_classes).value)


def draw_labels(rng: np.random.Generator, batch: int, c: int, policy="uniform") -> np.ndarray:
    """Labels for a fake batch.

    ``policy`` is ``"uniform"`` (iid over all classes), ``"balanced"`` (classes
    cycled in a shuffled order so counts differ by at most one), a single
    class id, or a sequence of class ids to draw uniformly from.
    """
    if batch < 1:
        raise ParameterError("batch must be >= 1")
    if isinstance(policy, str):
        if policy == "uniform":
            return rng.integers(0, c, size=batch)
        if policy == "balanced":
            return rng.permutation(np.arange(batch) % c)
        raise ParameterError(f"unknown label policy {policy!r}")
    if np.ndim(policy) == 0:
        return np.full(batch, int(policy), dtype=np.int64)
    choices = np.asarray(policy, dtype=np.int64)
    return choices[rng.integers(0, choices.size, size=batch)]


def sample_noise(rng: np.random.Generator, batch: int, d_z: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(batch, d_z))


def sample_fake_batch(g: GeneratorParams, rng: np.random.Generator, beta: float,
                      batch: int, label_policy="uniform") -> FakeBatch:
    """Draw labels and noise, then generate; all-zero outputs get fresh noise."""
    labels = draw_labels(rng, batch, g.class_count, label_policy)
    if np.any((labels < 0) | (labels >= g.class_count)):
        raise ParameterError("label policy produced an out-of-range class id")
    onehots = one_hot_matrix(labels, g.class_count)
    noise = sample_noise(rng, batch, g.noise_dim)
    for _ in range(MAX_RESAMPLE):
        pre = noise @ g.W_z.T + onehots @ g.W_y.T
        dead = ~np.any(pre != 0.0, axis=1)
        if not dead.any():
            feats = generator_forward(g, noise, onehots, beta)
            return FakeBatch(feats, labels, noise)
        noise[dead] = sample_noise(rng, int(dead.sum()), g.noise_dim)
    raise DegenerateSampleError(f"zero generator output persisted after {MAX_RESAMPLE} resamples")
