"""Encoder, softmax classifier, classification losses and the FC regularizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import NumericError, ParameterError

DEFAULT_SLOPE = 0.2


@dataclass
class EncoderParams:
    """Feed-forward map; layer ``i`` computes ``leaky(h @ weights[i] + biases[i])``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ParameterError("encoder needs one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ParameterError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ParameterError(f"layer {i} input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def group(self) -> ag.ParamGroup:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"enc_W{i}"] = w
            out[f"enc_b{i}"] = b
        return out


@dataclass
class ClassifierParams:
    W_c: np.ndarray  # c x d_h, row k is w_k
    bias: np.ndarray | None = field(default=None)

    @property
    def class_count(self) -> int:
        return self.W_c.shape[0]

    def group(self) -> ag.ParamGroup:
        out = {"W_c": self.W_c}
        if self.bias is not None:
            out["b_c"] = self.bias
        return out


def init_encoder(d_x: int, rng: np.random.Generator, d_h: int = 256, layers: int = 2,
                 slope: float = DEFAULT_SLOPE) -> EncoderParams:
    dims = [d_x] + [d_h] * layers
    weights = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(dims, dims[1:])]
    return EncoderParams(weights, [np.zeros(b) for b in dims[1:]], slope)


def init_classifier(d_h: int, c: int, rng: np.random.Generator, scale: float = 0.01,
                    bias: bool = False) -> ClassifierParams:
    return ClassifierParams(scale * rng.standard_normal((c, d_h)), np.zeros(c) if bias else None)


def encode(weights, biases, x, slope: float) -> ag.Var:
    h = ag.const(x)
    for w, b in zip(weights, biases):
        h = ag.leaky_relu(ag.matmul(h, w) + b, slope)
    return h


def encoder_forward(e: EncoderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != e.in_dim:
        raise ParameterError(f"encoder expects n x {e.in_dim} input, got {x.shape}")
    return encode(e.weights, e.biases, x, e.slope).value


def logits(W_c, bias, h) -> ag.Var:
    out = ag.matmul(h, ag.transpose(W_c))
    return out if bias is None else out + bias


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def classify(cl: ClassifierParams, h) -> np.ndarray:
    """Row-wise class probabilities for embeddings ``h``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != cl.W_c.shape[1]:
        raise ParameterError(f"classifier expects n x {cl.W_c.shape[1]} input, got {h.shape}")
    return _softmax(logits(cl.W_c, cl.bias, h).value)


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the true labels."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ParameterError("probs must be n x c with one label per row")
    picked = np.maximum(p[np.arange(y.size), y], np.finfo(np.float64).tiny)
    return float(-np.log(picked).mean())


def cross_entropy_from_logits(z, labels) -> float:
    return float(ag.softmax_cross_entropy(np.asarray(z, dtype=np.float64), labels).value)


def _class_idx(classes, c, name):
    idx = np.asarray(sorted(classes), dtype=np.int64)
    if idx.size == 0:
        raise ParameterError(f"{name} class set is empty")
    if idx.min() < 0 or idx.max() >= c:
        raise ParameterError(f"{name} class ids must lie in [0, {c})")
    return idx


def fc_alpha(cl: ClassifierParams, normal_classes) -> float:
    """Mean squared row norm of ``W_c`` over the normal classes."""
    idx = _class_idx(normal_classes, cl.class_count, "normal")
    return float((cl.W_c[idx] ** 2).sum(axis=1).mean())


def fc_term(W_c, few_shot_classes, alpha: float) -> ag.Var:
    """Traced FC regularizer; ``alpha`` enters as a constant."""
    W_c = ag.const(W_c)
    idx = _class_idx(few_shot_classes, W_c.shape[0], "few-shot")
    few = ag.mean(ag.row_sq_norms(ag.take_rows(W_c, idx)))
    return ag.square(few - float(alpha))


def fc_loss(cl: ClassifierParams, few_shot_classes, alpha: float) -> float:
    """``(mean_{k in C_l} |w_k|^2 - alpha)^2``."""
    return float(fc_term(cl.W_c, few_shot_classes, alpha).value)


def total_loss_ec(l_c, l_e, l_fc, lam: float = 1.0, gamma: float = 1.0):
    """``l_c + lam * l_e + gamma * l_fc``; accepts floats or traced values."""
    for name, v in (("L_c", l_c), ("L_e", l_e), ("L_fc", l_fc)):
        val = v.value if isinstance(v, ag.Var) else v
        if not np.all(np.isfinite(val)):
            raise NumericError(name, float(val))
    out = l_c + lam * l_e + gamma * l_fc
    return out if isinstance(out, ag.Var) else float(out)
