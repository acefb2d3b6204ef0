"""A minimal reverse-mode tape over a closed set of primitives.

Each primitive computes its value eagerly with numpy and stores a
hand-derived vector-Jacobian product.  ``grad`` walks the recorded graph
backwards.  There is no general expression compiler: the loss functions in
this package are compositions of the primitives defined here (plus the
Gaussian-kernel MMD node in :mod:`gfca.mkmmd`).

Also provided: a central finite-difference checker and the Adam update.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ParameterError, UnsupportedGraphError

ParamGroup = dict  # name -> float64 ndarray, updated in place by adam_step

KINK_EPS = 1e-6


class Var:
    """A node in the tape.  ``value`` is always a float64 ndarray."""

    __array_priority__ = 100.0
    __slots__ = ("value", "parents", "vjp", "op", "requires_grad", "preact")

    def __init__(self, value, parents=(), vjp=None, op="const", requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.preact = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise UnsupportedGraphError("division by a traced value is not a primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def node(value, parents, vjp, op) -> Var:
    """Create an interior node; ``vjp(g)`` returns one gradient per parent."""
    return Var(value, parents=parents, vjp=vjp, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def add(a, b) -> Var:
    a, b = const(a), const(b)
    return node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a) -> Var:
    a = const(a)
    return node(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return node(a.value * b.value, (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape),
                           _unbroadcast(g * a.value, b.shape)), "mul")


def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise UnsupportedGraphError(f"matmul of shapes {a.shape} and {b.shape}")

    def vjp(g):
        if b.ndim == 1:
            return np.outer(g, b.value), a.value.T @ g
        return g @ b.value.T, a.value.T @ g

    return node(a.value @ b.value, (a, b), vjp, "matmul")


def transpose(a) -> Var:
    a = const(a)
    return node(a.value.T, (a,), lambda g: (g.T,), "transpose")


def total(a) -> Var:
    a = const(a)
    return node(a.value.sum(), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a) -> Var:
    a = const(a)
    n = a.value.size
    if n == 0:
        raise ParameterError("mean of an empty array")
    return node(a.value.mean(), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def square(a) -> Var:
    a = const(a)
    return node(a.value**2, (a,), lambda g: (2.0 * a.value * g,), "square")


def row_sq_norms(a) -> Var:
    a = const(a)
    return node((a.value**2).sum(axis=1), (a,), lambda g: (2.0 * a.value * g[:, None],),
                "row_sq_norms")


def take_rows(a, idx) -> Var:
    a = const(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return node(a.value[idx], (a,), vjp, "take_rows")


def take_cols(a, idx) -> Var:
    a = const(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out.T, idx, g.T)
        return (out,)

    return node(a.value[:, idx], (a,), vjp, "take_cols")


def concat_rows(a, b) -> Var:
    a, b = const(a), const(b)
    n = a.shape[0]
    return node(np.vstack([a.value, b.value]), (a, b), lambda g: (g[:n], g[n:]), "concat_rows")


def leaky_relu(a, slope: float) -> Var:
    a = const(a)
    x = a.value
    scale = np.where(x > 0, 1.0, slope)
    out = node(x * scale, (a,), lambda g: (g * scale,), "leaky_relu")
    out.preact = x
    return out


def sigmoid(a) -> Var:
    a = const(a)
    s = _sigmoid(a.value)
    return node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a) -> Var:
    """log(1 + exp(x)), evaluated stably."""
    a = const(a)
    return node(np.logaddexp(0.0, a.value), (a,), lambda g: (g * _sigmoid(a.value),),
                "softplus")


def rescale_rows(a, beta: float) -> Var:
    """Scale every row of ``a`` to Euclidean norm ``beta``."""
    a = const(a)
    x = a.value
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ParameterError("cannot rescale a zero row")
    u = x / norms

    def vjp(g):
        # d(beta * x/|x|) = beta/|x| * (I - u u^T)
        return (beta / norms * (g - u * (u * g).sum(axis=-1, keepdims=True)),)

    return node(beta * u, (a,), vjp, "rescale_rows")


def softmax_cross_entropy(logits, labels) -> Var:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    z = const(logits)
    y = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    if n == 0:
        raise ParameterError("cross entropy of an empty batch")
    shifted = z.value - z.value.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    loss = -log_p[np.arange(n), y].mean()

    def vjp(g):
        d = np.exp(log_p)
        d[np.arange(n), y] -= 1.0
        return (float(g) * d / n,)

    return node(loss, (z,), vjp, "softmax_xent")


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


# ---------------------------------------------------------------- backward

def _topo(root: Var) -> list[Var]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            order.append(v)
            continue
        if id(v) in seen or not v.requires_grad:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            stack.append((p, False))
    return order


def backward(root: Var) -> dict[int, np.ndarray]:
    """Gradients of scalar ``root`` keyed by ``id`` of each traced node."""
    if not isinstance(root, Var):
        raise UnsupportedGraphError(f"loss must be a traced value, got {type(root).__name__}")
    if root.value.size != 1:
        raise UnsupportedGraphError(f"loss must be scalar, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.value)}
    for v in reversed(_topo(root)):
        g = grads.get(id(v))
        if g is None or v.vjp is None:
            continue
        for p, gp in zip(v.parents, v.vjp(g)):
            if not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    return grads


LossFn = Callable[[Mapping[str, Var]], Var]


def grad(loss_fn: LossFn, params: Mapping[str, np.ndarray]):
    """Value and exact gradient of ``loss_fn`` with respect to ``params``.

    ``loss_fn`` receives a mapping of traced leaves with the same keys as
    ``params``.  Anything the function closes over is treated as a constant.
    Returns ``(loss_value, {name: gradient})``.
    """
    leaves = {k: Var(np.asarray(v, dtype=np.float64), op="param", requires_grad=True)
              for k, v in params.items()}
    out = loss_fn(leaves)
    grads = backward(out)
    return float(out.value), {k: grads.get(id(v), np.zeros(v.shape)) for k, v in leaves.items()}


def leaky_preacts(root: Var) -> list[np.ndarray]:
    """Pre-activations of every leaky-rectifier node reachable from ``root``."""
    out, seen, stack = [], set(), [root]
    while stack:
        v = stack.pop()
        if id(v) in seen:
            continue
        seen.add(id(v))
        if v.preact is not None:
            out.append(v.preact)
        stack.extend(v.parents)
    return out


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float]
    worst_index: dict[str, tuple]
    failures: list[tuple[str, tuple, float, float, float]]
    excluded: int = 0
    near_kink: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _evaluate(loss_fn, params):
    root = loss_fn({k: Var(v, requires_grad=False) for k, v in params.items()})
    signs = [p > 0 for p in leaky_preacts(root)]
    return float(root.value), signs


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_difference_check(loss_fn: LossFn, params: Mapping[str, np.ndarray],
                            step: float = 1e-5, tolerance: float = 1e-4,
                            analytic: Mapping[str, np.ndarray] | None = None,
                            abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, abs_floor)``.
    Entries whose +/- perturbation flips the sign of any leaky-rectifier
    pre-activation straddle a kink and are excluded (counted in
    ``excluded``).
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if analytic is None:
        _, analytic = grad(loss_fn, base)
    _, base_signs = _evaluate(loss_fn, base)
    root = loss_fn({k: Var(v, requires_grad=False) for k, v in base.items()})
    near = sum(int((np.abs(p) < KINK_EPS).sum()) for p in leaky_preacts(root))

    max_err, worst, failures, excluded = {}, {}, [], 0
    for name, value in base.items():
        a_grad = np.asarray(analytic[name], dtype=np.float64)
        max_err[name], worst[name] = 0.0, ()
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + step
            f_plus, s_plus = _evaluate(loss_fn, base)
            value[idx] = orig - step
            f_minus, s_minus = _evaluate(loss_fn, base)
            value[idx] = orig
            if not (_same_pattern(s_plus, base_signs) and _same_pattern(s_minus, base_signs)):
                excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(a_grad[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            if rel > max_err[name]:
                max_err[name], worst[name] = rel, idx
            if rel > tolerance:
                failures.append((name, idx, a, numeric, rel))
    return GradCheckReport(tolerance, max_err, worst, failures, excluded, near)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: ParamGroup, grads: Mapping[str, np.ndarray]):
    """One Adam update, in place on ``params``.

    Bias-corrected moments; the step is ``lr * m_hat / (sqrt(v_hat) + eps)``.
    Returns ``(params, state)``.
    """
    for k, p in params.items():
        if k not in grads:
            raise ParameterError(f"no gradient for parameter {k!r}")
        if np.shape(grads[k]) != p.shape:
            raise ParameterError(f"gradient shape {np.shape(grads[k])} != parameter shape {p.shape} for {k!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        p -= state.lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)
    return params, state
