"""Finite-difference verification of every training loss on small random instances.

Each case builds a loss closure and its parameters from a seed.  Instances
whose leaky-rectifier pre-activations come within ``KINK_EPS`` of zero are
redrawn, so the comparison never straddles a kink.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import adapt, gan
from . import autograd as ag
from .datasets import one_hot_matrix
from .errors import ParameterError
from .mkmmd import median_heuristic_bank, mmd_loss
from .numerics import make_rng

SCOPES = ("all", "feature-gan", "adapt-net", "mkmmd")

# small instance sizes
D_X, D_Z, D_H, C, N = 6, 3, 5, 4, 7
FEW, NORMAL = (2, 3), (0, 1)
SLOPE = 0.2
MAX_REDRAW = 50


@dataclass
class LossCase:
    name: str
    scope: str
    build: Callable[[np.random.Generator], tuple]


@dataclass
class LossResult:
    name: str
    scope: str
    seeds: int
    max_rel_error: float
    failures: list = field(default_factory=list)
    excluded: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


# ---------------------------------------------------------------- instance pieces

def _gen_params(rng):
    return {"W_z": rng.normal(size=(D_X, D_Z)), "W_y": rng.normal(size=(D_X, C))}


def _fake_inputs(rng, n=N):
    labels = rng.integers(0, C, size=n)
    return rng.uniform(-1, 1, size=(n, D_Z)), one_hot_matrix(labels, C), labels


def _enc_params(rng, layers=2):
    p, d_in = {}, D_X
    for i in range(layers):
        p[f"enc_W{i}"] = rng.normal(size=(d_in, D_H)) / np.sqrt(d_in)
        p[f"enc_b{i}"] = 0.1 * rng.normal(size=D_H)
        d_in = D_H
    return p


def _encode(p, x):
    layers = sum(1 for k in p if k.startswith("enc_W"))
    return adapt.encode([p[f"enc_W{i}"] for i in range(layers)],
                        [p[f"enc_b{i}"] for i in range(layers)], x, SLOPE)


def _beta(rng):
    return float(rng.uniform(0.5, 3.0))


# ---------------------------------------------------------------- cases

def _case_lg(rng, logistic=False):
    params = _gen_params(rng)
    z, y, _ = _fake_inputs(rng)
    W_d, b_d, beta = rng.normal(size=D_X), rng.normal(), _beta(rng)

    def loss(p):
        logit = gan.discriminator_logits(W_d, b_d, gan.generate(p["W_z"], p["W_y"], z, y, beta, SLOPE))
        return gan.generator_loss_logistic(logit) if logistic else gan.generator_loss(ag.sigmoid(logit))
    return loss, params


def _case_ld(rng, logistic=False):
    xr = rng.normal(size=(N, D_X))
    g = _gen_params(rng)
    z, y, _ = _fake_inputs(rng)
    xf = gan.generate(g["W_z"], g["W_y"], z, y, _beta(rng), SLOPE).value
    params = {"W_d": rng.normal(size=D_X), "b_d": np.asarray(rng.normal())}

    def loss(p):
        lr_ = gan.discriminator_logits(p["W_d"], p["b_d"], xr)
        lf_ = gan.discriminator_logits(p["W_d"], p["b_d"], xf)
        if logistic:
            return gan.discriminator_loss_logistic(lr_, lf_)
        return gan.discriminator_loss(ag.sigmoid(lr_), ag.sigmoid(lf_))
    return loss, params


def _case_anchor(rng):
    W_y_init = rng.normal(size=(D_X, C))
    params = {"W_y": W_y_init + 0.3 * rng.normal(size=(D_X, C))}
    return (lambda p: gan.anchor_penalty(p["W_y"], W_y_init, NORMAL)), params


def _case_g_objective(rng, eta=1e-2):
    loss_g, params = _case_lg(rng)
    W_y_init = params["W_y"] + 0.3 * rng.normal(size=(D_X, C))
    return (lambda p: loss_g(p) + eta * gan.anchor_penalty(p["W_y"], W_y_init, NORMAL)), params


def _case_lc(rng):
    params = {**_enc_params(rng), "W_c": 0.5 * rng.normal(size=(C, D_H))}
    xs, ys = rng.normal(size=(N, D_X)), rng.integers(0, C, size=N)
    g = _gen_params(rng)
    z, y, yf = _fake_inputs(rng)
    xf = gan.generate(g["W_z"], g["W_y"], z, y, _beta(rng), SLOPE).value

    def loss(p):
        l_sr = ag.softmax_cross_entropy(adapt.logits(p["W_c"], None, _encode(p, xs)), ys)
        l_sf = ag.softmax_cross_entropy(adapt.logits(p["W_c"], None, _encode(p, xf)), yf)
        return l_sr + l_sf
    return loss, params


def _case_lc_live(rng):
    """L_sf with the generator in the graph (the ``fake_grad_to_generator`` path)."""
    enc = _enc_params(rng)
    W_c = 0.5 * rng.normal(size=(C, D_H))
    params = _gen_params(rng)
    z, y, yf = _fake_inputs(rng)
    beta = _beta(rng)

    def loss(p):
        xf = gan.generate(p["W_z"], p["W_y"], z, y, beta, SLOPE)
        return ag.softmax_cross_entropy(adapt.logits(W_c, None, _encode(enc, xf)), yf)
    return loss, params


def _case_le(rng):
    params = _enc_params(rng)
    xs = rng.normal(size=(N, D_X))
    xt = rng.normal(size=(N + 2, D_X)) @ np.diag(rng.uniform(0.5, 1.5, D_X)) + 0.5
    bank = median_heuristic_bank(_encode(params, xs).value, _encode(params, xt).value)
    return (lambda p: mmd_loss(_encode(p, xs), _encode(p, xt), bank)), params


def _case_mmd_inputs(rng):
    a, b = rng.normal(size=(N, D_X)), rng.normal(size=(N + 3, D_X)) + 0.3
    bank = median_heuristic_bank(a, b)
    return (lambda p: mmd_loss(p["a"], p["b"], bank)), {"a": a, "b": b}


def _case_lfc(rng):
    W_c = rng.normal(size=(C, D_H))
    alpha = float((W_c[list(NORMAL)] ** 2).sum(axis=1).mean()) * rng.uniform(0.5, 1.5)
    return (lambda p: adapt.fc_term(p["W_c"], FEW, alpha)), {"W_c": W_c}


def _case_lec(rng, lam=1.0, gamma=1.0):
    params = {**_enc_params(rng), "W_c": 0.5 * rng.normal(size=(C, D_H))}
    xs, ys = rng.normal(size=(N, D_X)), rng.integers(0, C, size=N)
    xt = rng.normal(size=(N, D_X)) + 0.4
    g = _gen_params(rng)
    z, y, yf = _fake_inputs(rng)
    xf = gan.generate(g["W_z"], g["W_y"], z, y, _beta(rng), SLOPE).value
    bank = median_heuristic_bank(_encode(params, xs).value, _encode(params, xt).value)
    alpha = float((params["W_c"][list(NORMAL)] ** 2).sum(axis=1).mean())

    def loss(p):
        h_s = _encode(p, xs)
        l_c = (ag.softmax_cross_entropy(adapt.logits(p["W_c"], None, h_s), ys)
               + ag.softmax_cross_entropy(adapt.logits(p["W_c"], None, _encode(p, xf)), yf))
        l_e = mmd_loss(h_s, _encode(p, xt), bank)
        return adapt.total_loss_ec(l_c, l_e, adapt.fc_term(p["W_c"], FEW, alpha), lam, gamma)
    return loss, params


CASES = (
    LossCase("L_g", "feature-gan", _case_lg),
    LossCase("L_g logistic", "feature-gan", lambda r: _case_lg(r, logistic=True)),
    LossCase("L_d", "feature-gan", _case_ld),
    LossCase("L_d logistic", "feature-gan", lambda r: _case_ld(r, logistic=True)),
    LossCase("anchor", "feature-gan", _case_anchor),
    LossCase("L_g + eta*anchor", "feature-gan", _case_g_objective),
    LossCase("L_c real+fake", "adapt-net", _case_lc),
    LossCase("L_sf through G", "adapt-net", _case_lc_live),
    LossCase("L_fc", "adapt-net", _case_lfc),
    LossCase("L_ec", "adapt-net", _case_lec),
    LossCase("MK-MMD inputs", "mkmmd", _case_mmd_inputs),
    LossCase("L_e via encoder", "mkmmd", _case_le),
)


def _near_kink(loss_fn, params) -> bool:
    root = loss_fn({k: ag.Var(v, requires_grad=False) for k, v in params.items()})
    return any(np.any(np.abs(a) < ag.KINK_EPS) for a in ag.leaky_preacts(root))


def build_instance(case: LossCase, seed: int):
    """Draw a kink-free instance for ``case``; redraws use sub-streams of ``seed``."""
    for attempt in range(MAX_REDRAW):
        loss_fn, params = case.build(make_rng(seed, attempt))
        if not _near_kink(loss_fn, params):
            return loss_fn, params
    raise ParameterError(f"{case.name}: no kink-free instance in {MAX_REDRAW} draws")


def check_case(case: LossCase, seeds=range(25), step: float = 1e-5, tolerance: float = 1e-4,
               fault: bool = False) -> LossResult:
    """Run ``case`` on every seed; ``fault=True`` scales one analytic entry by 1.1."""
    t0 = time.perf_counter()
    res = LossResult(case.name, case.scope, 0, 0.0)
    for seed in seeds:
        loss_fn, params = build_instance(case, seed)
        analytic = None
        if fault:
            _, analytic = ag.grad(loss_fn, params)
            name = max(analytic, key=lambda k: np.abs(analytic[k]).max())
            g = analytic[name] = np.array(analytic[name])
            g[np.unravel_index(int(np.argmax(np.abs(g))), g.shape)] *= 1.1
        rep = ag.finite_difference_check(loss_fn, params, step, tolerance, analytic)
        res.seeds += 1
        res.max_rel_error = max(res.max_rel_error, max(rep.max_rel_error.values(), default=0.0))
        res.excluded += rep.excluded
        res.failures.extend((seed,) + f for f in rep.failures)
    res.seconds = time.perf_counter() - t0
    return res


def run_suite(scope: str = "all", seeds=range(25), fault: bool = False,
              tolerance: float = 1e-4) -> list[LossResult]:
    if scope not in SCOPES:
        raise ParameterError(f"unknown scope {scope!r}; expected one of {', '.join(SCOPES)}")
    return [check_case(c, seeds, tolerance=tolerance, fault=fault)
            for c in CASES if scope == "all" or c.scope == scope]


def format_results(results: list[LossResult]) -> str:
    lines = []
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        lines.append(f"{status} {r.name:18s} [{r.scope}] seeds={r.seeds} "
                     f"max_rel_err={r.max_rel_error:.2e} excluded={r.excluded} ({r.seconds:.2f}s)")
        for f in r.failures[:3]:
            seed, name, idx, a, n, rel = f
            lines.append(f"     seed {seed} {name}{list(idx)}: analytic={a:.6g} numeric={n:.6g} rel={rel:.2e}")
    return "\n".join(lines)
