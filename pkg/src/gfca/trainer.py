"""GAN pretraining, the alternating end-to-end schedule and ablation modes.

One iteration of the main loop (mode ``gfca``):

1. sample a real labeled source batch and an unlabeled target batch;
2. synthesise a labeled fake batch with the generator;
3. one Adam step on encoder + classifier for ``L_c + lam*L_e + gamma*L_fc``
   (fake features are constants here);
4. one Adam step on the generator for ``L_g + eta*anchor`` with D fixed;
5. one Adam step on the discriminator for ``L_d`` with G fixed.

Random streams are keyed sub-streams of the config seed, so a run is a pure
function of its config and data.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import adapt, gan
from . import autograd as ag
from .adapt import ClassifierParams, EncoderParams
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import (DomainDataset, FewShotProtocol, make_few_shot_split, one_hot_matrix,
                       oversample_balanced)
from .errors import ConfigError, NumericError, TrainingAborted
from .evaluation import (MetricsReport, accuracy_block, centroid_similarity_report,
                         silhouette_cosine, weight_norm_report)
from .gan import DiscriminatorParams, GeneratorParams
from .mkmmd import KernelBank, median_heuristic_bank, mmd_loss
from .numerics import make_rng, mean_row_norm

MODES = ("gfca", "gfca-2stage", "gfca-wofc", "mmd-only", "source-only")
GAN_MODES = ("gfca", "gfca-2stage", "gfca-wofc")

# sub-stream ids under the config seed
STREAM_OVERSAMPLE, STREAM_INIT, STREAM_PRETRAIN, STREAM_MAIN, STREAM_EVAL = 1, 2, 3, 4, 5


@dataclass
class TrainConfig:
    mode: str = "gfca"
    lam: float = 1.0
    gamma: float = 1.0
    eta: float = 1e-2
    batch_source: int = 64
    batch_target: int = 64
    batch_fake: int = 64
    d_z: int | None = None
    d_h: int = 256
    encoder_layers: int = 2
    slope: float = 0.2
    lr_ec: float = 1e-3
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_steps: int = 500
    main_steps: int = 3000
    kernel_count: int = 5
    kernel_factor: float = 2.0
    bank_refresh_steps: int | None = None  # None: once per epoch of the balanced source set
    fake_label_policy: str = "uniform"
    gan_loss: str = "linear"
    ld_as_printed: bool = False
    mmd_include_fake: bool = False
    fake_grad_to_generator: bool = False
    classifier_bias: bool = False
    weight_real: float = 1.0
    weight_fake: float = 1.0
    classifier_init_scale: float = 0.01
    eval_synthetic_per_class: int = 50
    log_every: int = 100
    history_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {', '.join(MODES)}, got {self.mode!r}")
        for name in ("lam", "gamma", "eta", "weight_real", "weight_fake"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("batch_source", "batch_target", "batch_fake", "d_h", "encoder_layers",
                     "kernel_count", "log_every", "history_size", "eval_synthetic_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("pretrain_steps", "main_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("lr_ec", "lr_g", "lr_d", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if self.gan_loss not in ("linear", "logistic"):
            raise ConfigError("gan_loss", "must be 'linear' or 'logistic'")
        if self.fake_label_policy not in ("uniform", "balanced", "few-shot"):
            raise ConfigError("fake_label_policy", "must be 'uniform', 'balanced' or 'few-shot'")
        if self.d_z is not None and self.d_z < 1:
            raise ConfigError("d_z", "must be >= 1")
        if self.bank_refresh_steps is not None and self.bank_refresh_steps < 1:
            raise ConfigError("bank_refresh_steps", "must be >= 1")
        # mode contracts
        if self.mode in ("gfca-wofc", "mmd-only"):
            self.gamma = 0.0
        if self.mode == "source-only":
            self.lam = 0.0
            self.gamma = 0.0

    @property
    def uses_gan(self) -> bool:
        return self.mode in GAN_MODES

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown training option")
        return cls(**d)


@dataclass
class TrainState:
    config: TrainConfig
    protocol: FewShotProtocol
    generator: GeneratorParams
    discriminator: DiscriminatorParams
    encoder: EncoderParams
    classifier: ClassifierParams
    beta: float
    adam_ec: ag.AdamState
    adam_g: ag.AdamState
    adam_d: ag.AdamState
    step: int = 0
    bank: KernelBank | None = None
    history: deque = field(default_factory=deque)
    max_abs_loss: float = 0.0
    log_fn: Callable[[dict], None] | None = None

    def ec_group(self) -> ag.ParamGroup:
        return {**self.encoder.group(), **self.classifier.group()}

    def checksums(self) -> dict[str, str]:
        def digest(group):
            h = hashlib.sha256()
            for k in sorted(group):
                h.update(k.encode())
                h.update(np.ascontiguousarray(group[k]).tobytes())
            return h.hexdigest()
        return {"generator": digest(self.generator.group()),
                "discriminator": digest(self.discriminator.group()),
                "encoder+classifier": digest(self.ec_group())}

    def sections(self) -> dict[str, np.ndarray]:
        out = {"W_z": self.generator.W_z, "W_y": self.generator.W_y,
               "W_y_init": self.generator.W_y_init, "W_d": self.discriminator.W_d,
               "b_d": self.discriminator.b_d}
        out.update(self.encoder.group())
        out.update(self.classifier.group())
        out["beta"] = np.asarray(self.beta)
        out["step"] = np.asarray(float(self.step))
        out["max_abs_loss"] = np.asarray(self.max_abs_loss)
        return out


def init_state(config: TrainConfig, source_train: DomainDataset, protocol: FewShotProtocol) -> TrainState:
    """Initialise every parameter group from the (unbalanced) training split."""
    rng = make_rng(config.seed, STREAM_INIT)
    d_x, c = source_train.dim, source_train.class_count
    d_z = config.d_z if config.d_z is not None else min(d_x, 100, source_train.n)
    generator = gan.init_generator(source_train, d_z, config.slope)
    discriminator = gan.init_discriminator(d_x, rng)
    encoder = adapt.init_encoder(d_x, rng, config.d_h, config.encoder_layers, config.slope)
    classifier = adapt.init_classifier(config.d_h, c, rng, config.classifier_init_scale,
                                       config.classifier_bias)

    def adam(lr):
        return ag.AdamState(lr=lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)

    return TrainState(config=config, protocol=protocol, generator=generator,
                      discriminator=discriminator, encoder=encoder, classifier=classifier,
                      beta=mean_row_norm(source_train.features),
                      adam_ec=adam(config.lr_ec), adam_g=adam(config.lr_g), adam_d=adam(config.lr_d),
                      history=deque(maxlen=config.history_size))


def load_state(config: TrainConfig, protocol: FewShotProtocol, path) -> TrainState:
    """Rebuild parameters from a checkpoint (optimizer moments are not stored)."""
    s = load_checkpoint(path)
    layers = sum(1 for k in s if k.startswith("enc_W"))
    encoder = EncoderParams([s[f"enc_W{i}"] for i in range(layers)],
                            [s[f"enc_b{i}"] for i in range(layers)], config.slope)
    state = TrainState(
        config=config, protocol=protocol,
        generator=GeneratorParams(s["W_z"], s["W_y"], s["W_y_init"], config.slope),
        discriminator=DiscriminatorParams(s["W_d"], s["b_d"].reshape(())),
        encoder=encoder, classifier=ClassifierParams(s["W_c"], s.get("b_c")),
        beta=float(s["beta"]),
        adam_ec=ag.AdamState(lr=config.lr_ec), adam_g=ag.AdamState(lr=config.lr_g),
        adam_d=ag.AdamState(lr=config.lr_d), step=int(s["step"]),
        max_abs_loss=float(s.get("max_abs_loss", 0.0)),
        history=deque(maxlen=config.history_size))
    return state


# ---------------------------------------------------------------- sub-steps

def _batch_idx(rng, n, size):
    return rng.choice(n, size=size, replace=size > n)


def _fake_policy(state: TrainState):
    policy = state.config.fake_label_policy
    return list(state.protocol.few_shot_classes) if policy == "few-shot" else policy


def _draw_fake(state: TrainState, rng) -> gan.FakeBatch:
    return gan.sample_fake_batch(state.generator, rng, state.beta, state.config.batch_fake,
                                 _fake_policy(state))


def _guard(state: TrainState, losses: dict):
    for name, v in losses.items():
        if v is None:
            continue
        if not math.isfinite(v):
            raise TrainingAborted(f"non-finite {name} at step {state.step}: {losses}",
                                  step=state.step, losses=losses)
        state.max_abs_loss = max(state.max_abs_loss, abs(v))


def _encode(p, x, slope):
    layers = sum(1 for k in p if k.startswith("enc_W"))
    return adapt.encode([p[f"enc_W{i}"] for i in range(layers)],
                        [p[f"enc_b{i}"] for i in range(layers)], x, slope)


def refresh_bank(state: TrainState, xs, xt) -> KernelBank:
    h_s = adapt.encoder_forward(state.encoder, xs)
    h_t = adapt.encoder_forward(state.encoder, xt)
    state.bank = median_heuristic_bank(h_s, h_t, state.config.kernel_count, state.config.kernel_factor)
    return state.bank


def ec_step(state: TrainState, xs, ys, xt, fake: gan.FakeBatch | None) -> dict:
    """Sub-step (3): one Adam step on encoder + classifier for L_ec."""
    cfg, prot = state.config, state.protocol
    slope = state.encoder.slope
    alpha = adapt.fc_alpha(state.classifier, prot.normal_classes)
    params = state.ec_group()
    live_g = fake is not None and cfg.fake_grad_to_generator
    if live_g:
        params = {**params, **{f"G_{k}": v for k, v in state.generator.group().items()}}
    if cfg.lam > 0 and state.bank is None:
        refresh_bank(state, xs, xt)
    terms: dict = {}

    def loss(p):
        h_s = _encode(p, xs, slope)
        l_c = cfg.weight_real * ag.softmax_cross_entropy(adapt.logits(p["W_c"], p.get("b_c"), h_s), ys)
        terms["L_sr"] = l_c.value.item() / cfg.weight_real if cfg.weight_real else None
        h_f = None
        if fake is not None:
            if live_g:
                xf = gan.generate(p["G_W_z"], p["G_W_y"], fake.noise,
                                  one_hot_matrix(fake.labels, state.generator.class_count),
                                  state.beta, state.generator.slope)
            else:
                xf = fake.features
            h_f = _encode(p, xf, slope)
            l_sf = ag.softmax_cross_entropy(adapt.logits(p["W_c"], p.get("b_c"), h_f), fake.labels)
            terms["L_sf"] = l_sf.value.item()
            l_c = l_c + cfg.weight_fake * l_sf
        terms["L_c"] = l_c.value.item()
        l_e = 0.0
        if cfg.lam > 0:
            h_t = _encode(p, xt, slope)
            src = ag.concat_rows(h_s, h_f) if (cfg.mmd_include_fake and h_f is not None) else h_s
            l_e = mmd_loss(src, h_t, state.bank)
            terms["L_e"] = l_e.value.item()
        l_fc = 0.0
        if cfg.gamma > 0:
            l_fc = adapt.fc_term(p["W_c"], prot.few_shot_classes, alpha)
            terms["L_fc"] = l_fc.value.item()
        out = adapt.total_loss_ec(l_c, l_e, l_fc, cfg.lam, cfg.gamma)
        terms["L_ec"] = out.value.item()
        return out

    try:
        _, grads = ag.grad(loss, params)
    except NumericError as exc:
        raise TrainingAborted(f"{exc} at step {state.step}", step=state.step,
                              losses={**terms, exc.term: exc.value}) from None
    ec_names = list(state.ec_group())
    ag.adam_step(state.adam_ec, state.ec_group(), {k: grads[k] for k in ec_names})
    if live_g:
        ag.adam_step(state.adam_g, state.generator.group(),
                     {k: grads[f"G_{k}"] for k in state.generator.group()})
    terms["alpha"] = alpha
    return terms


def g_step(state: TrainState, noise, labels) -> dict:
    """Sub-step (4): generator update on L_g + eta * anchor, discriminator fixed."""
    cfg, g, d = state.config, state.generator, state.discriminator
    onehots = one_hot_matrix(labels, g.class_count)
    terms: dict = {}

    def loss(p):
        xf = gan.generate(p["W_z"], p["W_y"], noise, onehots, state.beta, g.slope)
        logit = gan.discriminator_logits(d.W_d, d.b_d, xf)
        if cfg.gan_loss == "linear":
            l_g = gan.generator_loss(ag.sigmoid(logit))
        else:
            l_g = gan.generator_loss_logistic(logit)
        terms["L_g"] = l_g.value.item()
        pen = gan.anchor_penalty(p["W_y"], g.W_y_init, state.protocol.normal_classes)
        terms["anchor"] = pen.value.item()
        return l_g + cfg.eta * pen

    _, grads = ag.grad(loss, g.group())
    ag.adam_step(state.adam_g, g.group(), grads)
    return terms


def d_step(state: TrainState, xr, noise, labels) -> dict:
    """Sub-step (5): discriminator update on L_d, generator fixed."""
    cfg, g = state.config, state.generator
    xf = gan.generator_forward(g, noise, one_hot_matrix(labels, g.class_count), state.beta)
    terms: dict = {}

    def loss(p):
        lr_ = gan.discriminator_logits(p["W_d"], p["b_d"], xr)
        lf_ = gan.discriminator_logits(p["W_d"], p["b_d"], xf)
        if cfg.gan_loss == "linear":
            l_d = gan.discriminator_loss(ag.sigmoid(lr_), ag.sigmoid(lf_), cfg.ld_as_printed)
        else:
            l_d = gan.discriminator_loss_logistic(lr_, lf_)
        terms["L_d"] = l_d.value.item()
        return l_d

    _, grads = ag.grad(loss, state.discriminator.group())
    ag.adam_step(state.adam_d, state.discriminator.group(), grads)
    return terms


def _record(state: TrainState, terms: dict, phase: str):
    fs = list(state.protocol.few_shot_classes)
    w = state.classifier.W_c
    rec = {"step": state.step, "phase": phase}
    for k in ("L_c", "L_sr", "L_sf", "L_e", "L_fc", "L_ec", "L_g", "L_d", "anchor", "alpha"):
        rec[k] = terms.get(k)
    rec["few_shot_sq_norm"] = float((w[fs] ** 2).sum(axis=1).mean()) if fs else None
    _guard(state, {k: v for k, v in rec.items() if k not in ("step", "phase")})
    state.history.append(rec)
    if state.log_fn is not None and state.step % state.config.log_every == 0:
        state.log_fn(rec)


# ---------------------------------------------------------------- schedules

def pretrain_gan(state: TrainState, source_train: DomainDataset, steps: int,
                 rng: np.random.Generator) -> TrainState:
    """Alternate discriminator and generator updates on real-vs-fake source features."""
    x, n = source_train.features, source_train.n
    for _ in range(steps):
        xr = x[_batch_idx(rng, n, state.config.batch_source)]
        fb = _draw_fake(state, rng)
        terms = d_step(state, xr, fb.noise, fb.labels)
        terms.update(g_step(state, fb.noise, fb.labels))
        _record(state, terms, "pretrain")
    return state


def _bank_due(state: TrainState, epoch_len: int) -> bool:
    every = state.config.bank_refresh_steps or epoch_len
    return state.bank is None or state.step % every == 0


def train_step(state: TrainState, source_train: DomainDataset, target: DomainDataset,
               rng: np.random.Generator, fake_pool: gan.FakeBatch | None = None) -> TrainState:
    """One main-loop iteration; the sub-steps that run depend on the mode.

    ``fake_pool`` (two-stage mode) replaces the live generator: fake batches
    are drawn from the fixed pool and G/D are not updated.
    """
    cfg = state.config
    xs_idx = _batch_idx(rng, source_train.n, cfg.batch_source)
    xs, ys = source_train.features[xs_idx], source_train.labels[xs_idx]
    xt = target.features[_batch_idx(rng, target.n, cfg.batch_target)]
    fake = None
    if fake_pool is not None:
        idx = _batch_idx(rng, fake_pool.labels.size, cfg.batch_fake)
        fake = gan.FakeBatch(fake_pool.features[idx], fake_pool.labels[idx], fake_pool.noise[idx])
    elif cfg.uses_gan:
        fake = _draw_fake(state, rng)
    if cfg.lam > 0 and _bank_due(state, max(1, math.ceil(source_train.n / cfg.batch_source))):
        refresh_bank(state, xs, xt)
    terms = ec_step(state, xs, ys, xt, fake)
    if cfg.uses_gan and fake_pool is None:
        terms.update(g_step(state, fake.noise, fake.labels))
        terms.update(d_step(state, xs, fake.noise, fake.labels))
    _record(state, terms, "main")
    state.step += 1
    return state


class FitResult(NamedTuple):
    state: TrainState
    train: DomainDataset
    heldout: DomainDataset
    balanced: DomainDataset


def fit(config: TrainConfig, source: DomainDataset, target_unlabeled: DomainDataset,
        protocol: FewShotProtocol | None = None, log_fn=None) -> FitResult:
    """Split, oversample, initialise and train according to ``config.mode``.

    Without a ``protocol`` the source is taken as the training split already
    and every class is treated as normal.
    """
    if protocol is None:
        protocol = FewShotProtocol((), tuple(range(source.class_count)), 1, config.seed)
        train, heldout = source, source.subset([])
    else:
        train, heldout = make_few_shot_split(source, protocol)
    balanced = oversample_balanced(train, make_rng(config.seed, STREAM_OVERSAMPLE))
    state = init_state(config, train, protocol)
    state.log_fn = log_fn
    target = target_unlabeled.unlabeled()

    if config.mode == "gfca-2stage":
        pretrain_gan(state, balanced, config.pretrain_steps + config.main_steps,
                     make_rng(config.seed, STREAM_PRETRAIN))
        per_class = int(balanced.class_counts().max())
        pool = gan.sample_fake_batch(state.generator, make_rng(config.seed, STREAM_PRETRAIN, 1),
                                     state.beta, per_class * source.class_count, "balanced")
        rng = make_rng(config.seed, STREAM_MAIN)
        for _ in range(config.main_steps):
            train_step(state, balanced, target, rng, fake_pool=pool)
    else:
        if config.uses_gan:
            pretrain_gan(state, balanced, config.pretrain_steps, make_rng(config.seed, STREAM_PRETRAIN))
        rng = make_rng(config.seed, STREAM_MAIN)
        for _ in range(config.main_steps):
            train_step(state, balanced, target, rng)
    return FitResult(state, train, heldout, balanced)


def predict(state: TrainState, x) -> np.ndarray:
    h = adapt.encoder_forward(state.encoder, x)
    return np.argmax(adapt.classify(state.classifier, h), axis=1)


def synthetic_eval_batch(state: TrainState) -> gan.FakeBatch:
    c = state.generator.class_count
    return gan.sample_fake_batch(state.generator, make_rng(state.config.seed, STREAM_EVAL),
                                 state.beta, c * state.config.eval_synthetic_per_class, "balanced")


def evaluate_state(state: TrainState, train: DomainDataset, heldout: DomainDataset,
                   target_x, target_labels) -> MetricsReport:
    cfg, prot = state.config, state.protocol
    fs, nm = list(prot.few_shot_classes), list(prot.normal_classes)
    c = state.classifier.class_count
    acc = accuracy_block(predict(state, target_x), target_labels, c, fs, nm)

    synth = synthetic_eval_batch(state) if cfg.uses_gan else None
    aug = None if synth is None else (synth.features, synth.labels)
    sil = {"all_real": silhouette_cosine(train.features, train.labels),
           "all_with_synthetic": None, "few_shot_real": None, "few_shot_with_synthetic": None}
    if aug is not None:
        sil["all_with_synthetic"] = silhouette_cosine(train.features, train.labels, aug)
    if len(fs) >= 2:
        sil["few_shot_real"] = silhouette_cosine(train.features, train.labels, scope="few-shot",
                                                 few_shot_classes=fs)
        if aug is not None:
            sil["few_shot_with_synthetic"] = silhouette_cosine(
                train.features, train.labels, aug, scope="few-shot", few_shot_classes=fs)

    centroid = None
    if fs and heldout.n and all(np.any(heldout.labels == k) for k in fs):
        centroid = centroid_similarity_report(
            train.features, train.labels, heldout.features, heldout.labels,
            None if synth is None else synth.features, None if synth is None else synth.labels, fs)

    w_normal, w_few = weight_norm_report(state.classifier.W_c, nm, fs)
    alpha = adapt.fc_alpha(state.classifier, nm)
    few_sq = float((state.classifier.W_c[fs] ** 2).sum(axis=1).mean()) if fs else None
    if not fs:
        w_few = None
    return MetricsReport(
        mode=cfg.mode, seed=cfg.seed, silhouette=sil, centroid_similarity=centroid,
        mean_weight_norm_normal=w_normal, mean_weight_norm_few_shot=w_few,
        alpha=alpha, few_shot_sq_norm=few_sq, max_abs_loss=state.max_abs_loss,
        few_shot_classes=fs, shots_per_class=prot.shots_per_class if fs else None,
        class_count=c, config=cfg.to_dict(), **acc)


def run_experiment(config: TrainConfig, source: DomainDataset, target_unlabeled: DomainDataset,
                   target_labels_for_eval, protocol: FewShotProtocol | None = None,
                   log_fn=None) -> MetricsReport:
    """Full pipeline from datasets to a :class:`MetricsReport`."""
    res = fit(config, source, target_unlabeled, protocol, log_fn)
    return evaluate_state(res.state, res.train, res.heldout, target_unlabeled.features,
                          target_labels_for_eval)


def save_state(state: TrainState, path):
    return save_checkpoint(path, state.sections())


def json_log_writer(fh) -> Callable[[dict], None]:
    """Line-delimited JSON training log."""
    def write(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return write
