"""Synthetic fairness benchmark: ablation modes compared over several seeds.

The default configuration is the calibrated desk-scale setting used by the
acceptance tests and the ``demos/`` scripts: 10 classes in 32 dimensions,
classes 7, 8 and 9 few-shot with 3 shots, target rotated 30 degrees in two
planes and translated by 1 along the first axis.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import FewShotProtocol, SyntheticDomainConfig, synthesize_domain_pair
from .evaluation import MetricsReport
from .trainer import TrainConfig, run_experiment

BENCHMARK_MODES = ("source-only", "mmd-only", "gfca", "gfca-wofc")


def default_domain_config(seed: int = 0) -> SyntheticDomainConfig:
    return SyntheticDomainConfig(class_count=10, feature_dim=32, mean_scale=0.3, noise_std=0.4,
                                 rotation_deg=(30.0, 30.0), translation=1.0,
                                 samples_per_class=200, seed=seed)


def default_train_config(mode: str = "gfca", seed: int = 0) -> TrainConfig:
    return TrainConfig(mode=mode, seed=seed, pretrain_steps=200, main_steps=600)


@dataclass
class BenchmarkResult:
    reports: dict[str, list[MetricsReport]] = field(default_factory=dict)
    seconds: float = 0.0

    def column(self, mode: str, attr: str) -> np.ndarray:
        vals = []
        for r in self.reports[mode]:
            v = getattr(r, attr)
            vals.append(np.nan if v is None else v)
        return np.asarray(vals, dtype=np.float64)

    def mean(self, mode: str, attr: str) -> float:
        return float(np.mean(self.column(mode, attr)))

    def silhouette(self, mode: str, key: str) -> np.ndarray:
        return np.asarray([r.silhouette[key] for r in self.reports[mode]], dtype=np.float64)

    def summary(self) -> str:
        lines = [f"{'mode':12s} {'few-shot':>9s} {'normal':>8s} {'overall':>8s} {'fc ratio':>9s}"]
        for m in self.reports:
            lines.append(f"{m:12s} {self.mean(m, 'few_shot_accuracy'):9.2f} "
                         f"{self.mean(m, 'normal_accuracy'):8.2f} "
                         f"{self.mean(m, 'overall_accuracy'):8.2f} {self.mean(m, 'fc_ratio'):9.3f}")
        lines.append(f"({self.seconds:.1f} s)")
        return "\n".join(lines)


def run_benchmark(seeds=range(10), modes=BENCHMARK_MODES, domain=None, train_overrides=None,
                  few_shot_classes=(7, 8, 9), shots: int = 3, progress=None) -> BenchmarkResult:
    """Train every mode on every seed's domain pair and collect reports.

    ``domain`` is a function ``seed -> SyntheticDomainConfig`` and
    ``train_overrides`` a dict of :class:`TrainConfig` fields applied on top
    of the benchmark defaults.
    """
    domain = domain or default_domain_config
    overrides = dict(train_overrides or {})
    out = BenchmarkResult({m: [] for m in modes})
    t0 = time.perf_counter()
    for seed in seeds:
        pair = synthesize_domain_pair(domain(seed))
        protocol = FewShotProtocol.from_few_shot(list(few_shot_classes), pair.source.class_count,
                                                 shots, seed=seed)
        for mode in modes:
            cfg = replace(default_train_config(mode, seed), **overrides)
            rep = run_experiment(cfg, pair.source, pair.target.unlabeled(), pair.target.labels,
                                 protocol)
            out.reports[mode].append(rep)
            if progress is not None:
                progress(mode, seed, rep)
    out.seconds = time.perf_counter() - t0
    return out
