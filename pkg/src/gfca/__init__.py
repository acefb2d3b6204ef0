"""Generative few-shot cross-domain adaptation on precomputed feature vectors."""

from .datasets import (DomainDataset, FewShotProtocol, SyntheticDomainConfig, load_features,
                       make_few_shot_split, one_hot, oversample_balanced, save_features,
                       synthesize_domain_pair)
from .evaluation import MetricsReport
from .mkmmd import KernelBank, median_heuristic_bank, mmd_sq_biased, mmd_sq_unbiased
from .trainer import TrainConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "DomainDataset", "FewShotProtocol", "KernelBank", "MetricsReport", "SyntheticDomainConfig",
    "TrainConfig", "load_features", "make_few_shot_split", "median_heuristic_bank",
    "mmd_sq_biased", "mmd_sq_unbiased", "one_hot", "oversample_balanced", "run_experiment",
    "save_features", "synthesize_domain_pair",
]
