"""Compare the ablation modes on the synthetic few-shot benchmark.

Run ``python demos/fairness_benchmark.py [seeds]`` (default 3 seeds, about
40 s; the acceptance test uses 10).  Classes 7, 8 and 9 have three labeled
source samples each; the target domain is a rotated, shifted copy.
"""
import sys

import numpy as np

from gfca.benchmark import run_benchmark

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3


def progress(mode, seed, rep):
    print(f"seed {seed} {mode:12s} few-shot {rep.few_shot_accuracy:5.1f}  "
          f"overall {rep.overall_accuracy:5.1f}")


result = run_benchmark(seeds=range(seeds), progress=progress)
print()
print(result.summary())

# few-shot weight norms relative to the normal-class average alpha
for mode in ("gfca", "gfca-wofc"):
    print(f"{mode:10s} ||w_few||^2 / alpha per seed: {np.round(result.column(mode, 'fc_ratio'), 3)}")

# synthetic samples tighten the few-shot clusters
real = result.silhouette("gfca", "few_shot_real")
synth = result.silhouette("gfca", "few_shot_with_synthetic")
print(f"few-shot silhouette: real {real.mean():.3f}, real + synthetic {synth.mean():.3f}")
