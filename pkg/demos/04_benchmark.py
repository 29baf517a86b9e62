"""The four methods side by side on the default synthetic benchmark.

Usage: python3 demos/04_benchmark.py [n_seeds] [offline|online]
"""
import logging
import sys
import time

import numpy as np

from caql.stream import StreamConfig, generate_synthetic_stream
from caql.trainer import METHODS, TrainConfig, run_experiment

logging.basicConfig(level=logging.ERROR)
n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2
mode = sys.argv[2] if len(sys.argv) > 2 else "offline"

t0 = time.perf_counter()
rows = {m: [] for m in METHODS}
for seed in range(n_seeds):
    stream = generate_synthetic_stream(StreamConfig(seed=seed))
    for m in METHODS:
        rows[m].append(run_experiment(TrainConfig(method=m, seed=seed, mode=mode), stream).report)

print(f"{mode}, seeds 0..{n_seeds - 1}  ({time.perf_counter() - t0:.1f}s)")
print(f"{'method':22s} {'rho_avg':>8s} {'rho_aft':>8s} {'rho_fwt':>8s} {'rMSE':>8s}")
for m, reps in rows.items():
    def mean(key):
        vals = [getattr(r, key) for r in reps if getattr(r, key) is not None]
        return f"{np.mean(vals):8.4f}" if vals else "       —"
    print(f"{m:22s} {mean('rho_avg')} {mean('rho_aft')} {mean('rho_fwt')} {mean('rmse')}")
