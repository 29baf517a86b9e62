"""Choosing the tuning boundary from cluster quality.

Layers 1-2 are frozen and only layers 3-4 are tuned on the base session, so
only deep structure can change. The profile compares 1/DB of every layer
before and after tuning and takes the first layer whose ratio clears 1 + eps.
"""
import logging

import numpy as np

from caql.layersel import profile_layers, score_bins, select_boundary
from caql.stream import StreamConfig, generate_synthetic_stream
from caql.trainer import Learner, TrainConfig

logging.basicConfig(level=logging.ERROR)

stream = generate_synthetic_stream(StreamConfig(seed=1))
learner = Learner(TrainConfig(method="sequential_ft", seed=1, lr=1e-2, max_epochs=200, patience=0),
                  16, (0.0, 100.0))
for p in learner.state.backbone.params()[:4]:
    p.frozen = True
learner.run_session(stream[0], 0)

x, y = stream[0].train_arrays()
prof = profile_layers(x, score_bins(y, 5), learner.initial_backbone, learner.state.backbone, 0.05)
print("layer  C_fix   C_tune  ratio")
for l, (cf, ct, r) in enumerate(zip(prof.c_fix, prof.c_tune, prof.ratios), start=1):
    print(f"{l:5d}  {cf:6.3f}  {ct:6.3f}  {r:5.3f}")
print("chosen boundary L_opt =", prof.boundary, "of", len(prof.ratios))

# the rule takes the first crossing, not the last
print("select_boundary([1.5, 0.9], 0.05) =", select_boundary([1.5, 0.9], 0.05))
