"""Why continual AQA needs a pooled correlation.

Two sessions can each be ranked perfectly while the model still places the
later, higher-scoring session below the earlier one. Per-session SRCC hides
this; the pooled rho_avg does not.
"""
import numpy as np

from caql.metrics import fractional_ranks, rho_aft, rho_avg, rho_fwt, srcc

targets = [np.array([10.0, 20.0]), np.array([30.0, 40.0])]
preds = [np.array([0.5, 0.6]), np.array([0.1, 0.2])]

print("fractional ranks of [3, 1, 3]:", fractional_ranks([3, 1, 3]))
for t, (p, y) in enumerate(zip(preds, targets)):
    print(f"session {t}: SRCC = {srcc(p, y):+.2f}")
print(f"pooled rho_avg = {rho_avg(preds, targets):+.2f}   (calibration across sessions is broken)")

# A lower-triangular grid: rho[i, j] is SRCC on test set j after session i.
perf = np.array([
    [0.90, np.nan, np.nan],
    [0.70, 0.85, np.nan],
    [0.75, 0.60, 0.88],
])
print("\nforgetting rho_aft =", round(rho_aft(perf), 4), "(max spread per past task, averaged)")

# forward[t] is rho on test set t measured right before training on it
forward = [np.nan, 0.40, 0.35]
random_init = [0.05, 0.10, -0.05]
print("forward transfer rho_fwt =", round(rho_fwt(forward, random_init), 4))
