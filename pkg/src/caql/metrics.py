"""Continual AQA evaluation metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, StateError, UndefinedCorrelationError


def fractional_ranks(values) -> np.ndarray:
    """1-based ranks; ties share the mean of the positions they span."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise DomainError("cannot rank an empty vector")
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    start = 0
    for stop in range(1, x.size + 1):
        if stop == x.size or sx[stop] != sx[start]:
            ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
            start = stop
    return ranks


def pearson(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    dp = p - p.mean()
    dq = q - q.mean()
    denom = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(dq * dq)))
    if denom == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    return float(np.clip(np.sum(dp * dq) / denom, -1.0, 1.0))


def srcc(pred, target) -> float:
    """Spearman rank correlation: Pearson correlation of fractional ranks."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    if pred.size < 2:
        raise DomainError("SRCC needs at least two samples")
    return pearson(fractional_ranks(target), fractional_ranks(pred))


def rho_avg(preds: Sequence, targets: Sequence) -> float:
    """Single SRCC over the union of all test sets (pass per-session lists or flat arrays)."""
    p = np.concatenate([np.ravel(a) for a in preds]) if _nested(preds) else np.ravel(preds)
    t = np.concatenate([np.ravel(a) for a in targets]) if _nested(targets) else np.ravel(targets)
    return srcc(p, t)


def _nested(x) -> bool:
    return len(x) > 0 and np.ndim(x[0]) > 0


def rho_aft(perf) -> float:
    """Average forgetting: mean over all but the last task of the max spread of its SRCCs."""
    perf = np.asarray(perf, dtype=np.float64)
    T = perf.shape[0]
    if T < 2:
        raise DomainError("forgetting needs at least two sessions")
    spreads = []
    for t in range(T - 1):
        col = perf[t:, t]
        col = col[~np.isnan(col)]
        if col.size == 0:
            raise StateError(f"no measurements for task {t}")
        spreads.append(float(col.max() - col.min()))
    return float(np.mean(spreads))


def rho_fwt(forward_band, random_baselines) -> float:
    """Forward transfer from ``forward_band[t] = rho_{t-1,t}`` (index 0 unused)."""
    band = np.asarray(forward_band, dtype=np.float64)
    base = np.asarray(random_baselines, dtype=np.float64)
    T = band.size
    if T < 2:
        raise DomainError("forward transfer needs at least two sessions")
    if base.size != T:
        raise DimensionError("one random baseline per task is required")
    terms = band[1:] - base[1:]
    if np.any(np.isnan(terms)):
        raise StateError("forward band or random baselines are missing entries")
    return float(np.mean(terms))


def rmse(pred, target, score_range) -> float:
    """Range-normalised mean squared error."""
    low, high = score_range
    if not high > low:
        raise DomainError(f"degenerate score range ({low}, {high})")
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    return float(np.mean((pred - target) ** 2) / (high - low) ** 2)


def feature_deviation_mse(stale, fresh) -> float:
    stale = np.asarray(stale, dtype=np.float64)
    fresh = np.asarray(fresh, dtype=np.float64)
    if stale.shape != fresh.shape:
        raise DimensionError(f"stale {stale.shape} vs fresh {fresh.shape}")
    return float(np.mean((stale - fresh) ** 2))


class PerfMatrix:
    """``T x T`` SRCC grid, lower triangle defined, plus the forward band."""

    def __init__(self, T: int):
        self.T = T
        self.values = np.full((T, T), np.nan)
        self.forward = np.full(T, np.nan)

    def set(self, i: int, j: int, value: float) -> None:
        if j > i:
            raise DomainError(f"rho[{i},{j}] lies above the diagonal; use set_forward")
        self.values[i, j] = value

    def set_forward(self, t: int, value: float) -> None:
        self.forward[t] = value

    def lower_triangle_complete(self) -> bool:
        return not np.any(np.isnan(self.values[np.tril_indices(self.T)]))

    def to_lists(self):
        def clean(a):
            return [None if math.isnan(v) else float(v) for v in a]

        return [clean(row) for row in self.values], clean(self.forward)


@dataclass
class MetricReport:
    rho_avg: float | None
    rho_aft: float | None
    rho_fwt: float | None
    rmse: float | None
    per_session_srcc: list[float | None] = field(default_factory=list)
    deviation_mse: float | None = None
    stale_deviation_mse: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)
