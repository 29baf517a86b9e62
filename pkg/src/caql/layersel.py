"""Layer-adaptive tuning boundary chosen from per-layer cluster quality."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateError, DomainError

log = logging.getLogger(__name__)

_RATIO_FLOOR, _RATIO_CEIL = 1e-12, 1e12


def davies_bouldin(features, labels) -> float:
    """Davies-Bouldin index; lower means better separated clusters.

    Dispersion is the mean Euclidean distance of members to their centroid.
    """
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if X.ndim != 2 or X.shape[0] != labels.size:
        raise DomainError("features must be (n, d) with one label per row")
    if X.shape[0] < 2:
        raise DegenerateError("need at least two samples")
    ids = np.unique(labels)
    if ids.size < 2:
        raise DegenerateError(f"need at least two clusters, got {ids.size}")
    centroids = np.stack([X[labels == k].mean(axis=0) for k in ids])
    sigma = np.array([
        np.mean(np.linalg.norm(X[labels == k] - centroids[i], axis=1))
        for i, k in enumerate(ids)
    ])
    gaps = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    off = ~np.eye(ids.size, dtype=bool)
    if np.any(gaps[off] < 1e-12):
        raise DegenerateError("two cluster centroids coincide")
    ratio = np.where(off, (sigma[:, None] + sigma[None, :]) / np.where(off, gaps, 1.0), -np.inf)
    return float(np.mean(ratio.max(axis=1)))


def cluster_quality(features, labels) -> float:
    """Reciprocal Davies-Bouldin index, so that higher is better."""
    db = davies_bouldin(features, labels)
    return math.inf if db == 0.0 else 1.0 / db


def select_boundary(ratios: Sequence[float], epsilon: float) -> int:
    """Smallest 1-based layer whose ratio exceeds ``1 + epsilon``; ``L`` if none does."""
    ratios = list(ratios)
    if not ratios:
        raise DomainError("no layer ratios given")
    for l, r in enumerate(ratios, start=1):
        if r > 1.0 + epsilon:
            return l
    return len(ratios)


def score_bins(scores, n_bins: int) -> np.ndarray:
    """Equal-width bin index of each score within the scores' own range."""
    y = np.asarray(scores, dtype=np.float64)
    lo, hi = float(y.min()), float(y.max())
    if hi <= lo:
        return np.zeros(y.size, dtype=int)
    idx = np.floor((y - lo) / (hi - lo) * n_bins).astype(int)
    return np.minimum(idx, n_bins - 1)


@dataclass
class LayerAbstractionProfile:
    c_fix: list[float]
    c_tune: list[float]
    ratios: list[float]
    boundary: int
    epsilon: float

    def to_dict(self) -> dict:
        d = asdict(self)
        # infinities are not valid JSON
        for key in ("c_fix", "c_tune"):
            d[key] = [v if math.isfinite(v) else None for v in d[key]]
        return d


def profile_layers(inputs, labels, fixed_backbone, tuned_backbone, epsilon: float) -> LayerAbstractionProfile:
    """Compare cluster quality of every layer before and after tuning.

    ``inputs``/``labels`` come from the base session only. Layers whose
    clustering is degenerate are logged and given ratio 1.
    """
    fixed_taps = fixed_backbone.taps(inputs)
    tuned_taps = tuned_backbone.taps(inputs)
    c_fix, c_tune, ratios = [], [], []
    for l, (zf, zt) in enumerate(zip(fixed_taps, tuned_taps), start=1):
        try:
            db_fix = davies_bouldin(zf, labels)
            db_tune = davies_bouldin(zt, labels)
        except DegenerateError as exc:
            log.warning("layer %d: degenerate clustering (%s); ratio set to 1", l, exc)
            c_fix.append(math.nan)
            c_tune.append(math.nan)
            ratios.append(1.0)
            continue
        c_fix.append(math.inf if db_fix == 0.0 else 1.0 / db_fix)
        c_tune.append(math.inf if db_tune == 0.0 else 1.0 / db_tune)
        # C = 1/DB, so C_tune / C_fix = DB_fix / DB_tune
        ratios.append(max(_RATIO_FLOOR, min(_RATIO_CEIL, db_fix / max(db_tune, 1e-300)))
                      if (db_fix, db_tune) != (0.0, 0.0) else 1.0)
    return LayerAbstractionProfile(c_fix, c_tune, ratios, select_boundary(ratios, epsilon), epsilon)
