"""Loss terms of the composite objective, each returning its value and gradient."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateError, DimensionError, DomainError, NumericError
from .numerics import as_matrix

ARCCOS_CLAMP = 1.0 - 1e-7
TERMS = ("L_D", "L_M", "L_tune", "L_proj", "L_reg")


def loss_regression(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise DomainError("regression loss needs at least one sample")
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / pred.size


def loss_tune(
    current_taps: Sequence[np.ndarray],
    frozen_taps: Sequence[np.ndarray],
    boundary: int,
    mode: str = "all_below",
) -> tuple[float, list[np.ndarray | None]]:
    """Feature-matching loss on layers below ``boundary`` (1-based layer index).

    Returns per-layer gradients w.r.t. the current taps; ``None`` where the
    layer is unconstrained. Frozen taps receive no gradient.
    """
    n_layers = len(current_taps)
    if len(frozen_taps) != n_layers:
        raise DimensionError("tap lists must have one entry per layer")
    if not 1 <= boundary <= n_layers:
        raise DomainError(f"boundary {boundary} outside [1, {n_layers}]")
    if mode == "all_below":
        layers = range(boundary - 1)
    elif mode == "boundary_only":
        layers = [boundary - 2] if boundary >= 2 else []
    else:
        raise ValueError(f"unknown tune mode {mode!r}")
    grads: list[np.ndarray | None] = [None] * n_layers
    total = 0.0
    n = current_taps[0].shape[0]
    for l in layers:
        diff = current_taps[l] - frozen_taps[l]
        total += float(np.sum(diff * diff)) / n
        grads[l] = 2.0 * diff / n
    return total, grads


def loss_proj(actual, predicted) -> tuple[float, np.ndarray]:
    """Mean squared feature error; gradient only w.r.t. ``predicted``."""
    actual = as_matrix(actual, "actual")
    predicted = as_matrix(predicted, "predicted")
    if actual.shape != predicted.shape:
        raise DimensionError(f"actual {actual.shape} vs predicted {predicted.shape}")
    diff = predicted - actual
    n = actual.shape[0]
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n


@dataclass
class AngularCache:
    unit: np.ndarray
    norms: np.ndarray
    cos: np.ndarray
    active: np.ndarray  # pairs whose arccos argument was not clamped or masked


def angular_distance_matrix(features, return_cache: bool = False):
    """Pairwise angles between rows after projection onto the unit sphere."""
    h = as_matrix(features, "features")
    norms = np.linalg.norm(h, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise DegenerateError(f"feature row {int(bad[0])} has (near) zero norm")
    unit = h / norms[:, None]
    raw = unit @ unit.T
    raw = 0.5 * (raw + raw.T)
    cos = np.clip(raw, -ARCCOS_CLAMP, ARCCOS_CLAMP)
    # self-pairs and exact duplicates are at distance zero by definition
    same = np.all(unit[:, None, :] == unit[None, :, :], axis=2)
    A = np.arccos(cos)
    A[same] = 0.0
    if not return_cache:
        return A
    active = (np.abs(raw) < ARCCOS_CLAMP) & ~same
    return A, AngularCache(unit, norms, cos, active)


def angular_backward(dA: np.ndarray, cache: AngularCache) -> np.ndarray:
    """Gradient w.r.t. the raw features given ``dL/dA``."""
    dcos = np.zeros_like(dA)
    act = cache.active
    dcos[act] = -dA[act] / np.sqrt(1.0 - cache.cos[act] ** 2)
    dunit = (dcos + dcos.T) @ cache.unit
    radial = np.sum(dunit * cache.unit, axis=1, keepdims=True)
    return (dunit - cache.unit * radial) / cache.norms[:, None]


def score_distance_matrix(scores, normalization_range: tuple[float, float]) -> np.ndarray:
    low, high = normalization_range
    if not high > low:
        raise DomainError(f"degenerate score range ({low}, {high})")
    y = np.asarray(scores, dtype=np.float64).ravel()
    return np.clip(np.abs(y[:, None] - y[None, :]) / (high - low), 0.0, 1.0)


@dataclass(frozen=True)
class BlockPartition:
    """Old/new split of an ``n x n`` matrix with ``n = b1 + b2``."""

    b1: int
    b2: int

    @property
    def n(self) -> int:
        return self.b1 + self.b2

    def slices(self) -> dict[str, tuple[slice, slice]]:
        old, new = slice(0, self.b1), slice(self.b1, self.n)
        return {
            "old_old": (old, old),
            "old_new": (old, new),
            "new_old": (new, old),
            "new_new": (new, new),
        }

    def blocks(self, m: np.ndarray) -> dict[str, np.ndarray]:
        return {k: m[r, c] for k, (r, c) in self.slices().items()}

    def weights(self) -> np.ndarray:
        """Per-element weight: ``1/n^2`` from the full term plus ``1/|block|``."""
        w = np.full((self.n, self.n), 1.0 / self.n**2)
        for r, c in self.slices().values():
            size = (r.stop - r.start) * (c.stop - c.start)
            if size:
                w[r, c] += 1.0 / size
        return w


def loss_reg(A, S, partition: BlockPartition) -> tuple[float, np.ndarray]:
    """Graph regularizer on ``A/pi`` vs ``S`` over the full matrix and its four blocks.

    Each Frobenius term is a mean over its elements. Returns ``(loss, dL/dA)``.
    """
    A = np.asarray(A, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if A.shape != S.shape or A.shape != (partition.n, partition.n):
        raise DimensionError(f"A {A.shape}, S {S.shape}, partition n={partition.n}")
    diff = A / math.pi - S
    full = float(np.mean(diff * diff))
    blocks = sum(float(np.mean(b * b)) for b in partition.blocks(diff).values() if b.size)
    dA = 2.0 * partition.weights() * diff / math.pi
    return full + blocks, dA


def graph_regularizer(features, scores, b1: int, score_range) -> tuple[float, np.ndarray]:
    """Angular graph regularizer evaluated on raw features; returns ``(loss, dL/dH)``."""
    H = as_matrix(features, "features")
    partition = BlockPartition(b1, H.shape[0] - b1)
    A, cache = angular_distance_matrix(H, return_cache=True)
    S = score_distance_matrix(scores, score_range)
    loss, dA = loss_reg(A, S, partition)
    return loss, angular_backward(dA, cache)


def total_objective(parts: Mapping[str, float], weights: Mapping[str, float] | None = None) -> float:
    """Weighted sum of loss terms; missing weights default to 1."""
    weights = weights or {}
    total = 0.0
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NumericError(f"loss term {name} is not finite ({value})")
        total += weights.get(name, 1.0) * value
    return total
