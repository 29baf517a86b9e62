"""Feature replay bank with ordered uniform sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, ParseError, StateError
from .model import ManifoldProjector, ModelState
from .stream import SessionData


@dataclass
class MemoryEntry:
    feature: np.ndarray
    score: float
    origin_session: int
    sample_id: str = ""


def ous_indices(scores, M: int, ids: Sequence[str] | None = None) -> list[int]:
    """Indices picked by ordered uniform sampling, in ascending score order.

    The score range is cut into ``M`` equal intervals; each occupied interval
    contributes the sample nearest its midpoint (ties: lower score, then id).
    """
    y = np.asarray(scores, dtype=np.float64)
    if y.size == 0:
        raise DomainError("cannot sample from an empty session")
    if M < 1:
        raise DomainError("M must be >= 1")
    ids = list(ids) if ids is not None else [""] * y.size
    lo, hi = float(y.min()), float(y.max())
    if hi == lo:
        return [min(range(y.size), key=lambda i: ids[i])]
    width = (hi - lo) / M
    slot = np.minimum(np.floor((y - lo) / width).astype(int), M - 1)
    picked = []
    for k in range(M):
        members = np.flatnonzero(slot == k)
        if members.size == 0:
            continue
        mid = lo + (k + 0.5) * width
        best = min(members, key=lambda i: (abs(y[i] - mid), y[i], ids[i]))
        picked.append(int(best))
    return sorted(picked, key=lambda i: (y[i], ids[i]))


def ous_select(session: SessionData, model: ModelState, M: int,
               by_prediction: bool = False) -> list[MemoryEntry]:
    """Pick up to ``M`` prototypes from ``session`` and extract their features.

    Features come from the model's current backbone. With ``by_prediction``
    the model's predicted scores drive the ordering instead of the labels; the
    stored score is always the label.
    """
    if not session.train:
        raise DomainError(f"session {session.session_index} has no training samples")
    x, y = session.train_arrays()
    feats = model.backbone.features(x)
    key = model.regressor.predict(feats) if by_prediction else y
    idx = ous_indices(key, M, [s.id for s in session.train])
    return [
        MemoryEntry(feats[i].copy(), float(y[i]), session.session_index, session.train[i].id)
        for i in idx
    ]


class MemoryBank:
    def __init__(self, per_session_quota: int = 10):
        self.per_session_quota = per_session_quota
        self.entries: list[MemoryEntry] = []
        self._refreshed_for: set[int] = set()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def feature_dim(self) -> int | None:
        return self.entries[0].feature.size if self.entries else None

    def add(self, entries: Sequence[MemoryEntry]) -> None:
        entries = sorted(entries, key=lambda e: (e.origin_session, e.score))
        for e in entries:
            if self.feature_dim is not None and e.feature.size != self.feature_dim:
                raise DimensionError("memory features must share one dimension")
            count = sum(1 for x in self.entries if x.origin_session == e.origin_session)
            if count >= self.per_session_quota:
                raise StateError(
                    f"quota of {self.per_session_quota} reached for session {e.origin_session}"
                )
            self.entries.append(e)
        self.entries.sort(key=lambda e: (e.origin_session, e.score))

    def features(self) -> np.ndarray:
        return np.stack([e.feature for e in self.entries])

    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries])

    def refresh(self, projector: ManifoldProjector, session: int) -> None:
        """Replace every stored feature by its projection; once per session."""
        if session in self._refreshed_for:
            raise StateError(f"memory already refreshed for session {session}")
        if self.entries:
            feats = self.features()
            if feats.shape[1] != projector.layers[0].d_in:
                raise StateError(
                    f"bank features have width {feats.shape[1]}, projector expects "
                    f"{projector.layers[0].d_in}"
                )
            new = projector(feats)
            for e, f in zip(self.entries, new):
                e.feature = f.copy()
        self._refreshed_for.add(session)

    def export_csv(self, path) -> None:
        d = self.feature_dim or 0
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["origin_session", "score", *[f"f{i}" for i in range(d)]])
            for e in self.entries:
                w.writerow([e.origin_session, repr(e.score), *[repr(float(v)) for v in e.feature]])

    @classmethod
    def import_csv(cls, path, per_session_quota: int = 10) -> "MemoryBank":
        bank = cls(per_session_quota)
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[:2] != ["origin_session", "score"]:
                raise ParseError(f"{path}: expected header origin_session,score,f0,...")
            entries = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    entries.append(MemoryEntry(
                        np.array([float(v) for v in row[2:]]), float(row[1]), int(row[0])
                    ))
                except (ValueError, IndexError) as exc:
                    raise ParseError(f"{path}:{lineno}: {exc}") from None
        bank.add(entries)
        return bank


def sample_replay_batch(bank: MemoryBank, b1: int, rng: np.random.Generator) -> list[MemoryEntry]:
    """Uniform draw of ``b1`` entries without replacement (all when the bank is smaller)."""
    if not bank.entries:
        return []
    n = len(bank.entries)
    if b1 >= n:
        idx = rng.permutation(n)
    else:
        idx = rng.choice(n, size=b1, replace=False)
    return [bank.entries[i] for i in idx]


def refresh_memory(bank: MemoryBank, projector: ManifoldProjector, session: int) -> None:
    bank.refresh(projector, session)
