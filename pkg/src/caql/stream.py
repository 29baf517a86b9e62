"""Grade-incremental session streams: synthetic generation and CSV ingestion."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .numerics import make_rng

OBSERVATION_NOISE_STD = 0.05


@dataclass
class Sample:
    id: str
    input: np.ndarray
    score: float
    grade: int


@dataclass
class SessionData:
    session_index: int
    train: list[Sample]
    test: list[Sample]
    score_range: tuple[float, float]

    @staticmethod
    def _stack(samples):
        if not samples:
            return np.zeros((0, 0)), np.zeros(0)
        return np.stack([s.input for s in samples]), np.array([s.score for s in samples])

    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self._stack(self.train)

    def test_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self._stack(self.test)


@dataclass
class StreamConfig:
    G: int = 5
    S: int = 20
    T: int | None = None
    d_in: int = 16
    test_per_session: int = 20
    score_low: float = 0.0
    score_high: float = 100.0
    shift_strength: float = 0.5
    label_noise_std: float = 0.0
    label_fraction: float = 1.0
    seed: int = 0
    lift_normalization: str = "global"

    @property
    def sessions(self) -> int:
        return self.G if self.T is None else self.T

    def validate(self, prefix: str = "stream") -> None:
        def bad(name, msg):
            raise ConfigError(f"{prefix}.{name}", msg)

        if self.G < 2:
            bad("G", "must be >= 2")
        if self.S < 2:
            bad("S", "must be >= 2")
        if not 2 <= self.sessions <= self.G:
            bad("T", f"must lie in [2, G={self.G}]")
        if self.d_in < 1:
            bad("d_in", "must be >= 1")
        if self.test_per_session < 2:
            bad("test_per_session", "must be >= 2")
        if not self.score_low < self.score_high:
            bad("score_high", "must exceed score_low")
        if self.shift_strength < 0:
            bad("shift_strength", "must be >= 0")
        if self.label_noise_std < 0:
            bad("label_noise_std", "must be >= 0")
        if not 0 < self.label_fraction <= 1:
            bad("label_fraction", "must lie in (0, 1]")

    def grade_edges(self) -> np.ndarray:
        return np.linspace(self.score_low, self.score_high, self.G + 1)


def score_lift(y_norm, d_in: int) -> np.ndarray:
    """Fixed nonlinear lift of normalised scores, tiled to ``d_in`` columns."""
    y = np.asarray(y_norm, dtype=np.float64).reshape(-1, 1)
    tp = 2.0 * math.pi * y
    basis = np.hstack([
        np.ones_like(y), y, y**2, y**3,
        np.sin(tp), np.cos(tp), np.sin(2 * tp), np.cos(2 * tp),
    ])
    reps = -(-d_in // basis.shape[1])
    return np.tile(basis, (1, reps))[:, :d_in]


def mixing_matrices(cfg: StreamConfig) -> list[np.ndarray]:
    """Per-session mixing ``M_t = M_0 + t * shift * D_t`` with ``||D_t|| = ||M_0||``."""
    rng0 = make_rng(cfg.seed, "stream", "mix0")
    m0 = rng0.standard_normal((cfg.d_in, cfg.d_in)) / math.sqrt(cfg.d_in)
    norm0 = np.linalg.norm(m0)
    out = []
    for t in range(cfg.sessions):
        d = make_rng(cfg.seed, "stream", "shift", t).standard_normal((cfg.d_in, cfg.d_in))
        d *= norm0 / np.linalg.norm(d)
        out.append(m0 + t * cfg.shift_strength * d)
    return out


def generate_synthetic_stream(cfg: StreamConfig) -> list[SessionData]:
    cfg.validate()
    edges = cfg.grade_edges()
    width = edges[1] - edges[0]
    span = cfg.score_high - cfg.score_low
    mats = mixing_matrices(cfg)
    n_keep = math.ceil(cfg.label_fraction * cfg.S)
    sessions = []
    for t in range(cfg.sessions):
        rng = make_rng(cfg.seed, "stream", "session", t)
        lo, hi = float(edges[t]), float(edges[t + 1])

        def draw(n, tag):
            y = rng.uniform(lo, hi, size=n)
            if cfg.lift_normalization == "grade":
                y_hat = (y - lo) / (hi - lo)
            else:
                y_hat = (y - cfg.score_low) / span
            x = score_lift(y_hat, cfg.d_in) @ mats[t].T
            x += OBSERVATION_NOISE_STD * rng.standard_normal(x.shape)
            return [Sample(f"s{t}-{tag}{i}", x[i], float(y[i]), t) for i in range(n)]

        train = draw(cfg.S, "tr")
        test = draw(cfg.test_per_session, "te")
        if cfg.label_noise_std > 0:
            noise = rng.standard_normal(len(train)) * cfg.label_noise_std * width
            upper = np.nextafter(hi, lo)
            for s, e in zip(train, noise):
                s.score = float(np.clip(s.score + e, lo, upper))
        if n_keep < len(train):
            keep = np.sort(rng.choice(len(train), size=n_keep, replace=False))
            train = [train[i] for i in keep]
        sessions.append(SessionData(t, train, test, (lo, hi)))
    return sessions


def grade_of(score: float, edges: Sequence[float]) -> int:
    g = int(np.searchsorted(edges, score, side="right")) - 1
    return min(max(g, 0), len(edges) - 2)


def _row_is_test(sample_id: str) -> bool:
    # deterministic 75/25 split keyed on the id
    return hashlib.sha256(sample_id.encode()).digest()[0] % 4 == 0


def load_feature_csv(
    path,
    grades: int | None = None,
    score_range: tuple[float, float] | None = None,
    expected_sessions: Sequence[int] | None = None,
) -> list[SessionData]:
    """Read ``id,session,score,f0..f{d-1}[,split]`` rows into sessions.

    Without a ``split`` column rows are assigned to test by a hash of the id
    (about one in four). ``grades`` partitions ``score_range`` (default: the
    observed min/max) into equal intervals for the grade field.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header required") from None
        header = [h.strip() for h in header]
        for col in ("id", "session", "score"):
            if col not in header:
                raise ParseError(f"{path}: header is missing column {col!r}")
        fcols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        fcols.sort(key=lambda i: int(header[i][1:]))
        if not fcols:
            raise ParseError(f"{path}: header has no feature columns f0..")
        i_id, i_sess, i_score = (header.index(c) for c in ("id", "session", "score"))
        i_split = header.index("split") if "split" in header else None
        allowed = None if expected_sessions is None else set(expected_sessions)

        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                session = int(row[i_sess])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: session {row[i_sess]!r} is not an integer") from None
            if session < 0 or (allowed is not None and session not in allowed):
                raise ParseError(f"{path}:{lineno}: unknown session id {session}")
            try:
                score = float(row[i_score])
                feats = np.array([float(row[i]) for i in fcols])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            if not math.isfinite(score) or not np.all(np.isfinite(feats)):
                raise ParseError(f"{path}:{lineno}: non-finite score or feature")
            if i_split is None:
                split = "test" if _row_is_test(row[i_id]) else "train"
            else:
                split = row[i_split].strip()
                if split not in ("train", "test"):
                    raise ParseError(f"{path}:{lineno}: split must be train or test, got {split!r}")
            rows.append((row[i_id], session, score, feats, split))

    if not rows:
        raise ParseError(f"{path}: no data rows")
    if score_range is None:
        scores = [r[2] for r in rows]
        score_range = (min(scores), max(scores))
    n_grades = grades or len({r[1] for r in rows})
    edges = np.linspace(score_range[0], score_range[1], n_grades + 1)

    by_session: dict[int, SessionData] = {}
    for sid, session, score, feats, split in rows:
        sd = by_session.setdefault(session, SessionData(session, [], [], (math.inf, -math.inf)))
        sample = Sample(sid, feats, score, grade_of(score, edges))
        (sd.test if split == "test" else sd.train).append(sample)
        lo, hi = sd.score_range
        sd.score_range = (min(lo, score), max(hi, score))
    return [by_session[k] for k in sorted(by_session)]


def save_feature_csv(sessions: Sequence[SessionData], path) -> None:
    """Write sessions in the ingestion schema, with an explicit split column."""
    d = len((sessions[0].train or sessions[0].test)[0].input)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "session", "score", *[f"f{i}" for i in range(d)], "split"])
        for sd in sessions:
            for split, samples in (("train", sd.train), ("test", sd.test)):
                for s in samples:
                    w.writerow([s.id, sd.session_index, repr(s.score),
                                *[repr(float(v)) for v in s.input], split])


def stream_bytes(sessions: Sequence[SessionData]) -> bytes:
    """Canonical byte serialisation, used for determinism checks."""
    h = hashlib.sha256()
    for sd in sessions:
        h.update(repr((sd.session_index, sd.score_range)).encode())
        for s in sd.train + sd.test:
            h.update(s.id.encode())
            h.update(np.float64(s.score).tobytes())
            h.update(np.ascontiguousarray(s.input, dtype=np.float64).tobytes())
            h.update(str(s.grade).encode())
    return h.digest()
