"""Session-by-session training for MAGR++ and the reference baselines."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import losses as L
from .errors import ConfigError, NumericError, StateError, UndefinedCorrelationError
from .layersel import LayerAbstractionProfile, profile_layers, score_bins
from .memory import MemoryBank, ous_select, sample_replay_batch
from .metrics import (
    MetricReport,
    PerfMatrix,
    feature_deviation_mse,
    pearson,
    rho_aft,
    rho_avg,
    rho_fwt,
    rmse,
    srcc,
)
from .model import Backbone, ModelConfig, ModelState, snapshot_prev_backbone
from .numerics import ParamBlock, adam_step, make_rng
from .stream import SessionData

log = logging.getLogger(__name__)

METHODS = ("magrpp", "sequential_ft", "joint_training", "naive_feature_replay")
MODES = ("offline", "online")
TUNE_MODES = ("all_below", "boundary_only")
STOP_ON = ("total", "task")
REL_IMPROVEMENT = 1e-4


@dataclass
class TrainConfig:
    method: str = "magrpp"
    mode: str = "offline"
    b1: int = 5
    b2: int = 3
    memory_M: int = 10
    epsilon: float = 0.05
    tune_mode: str = "all_below"
    lambda_tune: float = 1.0
    lambda_proj: float = 1.0
    lambda_reg: float = 1.0
    task_order: list[int] | None = None
    seed: int = 0
    patience: int = 5
    max_epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-5
    freeze_boundary: bool = False
    ous_by_prediction: bool = False
    freeze_projector: bool = False
    boundary_bins: int = 5
    stop_on: str = "task"
    replay_grad_to_projector: bool = False
    reg_grad_to_projector: bool = False
    reg_grad_to_backbone: bool = True
    backbone_widths: tuple[int, ...] = (64, 64, 64, 32)
    regressor_hidden: int = 16

    def validate(self, prefix: str = "train") -> None:
        def bad(name, msg):
            raise ConfigError(f"{prefix}.{name}", msg)

        if self.method not in METHODS:
            bad("method", f"must be one of {METHODS}")
        if self.mode not in MODES:
            bad("mode", f"must be one of {MODES}")
        if self.tune_mode not in TUNE_MODES:
            bad("tune_mode", f"must be one of {TUNE_MODES}")
        for name in ("b1", "b2", "max_epochs"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.memory_M < 0:
            bad("memory_M", "must be >= 0")
        if self.patience < 0:
            bad("patience", "must be >= 0")
        for name in ("lambda_tune", "lambda_proj", "lambda_reg", "epsilon", "weight_decay"):
            if not getattr(self, name) >= 0:
                bad(name, "must be >= 0")
        if not self.lr > 0:
            bad("lr", "must be > 0")
        if self.stop_on not in STOP_ON:
            bad("stop_on", f"must be one of {STOP_ON}")
        if len(self.backbone_widths) < 2:
            bad("backbone_widths", "backbone needs at least two layers")

    def epochs_for(self, session: int) -> int:
        # online runs still give the base session the full budget
        if self.mode == "online" and session > 0:
            return 1
        return self.max_epochs


@dataclass
class SessionResult:
    session: int
    losses: dict[str, float]
    delta_t: float
    srcc: list[float | None]
    epochs: int
    boundary: int | None = None
    deviation_mse: float | None = None
    stale_deviation_mse: float | None = None
    wall_time: float = 0.0


@dataclass
class ExperimentResult:
    perf: PerfMatrix
    random_baselines: list[float]
    report: MetricReport
    sessions: list[SessionResult]
    profiles: list[LayerAbstractionProfile] = field(default_factory=list)
    delta_forgetting_corr: float | None = None
    contracts: dict[str, bool | None] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        perf, band = self.perf.to_lists()
        sessions = []
        for s in self.sessions:
            d = asdict(s)
            if not include_timing:
                d.pop("wall_time")
            sessions.append(d)
        return {
            "perf_matrix": perf,
            "forward_band": band,
            "random_baselines": self.random_baselines,
            "metrics": self.report.to_dict(),
            "sessions": sessions,
            "layer_profiles": [p.to_dict() for p in self.profiles],
            "delta_series": [s.delta_t for s in self.sessions],
            "delta_forgetting_corr": self.delta_forgetting_corr,
            "contracts": dict(self.contracts),
        }


def delta_t_diagnostic(before: np.ndarray | ModelState, after: np.ndarray | ModelState) -> float:
    """Euclidean norm of the parameter change between two states."""
    a = before.parameter_vector() if isinstance(before, ModelState) else np.asarray(before)
    b = after.parameter_vector() if isinstance(after, ModelState) else np.asarray(after)
    if a.shape != b.shape:
        raise ValueError(f"parameter vectors differ in shape: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(b - a))


def safe_srcc(pred, target) -> float:
    """SRCC, with a constant prediction vector scored as 0."""
    try:
        return srcc(pred, target)
    except UndefinedCorrelationError:
        log.warning("constant predictions; SRCC recorded as 0")
        return 0.0


class Learner:
    """Owns one model, its memory bank, and the training loop for one run."""

    def __init__(self, cfg: TrainConfig, d_in: int, score_range: tuple[float, float]):
        cfg.validate()
        self.cfg = cfg
        self.low, self.high = score_range
        self.model_cfg = ModelConfig(d_in, tuple(cfg.backbone_widths), cfg.regressor_hidden)
        self.state = ModelState.init(self.model_cfg, make_rng(cfg.seed, "init"))
        self.initial_backbone = self.state.backbone.copy()
        self.bank = MemoryBank(max(cfg.memory_M, 1))
        self.stale: dict[str, np.ndarray] = {}
        self.raw_inputs: dict[str, np.ndarray] = {}
        self.base_session: SessionData | None = None
        self.boundary: int | None = None
        self.profiles: list[LayerAbstractionProfile] = []
        self.step_log: list[dict[str, float]] = []
        self.record_steps = False
        if cfg.freeze_projector:
            for p in self.state.projector.params():
                p.frozen = True
        probe = make_rng(cfg.seed, "identity-probe").standard_normal((8, self.state.feature_dim))
        if np.max(np.abs(self.state.projector(probe) - probe)) != 0.0:
            raise StateError("projector is not the identity at initialisation")

    # -- helpers -----------------------------------------------------------
    def norm(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.low) / (self.high - self.low)

    def trainable(self) -> list[ParamBlock]:
        params = self.state.backbone.params() + self.state.regressor.params()
        if self.cfg.method == "magrpp":
            params += self.state.projector.params()
        return params

    @property
    def uses_memory(self) -> bool:
        return self.cfg.method in ("magrpp", "naive_feature_replay") and self.cfg.memory_M > 0

    def predict(self, x) -> np.ndarray:
        return self.state.predict(x)

    # -- one optimisation step ---------------------------------------------
    def step(self, x, y, session: int, replay_rng) -> dict[str, float]:
        cfg, st = self.cfg, self.state
        magr = cfg.method == "magrpp" and session > 0
        taps, bcache = st.backbone.forward(x)
        h = taps[-1]
        pred, rcache = st.regressor.forward_scores(h)
        parts = {}
        parts["L_D"], dpred = L.loss_regression(pred, y)
        dh = st.regressor.backward_scores(dpred, rcache)
        tap_grads: list[np.ndarray | None] = [None] * len(taps)

        if magr:
            frozen = st.frozen_prev_backbone.taps(x)
            parts["L_tune"], tg = L.loss_tune(taps, frozen, self.boundary, cfg.tune_mode)
            for l, g in enumerate(tg):
                if g is not None:
                    tap_grads[l] = cfg.lambda_tune * g
            zhat, pcache = st.projector.project(frozen[-1])
            parts["L_proj"], dzhat = L.loss_proj(h, zhat)
            st.projector.backward_project(cfg.lambda_proj * dzhat, pcache)

        replay = sample_replay_batch(self.bank, cfg.b1, replay_rng) if (
            self.uses_memory and session > 0) else []
        if replay:
            old = np.stack([e.feature for e in replay])
            y_old = self.norm([e.score for e in replay])
            if magr:
                old, pcache_old = st.projector.project(old)
            pred_old, rcache_old = st.regressor.forward_scores(old)
            parts["L_M"], dpred_old = L.loss_regression(pred_old, y_old)
            dold = st.regressor.backward_scores(dpred_old, rcache_old)
            if magr:
                joint = np.vstack([old, h])
                parts["L_reg"], dH = L.graph_regularizer(
                    joint, np.concatenate([y_old, y]), len(replay), (0.0, 1.0))
                if cfg.reg_grad_to_backbone:
                    dh = dh + cfg.lambda_reg * dH[len(replay):]
                # by default the projector learns from L_proj alone
                dproj = np.zeros_like(old)
                if cfg.replay_grad_to_projector:
                    dproj += dold
                if cfg.reg_grad_to_projector:
                    dproj += cfg.lambda_reg * dH[: len(replay)]
                if cfg.replay_grad_to_projector or cfg.reg_grad_to_projector:
                    st.projector.backward_project(dproj, pcache_old)

        tap_grads[-1] = dh if tap_grads[-1] is None else tap_grads[-1] + dh
        st.backbone.backward(tap_grads, bcache)
        weights = {"L_tune": cfg.lambda_tune, "L_proj": cfg.lambda_proj, "L_reg": cfg.lambda_reg}
        parts["total"] = L.total_objective(parts, weights)
        adam_step(self.trainable(), cfg.lr, cfg.weight_decay)
        if self.record_steps:
            self.step_log.append(dict(parts))
        return parts

    # -- sessions ----------------------------------------------------------
    def select_boundary(self, session: int) -> int:
        if self.boundary is not None and self.cfg.freeze_boundary:
            return self.boundary
        base = self.base_session
        x, y = base.train_arrays()
        labels = score_bins(y, self.cfg.boundary_bins)
        prof = profile_layers(x, labels, self.initial_backbone, self.state.backbone, self.cfg.epsilon)
        self.profiles.append(prof)
        return prof.boundary

    def fit(self, x, y, epochs: int, session: int) -> tuple[dict[str, float], int]:
        cfg = self.cfg
        batch_rng = make_rng(cfg.seed, "batches", session)
        replay_rng = make_rng(cfg.seed, "replay", session)
        best, stale_epochs, last = math.inf, 0, {}
        epoch = 0
        for epoch in range(1, epochs + 1):
            order = batch_rng.permutation(len(y))
            sums: dict[str, float] = {}
            n_batches = 0
            for start in range(0, len(y), cfg.b2):
                idx = order[start:start + cfg.b2]
                try:
                    parts = self.step(x[idx], y[idx], session, replay_rng)
                except NumericError as exc:
                    raise NumericError(f"session {session}, epoch {epoch}: {exc}") from exc
                if not math.isfinite(parts["total"]):
                    raise NumericError(f"session {session}: non-finite loss {parts}")
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            last = {k: v / n_batches for k, v in sums.items()}
            if cfg.stop_on == "task":
                total = last["L_D"] + last.get("L_M", 0.0)
            else:
                total = last["total"]
            if cfg.patience:
                if best - total < REL_IMPROVEMENT * abs(best):
                    stale_epochs += 1
                else:
                    stale_epochs = 0
                best = min(best, total)
                if stale_epochs >= cfg.patience:
                    break
        return last, epoch

    def run_session(self, session: SessionData, t: int) -> SessionResult:
        cfg, st = self.cfg, self.state
        if t == 0:
            self.base_session = session
        for s in session.train:
            self.raw_inputs[s.id] = s.input
        start = st.parameter_vector()
        boundary = None
        if cfg.method == "magrpp" and t > 0:
            snapshot_prev_backbone(st)
            self.boundary = boundary = self.select_boundary(t)
        x, y = session.train_arrays()
        losses, epochs = self.fit(x, self.norm(y), cfg.epochs_for(t), t)

        dev = stale_dev = None
        if self.uses_memory:
            if cfg.method == "magrpp":
                self.bank.refresh(st.projector, t)
            if self.bank.entries:
                oracle = st.backbone.features(np.stack([self.raw_inputs[e.sample_id] for e in self.bank.entries]))
                dev = feature_deviation_mse(self.bank.features(), oracle)
                stale_dev = feature_deviation_mse(
                    np.stack([self.stale[e.sample_id] for e in self.bank.entries]), oracle)
            new = ous_select(session, st, cfg.memory_M, cfg.ous_by_prediction)
            for e in new:
                self.stale[e.sample_id] = e.feature.copy()
            self.bank.add(new)
        return SessionResult(
            session=t, losses=losses, delta_t=delta_t_diagnostic(start, st.parameter_vector()),
            srcc=[], epochs=epochs, boundary=boundary,
            deviation_mse=dev, stale_deviation_mse=stale_dev,
        )


def run_session_magrpp(learner: Learner, session: SessionData, t: int) -> SessionResult:
    return learner.run_session(session, t)


def run_session_baseline(learner: Learner, session: SessionData, t: int) -> SessionResult:
    return learner.run_session(session, t)


def _order(stream: Sequence[SessionData], order: Sequence[int] | None) -> list[SessionData]:
    if order is None:
        return list(stream)
    if sorted(order) != list(range(len(stream))):
        raise ConfigError("train.task_order", f"must be a permutation of 0..{len(stream) - 1}")
    return [stream[i] for i in order]


def random_baselines(cfg: TrainConfig, stream: Sequence[SessionData], d_in: int) -> list[float]:
    out = []
    mcfg = ModelConfig(d_in, tuple(cfg.backbone_widths), cfg.regressor_hidden)
    for t, sd in enumerate(stream):
        fresh = ModelState.init(mcfg, make_rng(cfg.seed + 1 + t, "init"))
        x, y = sd.test_arrays()
        out.append(safe_srcc(fresh.predict(x), y))
    return out


def stream_range(stream: Sequence[SessionData]) -> tuple[float, float]:
    lo = min(sd.score_range[0] for sd in stream)
    hi = max(sd.score_range[1] for sd in stream)
    return lo, hi


def run_experiment(cfg: TrainConfig, stream: Sequence[SessionData],
                   score_range: tuple[float, float] | None = None) -> ExperimentResult:
    cfg.validate()
    stream = _order(stream, cfg.task_order)
    T = len(stream)
    if T < 2 and cfg.method != "joint_training":
        raise ConfigError("stream.T", "continual methods need at least two sessions")
    d_in = len(stream[0].train[0].input)
    score_range = score_range or stream_range(stream)
    learner = Learner(cfg, d_in, score_range)
    perf = PerfMatrix(T)
    baselines = random_baselines(cfg, stream, d_in)
    tests = [sd.test_arrays() for sd in stream]
    results: list[SessionResult] = []

    if cfg.method == "joint_training":
        x = np.vstack([sd.train_arrays()[0] for sd in stream])
        y = np.concatenate([sd.train_arrays()[1] for sd in stream])
        t0 = time.perf_counter()
        start = learner.state.parameter_vector()
        losses, epochs = learner.fit(x, learner.norm(y), cfg.max_epochs * T, 0)
        row = [safe_srcc(learner.predict(tx), ty) for tx, ty in tests]
        for j, v in enumerate(row):
            perf.set(T - 1, j, v)
        results.append(SessionResult(
            session=T - 1, losses=losses,
            delta_t=delta_t_diagnostic(start, learner.state.parameter_vector()),
            srcc=row, epochs=epochs, wall_time=time.perf_counter() - t0,
        ))
    else:
        for t, sd in enumerate(stream):
            t0 = time.perf_counter()
            res = learner.run_session(sd, t)
            row = [safe_srcc(learner.predict(tx), ty) for tx, ty in tests[: t + 1]]
            for j, v in enumerate(row):
                perf.set(t, j, v)
            if t + 1 < T:
                tx, ty = tests[t + 1]
                perf.set_forward(t + 1, safe_srcc(learner.predict(tx), ty))
            res.srcc = row
            res.wall_time = time.perf_counter() - t0
            results.append(res)

    preds = [learner.predict(tx) for tx, _ in tests]
    targets = [ty for _, ty in tests]
    pooled_pred = np.concatenate(preds)
    pooled_true = np.concatenate(targets)
    lo, hi = score_range
    pooled_scores = lo + pooled_pred * (hi - lo)
    try:
        ravg = rho_avg(pooled_pred, pooled_true)
    except UndefinedCorrelationError:
        ravg = 0.0
    continual = cfg.method != "joint_training"
    report = MetricReport(
        rho_avg=ravg,
        rho_aft=rho_aft(perf.values) if continual else None,
        rho_fwt=rho_fwt(perf.forward, baselines) if continual else None,
        rmse=rmse(pooled_scores, pooled_true, score_range),
        per_session_srcc=[float(v) for v in perf.values[T - 1]],
        deviation_mse=results[-1].deviation_mse,
        stale_deviation_mse=results[-1].stale_deviation_mse,
    )
    return ExperimentResult(
        perf=perf,
        random_baselines=baselines,
        report=report,
        sessions=results,
        profiles=learner.profiles,
        delta_forgetting_corr=_delta_forgetting_corr(perf, results) if continual else None,
        contracts={
            "projector_identity_at_init": True,
            "refresh_once_per_session": (learner.bank._refreshed_for == set(range(T))
                                         if cfg.method == "magrpp" and learner.uses_memory else None),
        },
    )


def _delta_forgetting_corr(perf: PerfMatrix, results: Sequence[SessionResult]) -> float | None:
    """Pearson correlation between the update norm of a session and the drop it caused."""
    deltas, drops = [], []
    for t in range(1, perf.T):
        prev = perf.values[t - 1, :t]
        now = perf.values[t, :t]
        deltas.append(results[t].delta_t)
        drops.append(float(np.mean(prev - now)))
    if len(deltas) < 2:
        return None
    try:
        return pearson(deltas, drops)
    except UndefinedCorrelationError:
        return None
