"""Oracle suites behind ``caql selftest``.

Each suite compares a library routine against an independent, deliberately
naive reimplementation (or a hand-enumerated case) and reports the
properties that failed. The oracles are also imported by the test suite.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from .errors import UndefinedCorrelationError
from .layersel import davies_bouldin
from .memory import ous_indices
from .metrics import srcc
from .model import ManifoldProjector, MLP, Regressor
from .numerics import ParamBlock, finite_diff_check, make_rng

GRAD_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    failures: list[str] = field(default_factory=list)
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures


# -- oracles -----------------------------------------------------------------

def brute_ranks(values) -> list[float]:
    """Rank of each value: 1 + count below + half the other ties."""
    v = list(map(float, values))
    return [1 + sum(b < a for b in v) + (sum(b == a for b in v) - 1) / 2 for a in v]


def brute_srcc(pred, target) -> float:
    rp, rt = brute_ranks(pred), brute_ranks(target)
    n = len(rp)
    mp, mt = sum(rp) / n, sum(rt) / n
    cov = sum((a - mp) * (b - mt) for a, b in zip(rp, rt))
    vp = sum((a - mp) ** 2 for a in rp)
    vt = sum((b - mt) ** 2 for b in rt)
    if vp == 0 or vt == 0:
        raise UndefinedCorrelationError("constant input")
    return cov / math.sqrt(vp * vt)


def brute_davies_bouldin(points, labels) -> float:
    groups: dict = {}
    for p, lab in zip(points, labels):
        groups.setdefault(lab, []).append(np.asarray(p, dtype=float))
    keys = sorted(groups)
    cents = {k: sum(groups[k]) / len(groups[k]) for k in keys}
    disp = {k: sum(math.dist(p, cents[k]) for p in groups[k]) / len(groups[k]) for k in keys}
    worst = []
    for i in keys:
        worst.append(max(
            (disp[i] + disp[j]) / math.dist(cents[i], cents[j]) for j in keys if j != i
        ))
    return sum(worst) / len(worst)


# -- suites ------------------------------------------------------------------

def suite_srcc(srcc_impl: Callable = srcc, cases: int = 500, seed: int = 0) -> SuiteResult:
    res = SuiteResult("srcc")
    hand = [
        (([1, 2, 3, 4], [1, 2, 3, 4]), 1.0),
        (([4, 3, 2, 1], [1, 2, 3, 4]), -1.0),
        (([1, 3, 2], [1, 2, 3]), 0.5),
    ]
    for (p, t), want in hand:
        got = srcc_impl(p, t)
        if got != want:
            res.failures.append(f"srcc({p}, {t}) = {got!r}, expected {want}")
    rng = make_rng(seed, "selftest", "srcc")
    worst, checked = 0.0, 0
    while checked < cases:
        n = int(rng.integers(3, 9))
        # a small value alphabet forces ties
        p = rng.integers(0, 4, n).astype(float)
        t = rng.integers(0, 5, n).astype(float)
        try:
            want = brute_srcc(p, t)
        except UndefinedCorrelationError:
            continue
        worst = max(worst, abs(srcc_impl(p, t) - want))
        checked += 1
    res.detail["max_abs_error"] = worst
    if worst > 1e-12:
        res.failures.append(f"max |srcc - oracle| = {worst:.3e} exceeds 1e-12")
    return res


def suite_davies_bouldin(cases: int = 200, seed: int = 0) -> SuiteResult:
    res = SuiteResult("davies_bouldin")
    hand = davies_bouldin([[0, 0], [0, 1], [4, 0], [4, 1]], [0, 0, 1, 1])
    if hand != 0.25:
        res.failures.append(f"hand case gave {hand!r}, expected 0.25")
    rng = make_rng(seed, "selftest", "db")
    worst, done, rejected = 0.0, 0, 0
    while done < cases:
        k = int(rng.integers(2, 5))
        d = int(rng.integers(1, 5))
        n = int(rng.integers(k, 21))
        labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
        X = rng.standard_normal((n, d)) + 3.0 * rng.standard_normal((k, d))[labels]
        cents = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
        gaps = np.linalg.norm(cents[:, None] - cents[None], axis=2)[np.triu_indices(k, 1)]
        if gaps.min() < 0.5:
            # near-coincident centroids make the index itself ill-conditioned
            rejected += 1
            continue
        done += 1
        worst = max(worst, abs(davies_bouldin(X, labels) - brute_davies_bouldin(X, labels)))
    res.detail["max_abs_error"] = worst
    res.detail["rejected_draws"] = rejected
    if worst > 1e-10:
        res.failures.append(f"max |db - oracle| = {worst:.3e} exceeds 1e-10")
    return res


def _away_from_kinks(mlps, x, margin: float = 1e-6) -> bool:
    for mlp in mlps:
        _, caches = mlp.forward(x)
        for c in caches:
            if c.activation == "relu" and np.any(np.abs(c.pre) < margin):
                return False
        x = mlp.forward(x)[0][-1]
    return True


def gradient_errors(seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error for every loss term.

    Every parameter block holds at most 8 entries; probe points keep relu
    inputs and arccos arguments away from their kinks.
    """
    rng = make_rng(seed, "selftest", "grad")
    out = {}

    # L_D: current predictions through a 2-2-1 regressor
    reg = Regressor.init("g", rng, [2, 2, 1])
    h = rng.standard_normal((3, 2))
    y = rng.uniform(0, 1, 3)
    while not _away_from_kinks([reg], h):
        h = rng.standard_normal((3, 2))

    def f_d():
        pred, c = reg.forward_scores(h)
        loss, dp = L.loss_regression(pred, y)
        reg.backward_scores(dp, c)
        return loss

    out["L_D"] = finite_diff_check(f_d, reg.params(), 1e-6)

    # L_M: replayed features translated by the projector, then regressed
    proj = ManifoldProjector.init("p", rng, [2, 2, 2], zero_last=False)
    old = rng.standard_normal((3, 2))
    while not _away_from_kinks([proj], old):
        old = rng.standard_normal((3, 2))

    def f_m():
        z, pc = proj.project(old)
        pred, rc = reg.forward_scores(z)
        loss, dp = L.loss_regression(pred, y)
        proj.backward_project(reg.backward_scores(dp, rc), pc)
        return loss

    out["L_M"] = finite_diff_check(f_m, proj.params() + reg.params(), 1e-6)

    # L_tune: all layers below the boundary of a 2-2-2-2 backbone
    bb = MLP.init("f", rng, [2, 2, 2, 2])
    x = rng.standard_normal((3, 2))
    while not _away_from_kinks([bb], x):
        x = rng.standard_normal((3, 2))
    frozen = [t + 0.3 * rng.standard_normal(t.shape) for t in bb.forward(x)[0]]

    def f_tune():
        taps, c = bb.forward(x)
        loss, tg = L.loss_tune(taps, frozen, boundary=3)
        bb.backward(tg, c)
        return loss

    out["L_tune"] = finite_diff_check(f_tune, bb.params(), 1e-6)

    # L_proj: projector prediction of detached targets
    z = rng.standard_normal((3, 2))
    while not _away_from_kinks([proj], z):
        z = rng.standard_normal((3, 2))
    target = z + 0.5 * rng.standard_normal(z.shape)

    def f_proj():
        pred, c = proj.project(z)
        loss, d = L.loss_proj(target, pred)
        proj.backward_project(d, c)
        return loss

    out["L_proj"] = finite_diff_check(f_proj, proj.params(), 1e-6)

    # L_reg: through the arccos chain, on a 4x2 feature block
    while True:
        H = ParamBlock("H", rng.standard_normal((4, 2)))
        u = H.value / np.linalg.norm(H.value, axis=1, keepdims=True)
        cos = u @ u.T
        if np.all(np.abs(cos[~np.eye(4, dtype=bool)]) < 1 - 1e-3):
            break
    scores = rng.uniform(0, 1, 4)

    def f_reg():
        loss, dH = L.graph_regularizer(H.value, scores, 2, (0.0, 1.0))
        H.grad += dH
        return loss

    out["L_reg"] = finite_diff_check(f_reg, [H], 1e-6)
    return out


def suite_gradients(seed: int = 0) -> SuiteResult:
    res = SuiteResult("gradients")
    errs = gradient_errors(seed)
    res.detail.update(errs)
    for name, err in errs.items():
        if not err < GRAD_TOL:
            res.failures.append(f"{name}: relative error {err:.3e} >= {GRAD_TOL}")
    return res


def check_ous(scores, M: int, ids=None) -> list[str]:
    """Contract violations of one OUS call (empty list when it holds)."""
    y = np.asarray(scores, dtype=float)
    idx = ous_indices(y, M, ids)
    problems = []
    if len(idx) > M:
        problems.append(f"{len(idx)} picks exceed quota {M}")
    if len(set(idx)) != len(idx):
        problems.append("duplicate picks")
    picked = y[idx]
    if np.any(np.diff(picked) < 0):
        problems.append("picks not sorted by score")
    lo, hi = y.min(), y.max()
    if hi > lo:
        width = (hi - lo) / M
        slot = np.minimum(np.floor((y - lo) / width).astype(int), M - 1)
        occupied = set(slot.tolist())
        chosen = slot[idx].tolist()
        if sorted(chosen) != sorted(occupied):
            problems.append("not exactly one pick per occupied interval")
    elif len(idx) != 1:
        problems.append("constant scores must give one pick")
    return problems


def suite_ous(cases: int = 1000, seed: int = 0) -> SuiteResult:
    res = SuiteResult("ous")
    got = [float(v) for v in np.arange(1, 11)[ous_indices(np.arange(1, 11), 5)]]
    if got != [2.0, 4.0, 5.0, 7.0, 9.0]:
        res.failures.append(f"scores 1..10, M=5 gave {got}, expected [2, 4, 5, 7, 9]")
    rng = make_rng(seed, "selftest", "ous")
    for case in range(cases):
        n = int(rng.integers(1, 30))
        M = int(rng.integers(1, 12))
        y = np.round(rng.uniform(0, 10, n), int(rng.integers(0, 3)))
        problems = check_ous(y, M, [f"id{i}" for i in range(n)])
        if problems:
            res.failures.append(f"case {case} (n={n}, M={M}): {'; '.join(problems)}")
            break
    return res


def run_all(srcc_impl: Callable = srcc) -> list[SuiteResult]:
    suites = [
        lambda: suite_srcc(srcc_impl),
        suite_davies_bouldin,
        suite_gradients,
        suite_ous,
    ]
    results = []
    for fn in suites:
        t0 = time.perf_counter()
        r = fn()
        r.seconds = time.perf_counter() - t0
        results.append(r)
    return results
