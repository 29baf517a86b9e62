import copy
import json
import math

import numpy as np
import pytest

from caql.errors import ConfigError, NumericError
from caql.memory import ous_indices
from caql.stream import StreamConfig, generate_synthetic_stream
from caql.trainer import Learner, TrainConfig, delta_t_diagnostic, run_experiment

SMALL = StreamConfig(G=4, S=8, test_per_session=6, seed=1)
FAST = dict(max_epochs=6, backbone_widths=(16, 16, 16, 8), regressor_hidden=8)


def small_stream(**kw):
    return generate_synthetic_stream(StreamConfig(**{**SMALL.__dict__, **kw}))


def run_logged(cfg, stream):
    learner = Learner(cfg, len(stream[0].train[0].input), (0.0, 100.0))
    learner.record_steps = True
    results = [learner.run_session(sd, t) for t, sd in enumerate(stream)]
    return learner, results


def test_base_session_uses_only_the_task_loss():
    stream = small_stream()
    learner = Learner(TrainConfig(**FAST), 16, (0.0, 100.0))
    learner.record_steps = True
    learner.run_session(stream[0], 0)
    assert all(set(s) == {"L_D", "total"} for s in learner.step_log)
    assert learner.state.frozen_prev_backbone is None
    assert 0 < len(learner.bank) <= 10


def test_bank_size_follows_occupied_intervals():
    stream = small_stream()
    learner, _ = run_logged(TrainConfig(memory_M=4, **FAST), stream)
    expected = sum(len(ous_indices([s.score for s in sd.train], 4)) for sd in stream)
    assert len(learner.bank) == expected
    # one refresh per session, the base session's on an empty bank
    assert learner.bank._refreshed_for == set(range(len(stream)))


def test_naive_replay_equals_magrpp_with_identity_projector():
    stream = small_stream()
    a, _ = run_logged(TrainConfig(method="naive_feature_replay", **FAST), stream)
    b, _ = run_logged(TrainConfig(method="magrpp", freeze_projector=True, lambda_tune=0.0,
                                  lambda_reg=0.0, **FAST), stream)
    assert len(a.step_log) == len(b.step_log)
    for x, y in zip(a.step_log, b.step_log):
        assert x["L_D"] == y["L_D"]
        assert x.get("L_M") == y.get("L_M")


def test_magrpp_without_history_equals_sequential():
    stream = small_stream()
    a, _ = run_logged(TrainConfig(method="sequential_ft", **FAST), stream)
    b, _ = run_logged(TrainConfig(method="magrpp", memory_M=0, lambda_tune=0.0, lambda_proj=0.0,
                                  lambda_reg=0.0, **FAST), stream)
    assert [s["L_D"] for s in a.step_log] == [s["L_D"] for s in b.step_log]
    assert len(a.bank) == len(b.bank) == 0


def no_shift_session_pair(**cfg):
    s0 = generate_synthetic_stream(StreamConfig(seed=0, shift_strength=0.0))[0]
    s1 = copy.deepcopy(s0)
    s1.session_index = 1
    learner = Learner(TrainConfig(**cfg), 16, (0.0, 100.0))
    learner.run_session(s0, 0)
    res = learner.run_session(s1, 1)
    x, _ = s0.train_arrays()
    z = learner.state.frozen_prev_backbone.features(x)
    p = learner.state.projector(z) - z
    ratio = float(np.mean(np.linalg.norm(p, axis=1) / np.linalg.norm(z, axis=1)))
    return res, ratio


def test_no_shift_session_keeps_projector_near_identity():
    res, ratio = no_shift_session_pair()
    assert res.losses["L_tune"] < 1e-3
    assert ratio < 0.1


def test_no_shift_projector_without_graph_term():
    # control: the graph term is what moves the backbone on stationary data
    res, ratio = no_shift_session_pair(lambda_reg=0.0)
    assert res.losses["L_tune"] < 1e-3
    assert ratio < 0.1


@pytest.mark.parametrize("seed", range(3))
def test_stability_weight_does_not_raise_tune_loss(seed):
    stream = generate_synthetic_stream(StreamConfig(seed=seed))
    off = run_experiment(TrainConfig(seed=seed, lambda_tune=0.0), stream)
    on = run_experiment(TrainConfig(seed=seed, lambda_tune=1.0), stream)
    assert on.sessions[-1].losses["L_tune"] <= off.sessions[-1].losses["L_tune"]


def test_joint_training_fills_one_row():
    res = run_experiment(TrainConfig(method="joint_training", **FAST), small_stream())
    defined = [i for i, row in enumerate(res.perf.values) if not np.all(np.isnan(row))]
    assert defined == [3]
    assert res.report.rho_aft is None and res.report.rho_avg is not None


def test_sequential_ignores_the_bank():
    learner, _ = run_logged(TrainConfig(method="sequential_ft", **FAST), small_stream())
    assert len(learner.bank) == 0


@pytest.mark.parametrize("method", ["magrpp", "sequential_ft", "naive_feature_replay"])
def test_perf_matrix_and_band_complete(method):
    res = run_experiment(TrainConfig(method=method, **FAST), small_stream())
    assert res.perf.lower_triangle_complete()
    assert not np.isnan(res.perf.forward[1:]).any() and np.isnan(res.perf.forward[0])
    band = res.perf.forward
    want = np.mean([band[t] - res.random_baselines[t] for t in range(1, 4)])
    assert res.report.rho_fwt == pytest.approx(want, abs=1e-15)


def test_minimal_two_session_run():
    res = run_experiment(TrainConfig(**FAST), small_stream(T=2))
    r = res.report
    assert all(math.isfinite(v) for v in (r.rho_avg, r.rho_aft, r.rho_fwt, r.rmse))


def test_runs_are_deterministic():
    stream = small_stream()
    a = run_experiment(TrainConfig(seed=4, **FAST), stream).to_dict()
    b = run_experiment(TrainConfig(seed=4, **FAST), stream).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_online_mode_uses_one_epoch_after_the_base_session():
    res = run_experiment(TrainConfig(mode="online", **FAST), small_stream())
    assert [s.epochs for s in res.sessions][1:] == [1, 1, 1]


def test_task_order_permutes_sessions():
    stream = small_stream()
    res = run_experiment(TrainConfig(task_order=[3, 2, 1, 0], **FAST), stream)
    assert res.perf.lower_triangle_complete()
    with pytest.raises(ConfigError, match="task_order"):
        run_experiment(TrainConfig(task_order=[0, 0, 1, 2], **FAST), stream)


@pytest.mark.parametrize("field,value", [("lambda_reg", -1.0), ("b1", 0), ("method", "ewc"),
                                         ("mode", "batch"), ("lr", 0.0)])
def test_config_validation_names_field(field, value):
    with pytest.raises(ConfigError) as exc:
        TrainConfig(**{field: value}).validate()
    assert exc.value.path == f"train.{field}"


def test_non_finite_loss_aborts_session(monkeypatch):
    import caql.trainer as tr

    monkeypatch.setattr(tr.L, "loss_regression", lambda p, t: (math.nan, np.zeros(len(p))))
    with pytest.raises(NumericError, match="session 0"):
        run_experiment(TrainConfig(**FAST), small_stream())


def test_delta_t_diagnostic():
    assert delta_t_diagnostic(np.array([1.0, 2.0]), np.array([4.0, 6.0])) == 5.0
    learner = Learner(TrainConfig(**FAST), 16, (0.0, 100.0))
    before = learner.state.parameter_vector()
    assert delta_t_diagnostic(before, learner.state.parameter_vector()) == 0.0
    x = np.ones((3, 16))
    learner.step(x, np.array([0.1, 0.2, 0.3]), 0, None)
    assert delta_t_diagnostic(before, learner.state) > 0.0
    with pytest.raises(ValueError):
        delta_t_diagnostic(np.zeros(2), np.zeros(3))


def test_session_results_record_diagnostics():
    res = run_experiment(TrainConfig(**FAST), small_stream())
    assert all(s.delta_t >= 0 for s in res.sessions)
    assert [s.boundary is None for s in res.sessions] == [True, False, False, False]
    assert res.sessions[-1].deviation_mse is not None
