import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from caql.errors import DomainError, StateError
from caql.memory import MemoryBank, MemoryEntry, ous_indices, ous_select, sample_replay_batch
from caql.model import ManifoldProjector, ModelConfig, ModelState
from caql.numerics import make_rng
from caql.selftest import check_ous
from caql.stream import Sample, SessionData

scores = st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=40)


def test_ous_midpoint_enumeration():
    y = np.arange(1.0, 11.0)
    assert y[ous_indices(y, 5)].tolist() == [2, 4, 5, 7, 9]


def test_ous_small_session_keeps_everything():
    assert sorted(ous_indices([1.0, 5.0, 9.0], 10)) == [0, 1, 2]


def test_ous_constant_scores_give_one_entry():
    assert ous_indices([3.0] * 6, 4, [f"s{i}" for i in range(6)]) == [0]


def test_ous_errors():
    with pytest.raises(DomainError):
        ous_indices([], 3)
    with pytest.raises(DomainError):
        ous_indices([1.0], 0)


@given(scores, st.integers(1, 12))
def test_ous_contract(y, M):
    assert check_ous(y, M, [f"id{i}" for i in range(len(y))]) == []


@given(st.integers(1, 10), st.integers(0, 10_000))
def test_ous_gap_bound_when_all_intervals_occupied(M, seed):
    rng = np.random.default_rng(seed)
    # two points per interval guarantees full occupancy
    edges = np.linspace(0, 10, M + 1)
    y = np.concatenate([rng.uniform(a, b, 2) for a, b in zip(edges[:-1], edges[1:])])
    y = np.concatenate([y, [0.0, 10.0]])
    picked = np.sort(y[ous_indices(y, M)])
    assert len(picked) == M
    if M > 1:
        assert np.diff(picked).max() <= 2 * 10 / M + 1e-12


def session(scores, t=0, d=4):
    rng = make_rng(0, "mem", t)
    samples = [Sample(f"s{t}-{i}", rng.standard_normal(d), float(s), t) for i, s in enumerate(scores)]
    return SessionData(t, samples, [], (min(scores), max(scores)))


def model(d=4):
    return ModelState.init(ModelConfig(d, (6, 5)), make_rng(0, "init"))


def test_ous_select_uses_current_backbone_features():
    sd, st_ = session(np.linspace(0, 9, 10)), model()
    entries = ous_select(sd, st_, 5)
    x, _ = sd.train_arrays()
    feats = st_.backbone.features(x)
    assert [e.score for e in entries] == sorted(e.score for e in entries)
    for e in entries:
        i = int(e.sample_id.split("-")[1])
        assert np.array_equal(e.feature, feats[i])
        assert e.origin_session == 0


def test_ous_select_empty_session():
    with pytest.raises(DomainError):
        ous_select(SessionData(0, [], [], (0, 1)), model(), 3)


def bank_of(n, quota=10, d=3):
    bank = MemoryBank(quota)
    rng = np.random.default_rng(0)
    bank.add([MemoryEntry(rng.standard_normal(d), float(i), i // quota, f"e{i}") for i in range(n)])
    return bank


def test_quota_enforced():
    bank = bank_of(10)
    with pytest.raises(StateError):
        bank.add([MemoryEntry(np.zeros(3), 99.0, 0)])
    bank.add([MemoryEntry(np.zeros(3), 99.0, 1)])
    assert len(bank) == 11


def test_replay_draws():
    bank = bank_of(3)
    assert len(sample_replay_batch(bank, 5, make_rng(0, "r"))) == 3
    assert sample_replay_batch(MemoryBank(), 5, make_rng(0, "r")) == []
    a = [e.sample_id for e in sample_replay_batch(bank_of(10), 2, make_rng(4, "r"))]
    b = [e.sample_id for e in sample_replay_batch(bank_of(10), 2, make_rng(4, "r"))]
    assert a == b


def test_replay_uniformity():
    bank = bank_of(10)
    rng = make_rng(0, "uniform")
    counts = {e.sample_id: 0 for e in bank.entries}
    n = 10_000
    for _ in range(n):
        counts[sample_replay_batch(bank, 1, rng)[0].sample_id] += 1
    sigma = np.sqrt(n * 0.1 * 0.9)
    assert all(abs(c - n / 10) <= 3 * sigma for c in counts.values())


def test_refresh_identity_and_once_per_session():
    bank = bank_of(5)
    before = bank.features().copy()
    proj = ManifoldProjector.init("p", make_rng(0, "p"), [3, 3, 3])
    bank.refresh(proj, 1)
    assert np.array_equal(bank.features(), before)
    with pytest.raises(StateError):
        bank.refresh(proj, 1)
    bank.refresh(proj, 2)


def test_refresh_preserves_scores_and_order():
    bank = bank_of(6)
    proj = ManifoldProjector.init("p", make_rng(0, "p"), [3, 4, 3], zero_last=False)
    ids = [e.sample_id for e in bank.entries]
    ys = bank.scores().copy()
    old = bank.features().copy()
    bank.refresh(proj, 1)
    assert [e.sample_id for e in bank.entries] == ids
    assert np.array_equal(bank.scores(), ys)
    assert np.allclose(bank.features(), proj(old))


def test_refresh_dimension_mismatch():
    bank = bank_of(2)
    with pytest.raises(StateError):
        bank.refresh(ManifoldProjector.init("p", make_rng(0, "p"), [4, 4, 4]), 1)


def test_csv_round_trip(tmp_path):
    bank = bank_of(13)
    bank.export_csv(tmp_path / "bank.csv")
    back = MemoryBank.import_csv(tmp_path / "bank.csv")
    assert np.array_equal(back.features(), bank.features())
    assert np.array_equal(back.scores(), bank.scores())
    assert [e.origin_session for e in back.entries] == [e.origin_session for e in bank.entries]
