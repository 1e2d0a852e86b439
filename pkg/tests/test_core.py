import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hawkes_gc.core import (
    DataError,
    Dataset,
    EventSequence,
    FitConfig,
    HawkesParams,
    ParamsError,
    read_events,
    read_params,
    validate_dataset,
    write_events,
    write_params,
)


def _two_type():
    seqs = [
        EventSequence.from_events("a", 10.0, [(0.5, 0), (1.5, 1), (4.0, 0)]),
        EventSequence.from_events("b", 8.0, [(2.0, 1)]),
    ]
    return Dataset.of(seqs, 2)


def test_valid_dataset_has_no_violations():
    assert validate_dataset(_two_type()) == []


def test_unordered_times_flagged_once():
    ds = Dataset.of([EventSequence.from_events("s", 5.0, [(3.0, 0), (1.0, 0)])], 1)
    v = validate_dataset(ds)
    assert [x.rule for x in v] == ["unordered times"]
    assert v[0].seq_id == "s" and v[0].index == 1


def test_mark_out_of_range_flagged_once():
    ds = Dataset.of([EventSequence.from_events("s", 5.0, [(1.0, 5)])], 3)
    v = validate_dataset(ds)
    assert [(x.rule, x.index) for x in v] == [("mark out of range", 0)]


def test_empty_dataset_is_a_violation():
    assert [v.rule for v in validate_dataset(Dataset.of([], 2))] == ["empty dataset"]


def test_simultaneous_pairs():
    seq = EventSequence.from_events("s", 5.0, [(1.0, 0), (1.0, 1), (2.0, 0)])
    assert seq.simultaneous_pairs() == [(0, 1)]


times_st = st.lists(st.floats(0, 100, allow_nan=False, allow_subnormal=False), max_size=20)


@st.composite
def datasets(draw):
    d = draw(st.integers(1, 4))
    seqs = []
    for k in range(draw(st.integers(1, 4))):
        times = sorted(draw(times_st))
        marks = draw(st.lists(st.integers(0, d - 1), min_size=len(times), max_size=len(times)))
        horizon = max(times, default=0.0) + draw(st.floats(0, 10, allow_subnormal=False))
        seqs.append(EventSequence(f"s{k}", horizon, np.array(times), np.array(marks)))
    return Dataset.of(seqs, d)


@settings(max_examples=60, deadline=None)
@given(datasets())
def test_events_round_trip_is_exact(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("ev") / "events.jsonl"
    write_events(ds, path)
    assert read_events(path) == ds
    assert validate_dataset(ds) == []


@settings(max_examples=40, deadline=None)
@given(datasets())
def test_csv_round_trip_keeps_times_and_marks(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("ev") / "events.csv"
    write_events(ds, path)
    back = read_events(path)
    for a, b in zip(ds.sequences, back.sequences):
        assert np.array_equal(a.times, b.times) and np.array_equal(a.marks, b.marks)
        assert a.horizon == b.horizon


MUTATIONS = {
    "unordered times": lambda t, m, d, h: (np.concatenate([t, [t[-1] - 1.0]]), np.append(m, 0), h),
    "mark out of range": lambda t, m, d, h: (t, np.concatenate([m[:-1], [d]]), h),
    "time out of range": lambda t, m, d, h: (t, m, t[-1] / 2),
}


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.lists(st.floats(1, 50, allow_subnormal=False), min_size=2, max_size=10, unique=True),
       st.sampled_from(sorted(MUTATIONS)), st.integers(0, 3))
def test_validation_finds_exactly_the_injected_breach(d, times, rule, victim):
    times = np.sort(np.array(times))
    marks = np.zeros(times.size, dtype=np.int64)
    seqs = [EventSequence(f"s{k}", 100.0, times, marks) for k in range(4)]
    t, m, h = MUTATIONS[rule](times, marks, d, 100.0)
    seqs[victim] = EventSequence(f"s{victim}", h, t, m)
    found = validate_dataset(Dataset.of(seqs, d))
    assert {(v.seq_id, v.rule) for v in found} == {(f"s{victim}", rule)}


def test_non_numeric_time_names_the_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"d": 1, "type_names": ["x"]}\n{"seq_id": "a", "horizon": 5, "events": [["oops", 0]]}\n')
    with pytest.raises(DataError, match=r"bad.jsonl:2"):
        read_events(path)


def test_inconsistent_d_is_structural_error(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"d": 2}\n{"seq_id": "a", "d": 3, "horizon": 5, "events": []}\n')
    with pytest.raises(DataError, match="d=3"):
        read_events(path)


def test_empty_sequence_is_legal(tmp_path):
    path = tmp_path / "e.jsonl"
    path.write_text('{"d": 1}\n{"seq_id": "a", "horizon": 10, "events": []}\n')
    ds = read_events(path)
    assert len(ds.sequences[0]) == 0 and ds.sequences[0].horizon == 10.0


def test_params_round_trip(tmp_path, sign_example):
    path = tmp_path / "p.json"
    write_params(sign_example, path)
    assert read_params(path) == sign_example


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_random_params_round_trip(tmp_path_factory, d, seed):
    rng = np.random.default_rng(seed)
    p = HawkesParams(rng.uniform(0, 1, d), rng.normal(size=(d, d)), rng.uniform(0.01, 5))
    path = tmp_path_factory.mktemp("p") / "p.json"
    write_params(p, path)
    assert read_params(path) == p


def test_zero_beta_rejected(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"d": 1, "beta": 0, "mu": [0.1], "A": [[0.0]]}))
    with pytest.raises(ParamsError, match="beta"):
        read_params(path)


def test_wrong_shape_rejected(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"d": 2, "beta": 1, "mu": [0.1, 0.1], "A": [[0, 0, 0], [0, 0, 0]]}))
    with pytest.raises(ParamsError, match="shape"):
        read_params(path)


def test_fit_config_invariants():
    with pytest.raises(ValueError, match="gamma0"):
        FitConfig(gamma0=0.1, gamma2=0.05)
    with pytest.raises(ValueError, match="phase1_halve_every"):
        FitConfig(phase1_iters=10, phase1_halve_every=20)
    cfg = FitConfig()
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
