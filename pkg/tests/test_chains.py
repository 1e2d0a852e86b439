import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hawkes_gc.chains import (
    DEFAULT_MODE,
    ChainLimitError,
    ContingencyTable,
    NoEligibleSequences,
    build_table,
    calibrate_mode,
    chain_occurs,
    enumerate_chains,
    fisher_exact,
    floor3,
    load_fisher_fixtures,
    margin_tables,
    point_probability,
    rank_chains,
)
from hawkes_gc.core import Dataset, EventSequence
from hawkes_gc.graph import make_graph


def seq(events, sid="s", horizon=100.0):
    return EventSequence.from_events(sid, horizon, events)


def chain_graph(d, edges, w=0.01):
    A = np.zeros((d, d))
    for j, i in edges:
        A[i, j] = w
    return make_graph(A)


def test_enumeration_is_shortlex():
    g = chain_graph(3, [(0, 1), (1, 2), (0, 2), (2, 0)])
    chains = enumerate_chains(g, max_len=3)
    assert chains[:4] == [(0, 1), (0, 2), (1, 2), (2, 0)]
    assert chains == sorted(chains, key=lambda c: (len(c), c))
    assert all(len(c) >= 2 for c in chains)


def test_enumeration_skips_weak_and_inhibiting_edges():
    A = np.zeros((3, 3))
    A[1, 0] = 1e-4  # "+"
    A[2, 1] = -0.5
    assert enumerate_chains(make_graph(A)) == []


def test_enumeration_cap():
    g = chain_graph(4, [(i, j) for i in range(4) for j in range(4)])
    with pytest.raises(ChainLimitError):
        enumerate_chains(g, max_len=6, cap=100)


def test_occurrence_needs_strictly_increasing_times():
    s = seq([(1.0, 0), (1.0, 1)])
    assert not chain_occurs(s, (0, 1))
    assert chain_occurs(seq([(1.0, 0), (2.0, 1)]), (0, 1))
    assert not chain_occurs(seq([(2.0, 1), (3.0, 0)]), (0, 1))


def test_occurrence_repeated_type():
    assert chain_occurs(seq([(1.0, 0), (2.0, 1), (3.0, 0)]), (0, 1, 0))
    assert not chain_occurs(seq([(1.0, 0), (2.0, 1)]), (0, 1, 0))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 2)), max_size=12),
       st.lists(st.integers(0, 2), min_size=2, max_size=4))
def test_greedy_matches_brute_force(raw, chain):
    events = sorted((float(t), m) for t, m in raw)
    s = seq(events)
    # brute force over index subsequences
    n = len(events)

    def search(pos, k, last):
        if k == len(chain):
            return True
        return any(events[q][1] == chain[k] and events[q][0] > last and search(q + 1, k + 1, events[q][0])
                   for q in range(pos, n))

    assert chain_occurs(s, chain) == search(0, 0, -math.inf)


def test_build_table_counts_only_eligible_sequences():
    c1 = Dataset.of([seq([(1, 0), (2, 1)], "a"), seq([(2, 1), (3, 0)], "b"), seq([(1, 0)], "c")], 2)
    c2 = Dataset.of([seq([(1, 1), (2, 0)], "x"), seq([(1, 0), (5, 1)], "y")], 2)
    t = build_table(c1, c2, (0, 1))
    assert t.as_tuple() == (1, 1, 1, 1)


def test_build_table_without_eligible_sequences():
    c1 = Dataset.of([seq([(1, 0)], "a")], 2)
    with pytest.raises(NoEligibleSequences):
        build_table(c1, c1, (0, 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
def test_point_probabilities_sum_to_one(a, b, c, d):
    table = ContingencyTable(a, b, c, d)
    assert math.fsum(point_probability(t) for t in margin_tables(table)) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
def test_fisher_agrees_with_scipy(a, b, c, d):
    ours = fisher_exact((a, b, c, d), "two_sided")
    theirs = stats.fisher_exact([[a, b], [c, d]], alternative="two-sided")[1]
    assert ours == pytest.approx(theirs, rel=1e-6, abs=1e-12)
    ours = fisher_exact((a, b, c, d), "greater")
    theirs = stats.fisher_exact([[a, b], [c, d]], alternative="greater")[1]
    assert ours == pytest.approx(theirs, rel=1e-6, abs=1e-12)


def test_fisher_named_fixtures():
    assert floor3(fisher_exact((17, 20, 5, 30))) == 0.004
    assert floor3(fisher_exact((19, 35, 6, 28))) == 0.092


def test_default_mode_reproduces_every_fixture():
    pairs = load_fisher_fixtures()
    assert len(pairs) >= 9
    report = calibrate_mode(pairs)
    assert report[DEFAULT_MODE]["floor"] == len(pairs)
    assert max(report, key=lambda m: (report[m]["floor"], m == DEFAULT_MODE)) == DEFAULT_MODE


def test_floor3():
    assert floor3(0.0049999) == 0.004
    assert floor3(0.092) == 0.092
    assert floor3(1.0) == 1.0


def test_table_validation():
    with pytest.raises(ValueError):
        ContingencyTable(-1, 0, 0, 0)
    with pytest.raises(ValueError):
        fisher_exact((1, 2, 3, 4), mode="less")


def _cohort(n, with_chain, sid):
    out = []
    for k in range(n):
        if k < with_chain:
            out.append(seq([(1.0, 0), (2.0, 1)], f"{sid}{k}"))
        else:
            out.append(seq([(2.0, 1), (3.0, 0)], f"{sid}{k}"))
    return Dataset.of(out, 2)


def test_ranking_orders_by_p_and_applies_bonferroni():
    g = chain_graph(2, [(0, 1), (1, 0)])
    c1, c2 = _cohort(30, 25, "a"), _cohort(30, 5, "b")
    ranking = rank_chains(g, c1, c2, max_len=2, alpha=0.1)
    assert [r.chain for r in ranking.reports] == [(0, 1), (1, 0)]
    ps = [r.p_value for r in ranking.reports]
    assert ps == sorted(ps) and ranking.reports[0].significant
    bonf = rank_chains(g, c1, c2, max_len=2, alpha=0.1, bonferroni=True)
    assert all(r.p_adjusted == pytest.approx(min(1.0, 2 * r.p_value)) for r in bonf.reports)
    header = ranking.to_csv().splitlines()[0]
    assert header == "chain,a,b,c,d,ratio_1,ratio_2,p,significant"
    assert ranking.to_csv().splitlines()[1].startswith("type0->type1,25,5,5,25,")


def test_ranking_counts_skipped_chains():
    g = chain_graph(3, [(0, 1), (1, 2)])
    c = Dataset.of([seq([(1.0, 0), (2.0, 1)], "a")], 3)
    ranking = rank_chains(g, c, c, max_len=3)
    assert ranking.n_candidates == 3 and ranking.n_skipped == 2
