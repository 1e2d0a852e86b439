"""Granger-causal chains: enumeration, occurrence counting and Fisher's exact test."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import defaults
from .core import Dataset, EventSequence
from .graph import GCGraph

FISHER_MODES = ("two_sided", "greater", "point")
# relative slack when comparing point probabilities in the two-sided sum
_TWO_SIDED_RTOL = 1e-7


class ChainLimitError(RuntimeError):
    """Enumeration produced more chains than the configured cap."""


class NoEligibleSequences(ValueError):
    """A cohort has no sequence containing every type of the chain."""


@dataclass(frozen=True)
class ContingencyTable:
    a: int  # cohort 1 with chain
    b: int  # cohort 2 with chain
    c: int  # cohort 1 eligible, without chain
    d: int  # cohort 2 eligible, without chain

    def __post_init__(self):
        for name in ("a", "b", "c", "d"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d

    def ratios(self) -> tuple[float, float]:
        r1 = self.a / (self.a + self.c) if self.a + self.c else math.nan
        r2 = self.b / (self.b + self.d) if self.b + self.d else math.nan
        return r1, r2

    def as_tuple(self):
        return (self.a, self.b, self.c, self.d)


@dataclass(frozen=True)
class ChainReport:
    chain: tuple
    table: ContingencyTable
    ratio_1: float
    ratio_2: float
    p_value: float
    significant: bool
    p_adjusted: float | None = None

    def label(self, type_names=None) -> str:
        if type_names is None:
            return "->".join(str(k) for k in self.chain)
        return "->".join(type_names[k] for k in self.chain)


@dataclass(frozen=True)
class ChainRanking:
    reports: list
    n_candidates: int
    n_skipped: int
    alpha: float
    bonferroni: bool
    type_names: tuple

    def significant(self):
        return [r for r in self.reports if r.significant]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["chain", "a", "b", "c", "d", "ratio_1", "ratio_2", "p", "significant"])
        for r in self.reports:
            w.writerow([r.label(self.type_names), *r.table.as_tuple(), repr(r.ratio_1), repr(r.ratio_2),
                        repr(r.p_value), str(r.significant).lower()])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "n_candidates": self.n_candidates,
            "n_skipped": self.n_skipped,
            "alpha": self.alpha,
            "bonferroni": self.bonferroni,
            "reports": [
                {
                    "chain": [self.type_names[k] for k in r.chain],
                    "counts": list(r.table.as_tuple()),
                    "ratio_1": r.ratio_1,
                    "ratio_2": r.ratio_2,
                    "p_value": r.p_value,
                    "p_adjusted": r.p_adjusted,
                    "significant": r.significant,
                }
                for r in self.reports
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


# -- enumeration --------------------------------------------------------------


def enumerate_chains(graph: GCGraph, max_len: int = defaults.MAX_CHAIN_LEN,
                     cap: int = defaults.CHAIN_CAP) -> list:
    """All walks of 2..max_len nodes over strong exciting edges.

    Output is sorted by length, then lexicographically within a length.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    succ = graph.strong_exciting_successors()
    chains = []
    frontier = [(j,) for j in range(graph.d)]
    for _ in range(max_len - 1):
        frontier = [walk + (nxt,) for walk in frontier for nxt in succ[walk[-1]]]
        if not frontier:
            break
        chains.extend(frontier)
        if len(chains) > cap:
            raise ChainLimitError(
                f"more than {cap} candidate chains; raise the strength threshold or lower max_len"
            )
    return chains


# -- occurrence ---------------------------------------------------------------


def chain_occurs(seq: EventSequence, chain) -> bool:
    """Marks of the chain appear in order at strictly increasing times."""
    chain = tuple(int(k) for k in chain)
    if not chain:
        return True
    pos = 0
    last = -math.inf
    times, marks = seq.times, seq.marks
    for t, m in zip(times.tolist(), marks.tolist()):
        if m == chain[pos] and t > last:
            last = t
            pos += 1
            if pos == len(chain):
                return True
    return False


def _eligible(seq: EventSequence, types) -> bool:
    present = set(np.unique(seq.marks).tolist())
    return all(k in present for k in types)


def build_table(cohort1: Dataset, cohort2: Dataset, chain) -> ContingencyTable:
    chain = tuple(int(k) for k in chain)
    if len(chain) < 2:
        raise ValueError("a chain needs at least two nodes")
    if cohort1.d != cohort2.d:
        raise ValueError(f"cohorts disagree on the number of types ({cohort1.d} vs {cohort2.d})")
    if tuple(cohort1.type_names) != tuple(cohort2.type_names):
        raise ValueError("cohorts disagree on type names")
    types = set(chain)
    counts = []
    for cohort in (cohort1, cohort2):
        hit = miss = 0
        for seq in cohort.sequences:
            if not _eligible(seq, types):
                continue
            if chain_occurs(seq, chain):
                hit += 1
            else:
                miss += 1
        if hit + miss == 0:
            raise NoEligibleSequences(f"no eligible sequences for chain {list(chain)}")
        counts.append((hit, miss))
    (a, c), (b, d) = counts
    return ContingencyTable(a, b, c, d)


# -- Fisher's exact test ------------------------------------------------------


def _log_point(a, b, c, d) -> float:
    lf = lambda k: math.lgamma(k + 1)
    n = a + b + c + d
    return lf(a + b) + lf(c + d) + lf(a + c) + lf(b + d) - lf(a) - lf(b) - lf(c) - lf(d) - lf(n)


def margin_tables(table: ContingencyTable):
    """Every table sharing the margins of `table`, indexed by its a entry."""
    r1 = table.a + table.b
    c1 = table.a + table.c
    n = table.n
    lo = max(0, r1 + c1 - n)
    hi = min(r1, c1)
    for a in range(lo, hi + 1):
        b = r1 - a
        c = c1 - a
        yield ContingencyTable(a, b, c, n - a - b - c)


def point_probability(table: ContingencyTable) -> float:
    return math.exp(_log_point(*table.as_tuple()))


def fisher_exact(table, mode: str = "two_sided") -> float:
    """p-value of Fisher's exact test for a 2x2 table (a, b / c, d).

    point: hypergeometric probability of the observed table alone.
    greater: tables with at least the observed a.
    two_sided: tables no more probable than the observed one.
    """
    if not isinstance(table, ContingencyTable):
        table = ContingencyTable(*table)
    if mode not in FISHER_MODES:
        raise ValueError(f"mode must be one of {FISHER_MODES}")
    observed = _log_point(*table.as_tuple())
    if mode == "point":
        return min(1.0, math.exp(observed))
    total = 0.0
    for other in margin_tables(table):
        lp = _log_point(*other.as_tuple())
        if mode == "greater":
            keep = other.a >= table.a
        else:
            keep = lp <= observed + math.log1p(_TWO_SIDED_RTOL)
        if keep:
            total += math.exp(lp)
    return min(1.0, total)


def floor3(p: float) -> float:
    """Truncate to three decimals, the convention of the published chain tables."""
    return math.floor(p * 1000 + 1e-9) / 1000


def load_fisher_fixtures() -> list:
    text = resources.files("hawkes_gc").joinpath("data/fisher_fixtures.json").read_text()
    return json.loads(text)["pairs"]


def calibrate_mode(pairs=None) -> dict:
    """Matches of each mode against published (counts, p) pairs under floor and rounding."""
    pairs = load_fisher_fixtures() if pairs is None else pairs
    out = {}
    for mode in FISHER_MODES:
        floored = rounded = 0
        for row in pairs:
            p = fisher_exact(tuple(row["counts"]), mode)
            floored += floor3(p) == row["p_value"]
            rounded += round(p, 3) == row["p_value"]
        out[mode] = {"floor": floored, "round": rounded, "total": len(pairs)}
    return out


DEFAULT_MODE = "two_sided"  # reproduces every fixture pair when truncated to 3 decimals


# -- ranking ------------------------------------------------------------------


def rank_chains(graph: GCGraph, cohort1: Dataset, cohort2: Dataset,
                max_len: int = defaults.MAX_CHAIN_LEN, alpha: float = defaults.ALPHA,
                mode: str = DEFAULT_MODE, bonferroni: bool = False,
                cap: int = defaults.CHAIN_CAP) -> ChainRanking:
    """Test every candidate chain and sort by p-value (ties keep enumeration order)."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    chains = enumerate_chains(graph, max_len, cap)
    tested = []
    skipped = 0
    for chain in chains:
        try:
            table = build_table(cohort1, cohort2, chain)
        except NoEligibleSequences:
            skipped += 1
            continue
        tested.append((chain, table, fisher_exact(table, mode)))
    m = len(tested)
    reports = []
    for chain, table, p in tested:
        r1, r2 = table.ratios()
        adj = min(1.0, p * m) if bonferroni else None
        decisive = adj if bonferroni else p
        reports.append(ChainReport(chain, table, r1, r2, p, decisive <= alpha, adj))
    reports.sort(key=lambda r: r.p_value)  # stable
    return ChainRanking(reports, len(chains), skipped, alpha, bonferroni, tuple(cohort1.type_names))
