"""Thinning sampler for the ReLU-linked Hawkes process and synthetic problem generator."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import expm

from . import defaults
from .core import Dataset, EventSequence, HawkesParams, default_type_names


class NonStationaryError(RuntimeError):
    """Sampling ran past the event cap, typically because the process explodes."""


class DAGConvergenceError(RuntimeError):
    """Gradient descent on the acyclicity penalty did not reach its tolerance."""


def spectral_radius(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def branching_ratio(params: HawkesParams) -> float:
    """Spectral radius of the positive part of A, scaled by 1/beta."""
    return spectral_radius(np.maximum(params.A, 0.0)) / params.beta


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def thinning_sample(
    params: HawkesParams,
    horizon: float,
    seed,
    seq_id: str = "0",
    max_events: int = defaults.MAX_EVENTS_PER_SEQUENCE,
) -> EventSequence:
    """Draw one sequence on [0, horizon] by Lewis-Ogata thinning.

    Between events the intensity is dominated by mu + positive excitation,
    which only decays, so that total serves as the local bound.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rng = _rng(seed)
    mu = params.mu
    A = params.A
    A_pos = np.maximum(A, 0.0)
    beta = params.beta
    d = params.d
    # columns as contiguous rows for fast updates
    cols = np.ascontiguousarray(A.T)
    cols_pos = np.ascontiguousarray(A_pos.T)
    excite = np.zeros(d)
    excite_pos = np.zeros(d)
    mu_total = float(mu.sum())
    times: list[float] = []
    marks: list[int] = []
    t = 0.0
    while True:
        bound = mu_total + float(excite_pos.sum())
        if bound <= 0.0:
            break
        wait = rng.exponential(1.0 / bound)
        t += wait
        if t > horizon:
            break
        decay = math.exp(-beta * wait)
        excite *= decay
        excite_pos *= decay
        lam = np.maximum(mu + excite, 0.0)
        total = float(lam.sum())
        if rng.uniform() * bound > total:
            continue
        cum = np.cumsum(lam)
        k = int(np.searchsorted(cum, rng.uniform() * cum[-1], side="right"))
        k = min(k, d - 1)
        while lam[k] <= 0.0:  # guard against landing on a zero-width bin
            k -= 1
        times.append(t)
        marks.append(k)
        if len(times) > max_events:
            raise NonStationaryError(
                f"more than {max_events} events before t={t:.4g} of {horizon}; "
                f"branching ratio {branching_ratio(params):.3g} (non-stationary parameters?)"
            )
        excite += cols[k]
        excite_pos += cols_pos[k]
    return EventSequence(seq_id, horizon, np.asarray(times, float), np.asarray(marks, np.int64))


def sequence_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Independent stream per (seed, sequence index), so serial and parallel runs agree."""
    return np.random.SeedSequence([int(seed), 1, int(index)])


def sample_dataset(
    params: HawkesParams,
    horizon: float,
    n_sequences: int,
    seed: int,
    type_names=None,
    max_events: int = defaults.MAX_EVENTS_PER_SEQUENCE,
) -> Dataset:
    seqs = [
        thinning_sample(params, horizon, np.random.default_rng(sequence_seed(seed, k)), str(k), max_events)
        for k in range(n_sequences)
    ]
    return Dataset.of(seqs, params.d, type_names)


@dataclass(frozen=True)
class GenConfig:
    d: int
    horizon: float
    n_sequences: int = 1
    neg_fraction: float = defaults.NEG_FRACTION
    seed: int = 0
    beta: float = defaults.SYNTH_BETA
    round_mu: bool = True
    dag_step: float = defaults.DAG_STEP
    dag_max_iter: int = defaults.DAG_MAX_ITER
    max_events: int = defaults.MAX_EVENTS_PER_SEQUENCE

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if self.n_sequences < 1:
            raise ValueError("n_sequences must be positive")
        if not 0 <= self.neg_fraction <= 1:
            raise ValueError("neg_fraction must lie in [0, 1]")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SyntheticProblem:
    truth: HawkesParams
    dataset: Dataset
    gen_config: GenConfig

    def to_json(self) -> str:
        return json.dumps({"gen_config": self.gen_config.to_dict(), "params": self.truth.to_dict()}, indent=2) + "\n"


def acyclicity(A: np.ndarray) -> float:
    d = A.shape[0]
    return float(np.trace(expm(A)) - d)


def dagify(A: np.ndarray, step: float, max_iter: int, tol: float = defaults.DAG_TOL) -> np.ndarray:
    """Projected gradient descent on tr(exp(A)) - d over nonnegative matrices."""
    A = np.maximum(np.array(A, dtype=float), 0.0)
    for _ in range(max_iter):
        E = expm(A)
        if np.trace(E) - A.shape[0] <= tol:
            return A
        A = np.maximum(A - step * E.T, 0.0)
    if acyclicity(A) <= tol:
        return A
    raise DAGConvergenceError(f"h(A) = {acyclicity(A):.3g} > {tol} after {max_iter} iterations")


def _round1(x: np.ndarray) -> np.ndarray:
    out = np.round(x, 1)
    out[out == 0] = 0.0  # drop negative zeros
    return out


def _reaches(adj: np.ndarray, src: int, dst: int) -> bool:
    seen = {src}
    stack = [src]
    while stack:
        k = stack.pop()
        if k == dst:
            return True
        for nxt in np.flatnonzero(adj[k]):
            if nxt not in seen:
                seen.add(int(nxt))
                stack.append(int(nxt))
    return False


def _add_inhibition(A: np.ndarray, neg_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Turn round(neg_fraction * #zeros) zero entries into U[-0.5, 0] weights.

    Candidates are visited in a seeded random order and an entry is used only
    if the signed support stays acyclic (no self-loops, no cycle through the
    new edge), so the whole truth remains a DAG.
    """
    A = A.copy()
    d = A.shape[0]
    n_neg = int(round(neg_fraction * np.count_nonzero(A == 0.0)))
    adj = (A != 0).T  # adj[j, i]: edge j -> i
    placed = 0
    for flat in rng.permutation(d * d):
        if placed == n_neg:
            break
        i, j = divmod(int(flat), d)
        if i == j or A[i, j] != 0.0 or _reaches(adj, i, j):
            continue
        A[i, j] = _round1(np.array([rng.uniform(-0.5, 0.0)]))[0]
        if A[i, j] != 0.0:
            adj[j, i] = True
        placed += 1
    return A


def generate_truth(cfg: GenConfig, rng: np.random.Generator) -> HawkesParams:
    d = cfg.d
    mu = rng.uniform(0.0, 0.1, size=d)
    A = rng.uniform(0.0, 0.4, size=(d, d))
    A = dagify(A, cfg.dag_step, cfg.dag_max_iter)
    A = _round1(A)
    while acyclicity(A) > defaults.DAG_TOL:
        # rounding revived a cycle; keep descending from the rounded point
        A = _round1(dagify(A, cfg.dag_step, cfg.dag_max_iter))
    A = _add_inhibition(A, cfg.neg_fraction, rng)
    if cfg.round_mu:
        mu = _round1(mu)
    return HawkesParams(mu, A, cfg.beta)


def generate_synthetic_problem(cfg: GenConfig) -> SyntheticProblem:
    # the truth has its own stream; sequences use sequence_seed(seed, k)
    truth_rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0]))
    truth = generate_truth(cfg, truth_rng)
    seqs = [
        thinning_sample(
            truth,
            cfg.horizon,
            np.random.default_rng(sequence_seed(cfg.seed, k)),
            str(k),
            cfg.max_events,
        )
        for k in range(cfg.n_sequences)
    ]
    dataset = Dataset(cfg.d, default_type_names(cfg.d), tuple(seqs))
    return SyntheticProblem(truth, dataset, cfg)
