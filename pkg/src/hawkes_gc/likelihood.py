"""Surrogate and exact (restart) log likelihoods with analytic gradients.

Everything here is built on two per-event tables that depend only on the
data and the decay rate:

    D[n, k]  = sum over earlier events j of type k of exp(-beta (t_n - t_j))
    Dp[n, k] = the same sum right after event n has fired

Events sharing a timestamp do not excite each other (the intensity only sees
strictly earlier events).  The tables are built once with a forward recursion
and then every likelihood or gradient evaluation is a few vectorised passes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Dataset, EventSequence, HawkesParams


class IntractableLikelihood(ArithmeticError):
    """The surrogate intensity is not positive at an observed event."""

    def __init__(self, seq_id, index: int, value: float):
        self.seq_id = seq_id
        self.index = int(index)
        self.value = float(value)
        super().__init__(
            f"intensity {value:.6g} <= 0 at event {index} of sequence {seq_id!r}"
        )


class GradientSingular(ArithmeticError):
    """The surrogate intensity is exactly zero at an event, so 1/lambda blows up."""

    def __init__(self, seq_id, index: int):
        self.seq_id = seq_id
        self.index = int(index)
        super().__init__(f"zero intensity at event {index} of sequence {seq_id!r}")


@dataclass(frozen=True)
class Gradients:
    d_mu: np.ndarray
    d_A: np.ndarray

    def norm(self) -> float:
        return float(math.sqrt(np.sum(self.d_mu ** 2) + np.sum(self.d_A ** 2)))

    def row_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.d_A ** 2, axis=1))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.d_mu)) and np.all(np.isfinite(self.d_A)))


@dataclass(frozen=True)
class RestartSchedule:
    seq_id: str
    event_times: np.ndarray
    # restart_times[n, i]: when process i resumes after event n
    restart_times: np.ndarray


class DecayTables:
    """Per-event decayed sums for a dataset at a fixed beta, stacked across sequences."""

    def __init__(self, dataset: Dataset, beta: float, truncated_compensator: bool = False):
        beta = float(beta)
        if not beta > 0:
            raise ValueError(f"beta must be positive, got {beta}")
        d = dataset.d
        self.beta = beta
        self.d = d
        self.truncated_compensator = bool(truncated_compensator)
        self.dataset = dataset
        self.seq_ids = [s.seq_id for s in dataset.sequences]
        self.horizons = np.array([s.horizon for s in dataset.sequences], dtype=float)
        self.total_horizon = float(self.horizons.sum())
        sizes = np.array([len(s) for s in dataset.sequences], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        N = int(self.offsets[-1])
        self.n_events = N
        self.D = np.zeros((N, d))
        self.Dp = np.zeros((N, d))
        self.gap = np.zeros(N)  # time to the next event (or the horizon)
        self.marks = np.zeros(N, dtype=np.int64)
        self.seq_index = np.repeat(np.arange(len(sizes)), sizes)
        self.G = np.zeros(d)
        # Sum over sequences of the time before the first event (whole horizon if empty).
        self.lead_time = 0.0
        self.op_count = 0
        for s, seq in enumerate(dataset.sequences):
            lo = self.offsets[s]
            self._fill(seq, lo)
        self.event_index = np.arange(N) - self.offsets[self.seq_index]
        self.type_counts = np.bincount(self.marks, minlength=d)
        # events regrouped by type so that each type is one contiguous block
        self._order = np.argsort(self.marks, kind="stable")
        self._bounds = np.concatenate([[0], np.cumsum(self.type_counts)])
        self._D_sorted = np.ascontiguousarray(self.D[self._order])
        self._by_type = [self._order[self._bounds[i]:self._bounds[i + 1]] for i in range(d)]
        self._D_by_type = [self._D_sorted[self._bounds[i]:self._bounds[i + 1]] for i in range(d)]

    def _fill(self, seq: EventSequence, lo: int) -> None:
        beta, d = self.beta, self.d
        t, u = seq.times, seq.marks
        N = len(seq)
        hi = lo + N
        self.marks[lo:hi] = u
        if N == 0:
            self.lead_time += seq.horizon
            return
        self.lead_time += float(t[0])
        D = self.D[lo:hi]
        Dp = self.Dp[lo:hi]
        acc = np.zeros(d)  # events strictly before the current timestamp
        pending = np.zeros(d)  # events at the current timestamp seen so far
        decay = np.exp(-beta * np.diff(t))
        for n in range(N):
            if n and t[n] != t[n - 1]:
                acc += pending
                acc *= decay[n - 1]
                pending[:] = 0.0
            D[n] = acc
            pending[u[n]] += 1.0
            Dp[n] = acc + pending
        self.op_count += N * d
        self.gap[lo:hi - 1] = np.diff(t)
        self.gap[hi - 1] = seq.horizon - t[-1]
        if self.truncated_compensator:
            # j = 1..N-1 with t_N as the upper limit, and "j < n" by index
            prev = np.vstack([np.zeros((1, d)), Dp[:-1]])
            D[:] = prev * np.exp(-beta * np.diff(t, prepend=t[0]))[:, None]
            w = (1.0 - np.exp(-beta * (t[-1] - t[:-1]))) / beta
            self.G += np.bincount(u[:-1], weights=w, minlength=d)
        else:
            w = (1.0 - np.exp(-beta * (seq.horizon - t))) / beta
            self.G += np.bincount(u, weights=w, minlength=d)

    @property
    def n_sequences(self) -> int:
        return len(self.seq_ids)

    def locate(self, row: int) -> tuple[str, int]:
        return self.seq_ids[self.seq_index[row]], int(self.event_index[row])

    def locate_sorted(self, positions) -> tuple[str, int]:
        """Earliest stacked event among positions in the type-grouped order."""
        return self.locate(int(np.min(self._order[positions])))


def prepare(data, beta: float, truncated_compensator: bool = False) -> DecayTables:
    if isinstance(data, DecayTables):
        if data.beta != float(beta) or data.truncated_compensator != bool(truncated_compensator):
            return DecayTables(data.dataset, beta, truncated_compensator)
        return data
    return DecayTables(data, beta, truncated_compensator)


def _tables_for(params: HawkesParams, data, truncated_compensator: bool = False) -> DecayTables:
    if isinstance(data, DecayTables):
        if data.beta != params.beta:
            raise ValueError(f"tables were built for beta={data.beta}, params have beta={params.beta}")
        if data.d != params.d:
            raise ValueError(f"tables have d={data.d}, params have d={params.d}")
        return data
    if data.d != params.d:
        raise ValueError(f"dataset has d={data.d}, params have d={params.d}")
    return prepare(data, params.beta, truncated_compensator)


def event_intensities(params: HawkesParams, data) -> np.ndarray:
    """Surrogate intensity of the firing type at every event (stacked order)."""
    tab = _tables_for(params, data)
    return _lambda_at_events(params.mu, params.A, tab)


def _lambda_sorted(mu, A, tab: DecayTables) -> np.ndarray:
    """Intensities at events in type-grouped order (see DecayTables._order)."""
    lam = np.empty(tab.n_events)
    b = tab._bounds
    for i in range(tab.d):
        if b[i + 1] > b[i]:
            lam[b[i]:b[i + 1]] = mu[i] + tab._D_by_type[i] @ A[i]
    return lam


def _lambda_at_events(mu, A, tab: DecayTables) -> np.ndarray:
    lam = np.empty(tab.n_events)
    lam[tab._order] = _lambda_sorted(mu, A, tab)
    return lam


def _event_terms(inv, tab: DecayTables):
    """Per-type sums of 1/lambda and of D/lambda over that type's events."""
    d = tab.d
    b = tab._bounds
    d_mu = np.empty(d)
    d_A = np.empty((d, d))
    for i in range(d):
        seg = inv[b[i]:b[i + 1]]
        d_mu[i] = seg.sum()
        d_A[i] = seg @ tab._D_by_type[i]
    return d_mu, d_A


def _grad_from_inverse(inv, A, tab: DecayTables, lambda1):
    d_mu, d_A = _event_terms(inv, tab)
    d_mu -= tab.total_horizon
    d_A -= tab.G[None, :]
    d_A -= _l1_subgradient(A, lambda1)
    return Gradients(d_mu, d_A)


def surrogate_intensity(params: HawkesParams, seq: EventSequence, i: int, t: float) -> float:
    before = seq.times < t
    lags = t - seq.times[before]
    weights = params.A[i, seq.marks[before]]
    return float(params.mu[i] + np.sum(weights * np.exp(-params.beta * lags)))


def check_feasible(params: HawkesParams, data, tol: float = 1e-12):
    """Return (True, None) or (False, (seq_id, event_index)) for the first violating event."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    tab = _tables_for(params, data)
    lam = _lambda_at_events(params.mu, params.A, tab)
    bad = np.flatnonzero(~(lam > tol))
    if bad.size == 0:
        return True, None
    return False, tab.locate(int(bad[0]))


def _first_nonpositive(lam_sorted, tab):
    bad = np.flatnonzero(~(lam_sorted > 0))
    if bad.size:
        row = int(np.min(tab._order[bad]))
        sid, n = tab.locate(row)
        value = lam_sorted[np.flatnonzero(tab._order == row)[0]]
        raise IntractableLikelihood(sid, n, value)


def surrogate_loglik(params: HawkesParams, data, lambda1: float = 0.0, truncated_compensator: bool = False) -> float:
    tab = _tables_for(params, data, truncated_compensator)
    mu, A = params.mu, params.A
    lam = _lambda_sorted(mu, A, tab)
    _first_nonpositive(lam, tab)
    value = np.sum(np.log(lam)) - tab.total_horizon * mu.sum() - A.sum(axis=0) @ tab.G
    return float(value - lambda1 * np.abs(A).sum())


def _l1_subgradient(A, lambda1):
    return lambda1 * np.sign(A)  # sign(0) = 0


# Rows per block in the fused gradient pass; a block of D (rows x d doubles)
# then stays in L2 between the intensity and the accumulation step.
GRAD_BLOCK = 16384


def _fused_event_terms(mu, A, tab: DecayTables):
    """_event_terms(1 / lambda) in one blocked sweep; None if some lambda is zero."""
    d = tab.d
    d_mu = np.zeros(d)
    d_A = np.zeros((d, d))
    for i in range(d):
        D_i = tab._D_by_type[i]
        for lo in range(0, D_i.shape[0], GRAD_BLOCK):
            rows = D_i[lo:lo + GRAD_BLOCK]
            inv = rows @ A[i]
            inv += mu[i]
            if not inv.all():
                return None
            np.reciprocal(inv, out=inv)
            d_mu[i] += inv.sum()
            d_A[i] += inv @ rows
    return d_mu, d_A


def surrogate_grad(params: HawkesParams, data, lambda1: float = 0.0, truncated_compensator: bool = False) -> Gradients:
    tab = _tables_for(params, data, truncated_compensator)
    terms = _fused_event_terms(params.mu, params.A, tab)
    if terms is None:
        lam = _lambda_sorted(params.mu, params.A, tab)
        raise GradientSingular(*tab.locate_sorted(np.flatnonzero(lam == 0)))
    d_mu, d_A = terms
    d_mu -= tab.total_horizon
    d_A -= tab.G[None, :]
    d_A -= _l1_subgradient(params.A, lambda1)
    return Gradients(d_mu, d_A)


def surrogate_value_and_grad(params: HawkesParams, data, lambda1: float = 0.0):
    """Loglik (or -inf outside the feasible region) and gradient in one pass."""
    tab = _tables_for(params, data)
    mu, A = params.mu, params.A
    lam = _lambda_sorted(mu, A, tab)
    if np.all(lam > 0):
        value = float(
            np.sum(np.log(lam)) - tab.total_horizon * mu.sum() - A.sum(axis=0) @ tab.G
            - lambda1 * np.abs(A).sum()
        )
    else:
        value = -math.inf
    # outside the feasible region the gradient is non-finite; callers revert
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        grads = _grad_from_inverse(1.0 / lam, A, tab, lambda1)
    return value, grads


# -- exact likelihood via restart times -------------------------------------


def _restart_offsets(mu, A, beta, Dp, gap):
    """Offset after each event at which every process's intensity returns to zero.

    Returns (S, offset) with S[n, i] the post-event excitation of process i.
    """
    S = Dp @ A.T
    mu_row = np.broadcast_to(mu, S.shape)
    gap_col = np.broadcast_to(gap[:, None], S.shape)
    clipped = S < -mu_row
    offset = np.zeros_like(S)
    if np.any(clipped):
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.log(-S / mu_row) / beta
        root = np.where(mu_row > 0, root, np.inf)
        offset = np.where(clipped, np.minimum(gap_col, root), 0.0)
    return S, offset


def restart_schedule(params: HawkesParams, seq: EventSequence) -> RestartSchedule:
    tab = prepare(Dataset(params.d, tuple(f"type{i}" for i in range(params.d)), (seq,)), params.beta)
    _, offset = _restart_offsets(params.mu, params.A, params.beta, tab.Dp, tab.gap)
    return RestartSchedule(seq.seq_id, seq.times.copy(), seq.times[:, None] + offset)


def _compensator_terms(mu, A, tab: DecayTables):
    beta = tab.beta
    S, offset = _restart_offsets(mu, A, beta, tab.Dp, tab.gap)
    gap = tab.gap[:, None]
    q = (np.exp(-beta * offset) - np.exp(-beta * gap)) / beta
    active = gap - offset  # time each process spends unclipped after event n
    return S, q, active


def restart_loglik(params: HawkesParams, data, lambda1: float = 0.0) -> float:
    tab = _tables_for(params, data)
    mu, A = params.mu, params.A
    lam = _lambda_sorted(mu, A, tab)
    _first_nonpositive(lam, tab)
    S, q, active = _compensator_terms(mu, A, tab)
    compensator = tab.lead_time * mu.sum() + np.sum(active * mu[None, :]) + np.sum(S * q)
    return float(np.sum(np.log(lam)) - compensator - lambda1 * np.abs(A).sum())


def restart_grad(params: HawkesParams, data, lambda1: float = 0.0) -> Gradients:
    """Gradient of restart_loglik with the restart schedule held fixed."""
    tab = _tables_for(params, data)
    mu, A = params.mu, params.A
    lam = _lambda_sorted(mu, A, tab)
    _first_nonpositive(lam, tab)
    _, q, active = _compensator_terms(mu, A, tab)
    d_mu, d_A = _event_terms(1.0 / lam, tab)
    d_mu -= tab.lead_time + active.sum(axis=0)
    d_A -= q.T @ tab.Dp
    d_A -= _l1_subgradient(A, lambda1)
    return Gradients(d_mu, d_A)


def per_sequence_logliks(params: HawkesParams, dataset: Dataset, exact: bool = False) -> np.ndarray:
    fn = restart_loglik if exact else surrogate_loglik
    return np.array([fn(params, dataset.with_sequences([s])) for s in dataset.sequences])


def row_grad(mu_i: float, A_i: np.ndarray, tab: DecayTables, i: int, lambda1: float = 0.0):
    """Partials of the surrogate loglik w.r.t. mu_i and row i of A.

    Only events of type i enter, so this costs O(N_i d).  Returns
    (d_mu_i, d_A_i); entries are inf/nan if an intensity hits exactly zero.
    """
    D_i = tab._D_by_type[i]
    lam = mu_i + D_i @ A_i
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / lam
        d_mu_i = float(inv.sum() - tab.total_horizon)
        d_A_i = inv @ D_i - tab.G - lambda1 * np.sign(A_i)
    return d_mu_i, d_A_i
