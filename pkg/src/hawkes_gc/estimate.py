"""Two-phase estimator, three gradient baselines and grid search.

All optimisers take normalised gradient-ascent steps of a given length.  Any
step that produces a non-finite gradient is reverted and its step length
halved.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import defaults
from .core import Dataset, FitConfig, HawkesParams
from .likelihood import (
    DecayTables,
    Gradients,
    IntractableLikelihood,
    event_intensities,
    prepare,
    restart_grad,
    restart_loglik,
    row_grad,
    surrogate_loglik,
    surrogate_value_and_grad,
)


@dataclass
class TraceRecord:
    iteration: int
    phase: str
    step: float
    mu_norm: float
    A_norm: float
    row_norms: tuple
    loglik: float | None  # None when the surrogate is intractable
    elapsed: float
    note: str = ""


@dataclass
class FitTrace:
    records: list = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter)
    _next: int = 0

    def add(self, phase, step, grads: Gradients | None, loglik, note="", row=None):
        if grads is not None:
            mu_norm = float(np.linalg.norm(grads.d_mu))
            A_norm = float(np.linalg.norm(grads.d_A))
            rows = tuple(float(x) for x in grads.row_norms())
        else:
            mu_norm = A_norm = math.nan
            rows = ()
        if loglik is not None and not math.isfinite(loglik):
            loglik = None
        self.records.append(
            TraceRecord(self._next, phase, float(step), mu_norm, A_norm, rows, loglik,
                        time.perf_counter() - self._t0, note)
        )
        self._next += 1

    def note(self, phase, step, text):
        self.add(phase, step, None, None, note=text)

    def __len__(self):
        return len(self.records)

    def phase(self, tag):
        return [r for r in self.records if r.phase == tag]

    def to_csv(self, timings: bool = True) -> str:
        """CSV text; timings=False blanks the elapsed column for reproducible output."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "phase", "step", "mu_norm", "A_norm", "row_norms", "loglik", "elapsed", "note"])
        for r in self.records:
            w.writerow([
                r.iteration, r.phase, repr(r.step), repr(r.mu_norm), repr(r.A_norm),
                " ".join(repr(x) for x in r.row_norms),
                "intractable" if r.loglik is None else repr(r.loglik),
                f"{r.elapsed:.6f}" if timings else "", r.note,
            ])
        return buf.getvalue()


@dataclass
class FitResult:
    params_hat: HawkesParams
    selected_rows: list
    trace: FitTrace
    end_phase1_loglik: float
    method: str = "two_phase"
    diverged: bool = False

    def to_dict(self, timings: bool = True) -> dict:
        return {
            "method": self.method,
            "params": self.params_hat.to_dict(),
            "selected_rows": [int(i) for i in self.selected_rows],
            "end_phase1_loglik": self.end_phase1_loglik,
            "diverged": self.diverged,
            "trace_csv": self.trace.to_csv(timings),
        }

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2) + "\n"


@dataclass
class Phase1Result:
    params: HawkesParams
    trace: FitTrace
    loglik: float  # unpenalised surrogate loglik at the final iterate
    objective: float  # penalised objective that was maximised
    gradients: Gradients


def initial_params(d: int, beta: float, config: FitConfig) -> HawkesParams:
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 7]))
    lo, hi = config.mu_init_range
    return HawkesParams(rng.uniform(lo, hi, size=d), np.zeros((d, d)), beta)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def _tables(data, beta, config: FitConfig) -> DecayTables:
    return prepare(data, beta, config.truncated_compensator)


def phase1_pgd(data, beta: float, config: FitConfig, start: HawkesParams | None = None) -> Phase1Result:
    """Projected normalised gradient ascent over nonnegative (mu, A)."""
    tab = _tables(data, beta, config)
    params = start if start is not None else initial_params(tab.d, beta, config)
    mu, A = params.mu.copy(), params.A.copy()
    lam1 = config.lambda1
    trace = FitTrace()
    scale = 1.0  # extra halvings from the divergence guard
    value, g = surrogate_value_and_grad(params, tab, lam1)
    for it in range(config.phase1_iters):
        gamma = config.gamma1 * 0.5 ** (it // config.phase1_halve_every) * scale
        trace.add("phase1", gamma, g, value)
        if not (np.any(g.d_mu) or np.any(g.d_A)):
            trace.note("phase1", gamma, "zero gradient; stopped")
            break
        new_mu = np.maximum(mu + gamma * _unit(g.d_mu), 0.0)
        new_A = np.maximum(A + gamma * _unit(g.d_A), 0.0)
        cand = HawkesParams(new_mu, new_A, beta)
        new_value, new_g = surrogate_value_and_grad(cand, tab, lam1)
        if not new_g.is_finite():
            scale *= 0.5
            trace.note("phase1", gamma, "non-finite gradient; step reverted")
            continue
        mu, A, value, g = new_mu, new_A, new_value, new_g
    params = HawkesParams(mu, A, beta)
    try:
        loglik = surrogate_loglik(params, tab, 0.0, config.truncated_compensator)
    except IntractableLikelihood:
        loglik = -math.inf
    return Phase1Result(params, trace, loglik, value, g)


def select_rows(gradients: Gradients, p_select: float):
    """Rows ordered by descending gradient norm and how many carry p_select of the energy."""
    if not 0 < p_select <= 1:
        raise ValueError("p_select must lie in (0, 1]")
    norms = gradients.row_norms()
    order = np.lexsort((np.arange(norms.size), -norms))
    energy = norms[order] ** 2
    total = energy.sum()
    if total == 0:
        return [int(i) for i in order], 0
    cum = np.cumsum(energy)
    # tiny slack so that p_select = 1 is not defeated by rounding in the cumsum
    k = int(np.searchsorted(cum, p_select * total * (1 - 1e-12), side="left")) + 1
    return [int(i) for i in order], min(k, norms.size)


def _row_ok(mu_i, A_i, tab, i, config) -> bool:
    """Row i intensity stays positive at every type-i event."""
    D_i = tab._D_by_type[i]
    return bool(np.all(mu_i + D_i @ A_i > config.feasibility_tol))


def _row_norm(d_A_i):
    return float(np.linalg.norm(d_A_i))


def phase2_bcd(data, beta: float, config: FitConfig, phase1: Phase1Result) -> FitResult:
    tab = _tables(data, beta, config)
    mu = phase1.params.mu.copy()
    A = phase1.params.A.copy()
    lam1 = config.lambda1
    trace = phase1.trace
    order, k = select_rows(phase1.gradients, config.p_select)
    selected = order[:k]
    for i in selected:
        # A-row loop, mu_i held at its phase-1 value.  A step must strictly
        # lower the gradient norm; rows with a constant gradient (no events of
        # type i) would otherwise walk forever.
        gamma = config.gamma2
        _, g = row_grad(mu[i], A[i], tab, i, lam1)
        g_norm = _row_norm(g)
        steps = 0
        while gamma > config.gamma0 and steps < config.max_inner_iters and g_norm > 0:
            steps += 1
            cand = A[i] + gamma * g / g_norm
            _, g_new = row_grad(mu[i], cand, tab, i, lam1)
            new_norm = _row_norm(g_new)
            if not np.all(np.isfinite(g_new)) or new_norm >= g_norm or not _row_ok(mu[i], cand, tab, i, config):
                gamma *= 0.5
                continue
            A[i], g, g_norm = cand, g_new, new_norm
        trace.add("phase2", gamma, None, None, note=f"row {i}: {steps} steps, grad norm {g_norm:.6g}")
        # mu_i loop, projected onto mu_i >= 0
        gamma = config.gamma2
        d_mu_i, _ = row_grad(mu[i], A[i], tab, i, lam1)
        if mu[i] <= 0:
            trace.note("phase2", gamma, f"mu[{i}] is zero after phase 1; mu loop skipped")
            continue
        steps = 0
        while gamma > config.gamma0 and mu[i] > 0 and steps < config.max_inner_iters and d_mu_i != 0:
            steps += 1
            cand = max(mu[i] + gamma * math.copysign(1.0, d_mu_i), 0.0)
            new_d, _ = row_grad(cand, A[i], tab, i, lam1)
            if not math.isfinite(new_d) or abs(new_d) >= abs(d_mu_i) or not _row_ok(cand, A[i], tab, i, config):
                gamma *= 0.5
                continue
            mu[i], d_mu_i = cand, new_d
        trace.add("phase2", gamma, None, None, note=f"mu[{i}]: {steps} steps")
    params = HawkesParams(mu, A, beta)
    value, g = surrogate_value_and_grad(params, tab, lam1)
    trace.add("final", config.gamma0, g, value)
    return FitResult(params, selected, trace, phase1.loglik, "two_phase")


def fit_two_phase(data, beta: float, config: FitConfig) -> FitResult:
    tab = _tables(data, beta, config)
    return phase2_bcd(tab, beta, config, phase1_pgd(tab, beta, config))


def fit_vanilla_gd(data, beta: float, config: FitConfig, gamma: float | None = None,
                   iters: int | None = None) -> FitResult:
    """Fixed-step normalised ascent on (mu, A) with no projection on A."""
    tab = _tables(data, beta, config)
    gamma = defaults.VANILLA_GAMMA if gamma is None else gamma
    iters = config.phase1_iters if iters is None else iters
    start = initial_params(tab.d, beta, config)
    mu, A = start.mu.copy(), start.A.copy()
    lam1 = config.lambda1
    trace = FitTrace()
    value, g = surrogate_value_and_grad(start, tab, lam1)
    diverged = False
    for _ in range(iters):
        trace.add("vanilla", gamma, g, value)
        new_mu = np.maximum(mu + gamma * _unit(g.d_mu), 0.0)
        new_A = A + gamma * _unit(g.d_A)
        new_value, new_g = surrogate_value_and_grad(HawkesParams(new_mu, new_A, beta), tab, lam1)
        if not new_g.is_finite():
            gamma *= 0.5
            trace.note("vanilla", gamma, "non-finite gradient; step reverted")
            continue
        mu, A, value, g = new_mu, new_A, new_value, new_g
    if not math.isfinite(value):
        diverged = True
        trace.note("vanilla", gamma, "ended outside the feasible region")
    params = HawkesParams(mu, A, beta)
    return FitResult(params, [], trace, _safe_loglik(params, tab), "vanilla_gd", diverged)


def fit_early_stopped_gd(data, beta: float, config: FitConfig, gamma: float | None = None) -> FitResult:
    """Normalised ascent that halves its step whenever the gradient norm grows."""
    tab = _tables(data, beta, config)
    gamma = defaults.EARLY_STOP_GAMMA if gamma is None else gamma
    start = initial_params(tab.d, beta, config)
    mu, A = start.mu.copy(), start.A.copy()
    lam1 = config.lambda1
    trace = FitTrace()
    value, g = surrogate_value_and_grad(start, tab, lam1)
    g_norm = g.norm()
    steps = 0
    while gamma > config.gamma0 and steps < config.max_inner_iters * 5:
        steps += 1
        trace.add("early_stopped", gamma, g, value)
        new_mu = np.maximum(mu + gamma * _unit(g.d_mu), 0.0)
        new_A = A + gamma * _unit(g.d_A)
        new_value, new_g = surrogate_value_and_grad(HawkesParams(new_mu, new_A, beta), tab, lam1)
        if not new_g.is_finite():
            gamma *= 0.5
            trace.note("early_stopped", gamma, "non-finite gradient; step reverted")
            continue
        new_norm = new_g.norm()
        if new_norm > g_norm:
            gamma *= 0.5
        mu, A, value, g, g_norm = new_mu, new_A, new_value, new_g, new_norm
    params = HawkesParams(mu, A, beta)
    return FitResult(params, [], trace, _safe_loglik(params, tab), "early_stopped_gd", not math.isfinite(value))


def _safe_loglik(params, tab) -> float:
    try:
        return surrogate_loglik(params, tab)
    except IntractableLikelihood:
        return -math.inf


def fit_restart_sgd(data, beta: float, config: FitConfig, gamma: float | None = None) -> FitResult:
    """Per-sequence SGD on the exact (restart) likelihood.

    Each proposal must stay feasible on the whole dataset, otherwise it is
    rejected and the step halved.  At the end of an epoch the step is halved
    if the full gradient norm grew.
    """
    tab = _tables(data, beta, config)
    dataset = tab.dataset
    per_seq = [prepare(dataset.with_sequences([s]), beta) for s in dataset.sequences]
    gamma = defaults.RESTART_SGD_GAMMA if gamma is None else gamma
    start = initial_params(tab.d, beta, config)
    mu, A = start.mu.copy(), start.A.copy()
    lam1 = config.lambda1
    tol = config.feasibility_tol
    trace = FitTrace()
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 11]))
    g_full = restart_grad(start, tab, lam1)
    prev_norm = g_full.norm()
    trace.add("restart_sgd", gamma, g_full, restart_loglik(start, tab, lam1))
    epoch = 0
    while gamma > config.gamma0 and epoch < config.max_epochs:
        epoch += 1
        for s in rng.permutation(len(per_seq)):
            params = HawkesParams(mu, A, beta)
            g = restart_grad(params, per_seq[s], lam1)
            new_mu = np.maximum(mu + gamma * _unit(g.d_mu), 0.0)
            new_A = A + gamma * _unit(g.d_A)
            lam = event_intensities(HawkesParams(new_mu, new_A, beta), tab)
            if not np.all(lam > tol):
                gamma *= 0.5
                if gamma <= config.gamma0:
                    break
                continue
            mu, A = new_mu, new_A
        params = HawkesParams(mu, A, beta)
        g_full = restart_grad(params, tab, lam1)
        norm = g_full.norm()
        trace.add("restart_sgd", gamma, g_full, restart_loglik(params, tab, lam1), note=f"epoch {epoch}")
        if norm > prev_norm:
            gamma *= 0.5
        prev_norm = norm
    params = HawkesParams(mu, A, beta)
    return FitResult(params, [], trace, _safe_loglik(params, tab), "restart_sgd")


METHOD_FITS = {
    "two_phase": fit_two_phase,
    "vanilla_gd": fit_vanilla_gd,
    "early_stopped_gd": fit_early_stopped_gd,
    "restart_sgd": fit_restart_sgd,
}


@dataclass
class GridResult:
    best: dict
    table: list  # dicts with beta, lambda1, gamma1, loglik
    fit: FitResult

    def to_dict(self, timings: bool = True) -> dict:
        return {"best": self.best, "table": self.table, "fit": self.fit.to_dict(timings)}

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2, default=_json_float) + "\n"


def _json_float(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _phase1_point(args):
    dataset, beta, cfg = args
    try:
        res = phase1_pgd(prepare(dataset, beta, cfg.truncated_compensator), beta, cfg)
    except (ArithmeticError, FloatingPointError):
        return -math.inf, None
    value = res.loglik if math.isfinite(res.loglik) else -math.inf
    return value, res


def grid_search(data, beta_grid, lambda1_grid, gamma1_grid, config: FitConfig,
                workers: int | None = 1) -> GridResult:
    """Pick (beta, lambda1, gamma1) by the end-of-phase-1 surrogate loglik.

    The score is the unpenalised loglik so that different lambda1 values are
    comparable.  Ties go to the earliest grid point.
    """
    beta_grid, lambda1_grid, gamma1_grid = list(beta_grid), list(lambda1_grid), list(gamma1_grid)
    if not (beta_grid and lambda1_grid and gamma1_grid):
        raise ValueError("grids must be nonempty")
    dataset = data.dataset if isinstance(data, DecayTables) else data
    points = [(float(b), float(l), float(g)) for b, l, g in itertools.product(beta_grid, lambda1_grid, gamma1_grid)]
    jobs = [(dataset, b, config.updated(lambda1=l, gamma1=g)) for b, l, g in points]
    if workers is None:
        workers = os.cpu_count() or 1
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outcomes = list(pool.map(_phase1_point, jobs))
    else:
        outcomes = [_phase1_point(job) for job in jobs]
    table = []
    best = None
    for (beta, lam1, g1), (value, res) in zip(points, outcomes):
        table.append({"beta": beta, "lambda1": lam1, "gamma1": g1, "loglik": value})
        if best is None or value > best[1]:
            best = ((beta, lam1, g1), value, res)
    (beta, lam1, g1), best_value, best_phase1 = best
    cfg = config.updated(lambda1=lam1, gamma1=g1)
    tab = prepare(dataset, beta, cfg.truncated_compensator)
    if best_phase1 is None:
        best_phase1 = phase1_pgd(tab, beta, cfg)
    fit = phase2_bcd(tab, beta, cfg, best_phase1)
    return GridResult({"beta": beta, "lambda1": lam1, "gamma1": g1, "loglik": best_value}, table, fit)
