"""Seeded synthetic studies: consistency, beta grid, baselines, runtime, sign recovery, chains.

Trial k of a plan uses seed ``plan.seed + k``.  Every configuration of a
trial shares that seed, so horizons or sequence counts are compared on the
same ground truth.  Trials are independent and may run in a process pool;
records are collected in submission order, so serial and parallel runs give
identical tables.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import defaults
from .chains import rank_chains
from .core import FitConfig, HawkesParams, atomic_write_text
from .estimate import METHOD_FITS, fit_two_phase, phase1_pgd, phase2_bcd
from .graph import make_graph, metrics
from .likelihood import prepare, restart_grad, surrogate_grad
from .simulate import GenConfig, generate_synthetic_problem, sample_dataset

EXPERIMENTS = ("consistency", "beta_grid", "baselines", "runtime", "sign_recovery", "chains")
METHODS = METHOD_FITS
LARGE_D = 10  # dimensions above this need allow_large_d

# d = 3 example with inhibition at (0, 2) and (1, 0)
SIGN_EXAMPLE = {
    "mu": [0.2, 0.5, 0.05],
    "A": [[0.1, 0.2, -0.3], [-0.1, 0.1, 0.0], [0.5, 0.0, 0.5]],
    "beta": 0.6,
}

CHAIN_DEFAULTS = {
    "d": 4,
    "mu": 0.1,
    "beta": 1.0,
    "horizon": 24.0,
    "cohort_size": 200,
    "source": 0,
    "target": 1,
    "weight": 0.8,
    "cuts": [0.1, 0.2],
    "max_len": 4,
    "alpha": 0.1,
}


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentPlan:
    experiment: str
    d: int = 5
    horizons: tuple = (500.0,)
    n_sequences: tuple = (1,)
    trials: int = 20
    seed: int = 0
    beta: float = defaults.SYNTH_BETA
    beta_grid: tuple = defaults.BETA_GRID
    methods: tuple = ("two_phase",)
    evaluations: int = 50
    fit: dict = field(default_factory=dict)  # FitConfig overrides
    options: dict = field(default_factory=dict)  # experiment-specific settings
    allow_large_d: bool = False

    def __post_init__(self):
        for name in ("horizons", "n_sequences", "beta_grid", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        problems = []
        if self.experiment not in EXPERIMENTS:
            problems.append(f"experiment must be one of {EXPERIMENTS}")
        if self.trials < 1:
            problems.append("trials must be at least 1")
        if self.d < 1:
            problems.append("d must be positive")
        if self.d > LARGE_D and not self.allow_large_d:
            problems.append(f"d={self.d} exceeds {LARGE_D}; set allow_large_d to run it")
        if not self.horizons or any(not h > 0 for h in self.horizons):
            problems.append("horizons must be positive")
        if not self.n_sequences or any(n < 1 for n in self.n_sequences):
            problems.append("n_sequences must be positive")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            problems.append(f"unknown methods {unknown}")
        if self.evaluations < 1:
            problems.append("evaluations must be positive")
        try:
            self.fit_config()
        except (TypeError, ValueError) as exc:
            problems.append(f"fit overrides: {exc}")
        if problems:
            raise PlanError("invalid plan: " + "; ".join(problems))

    def fit_config(self) -> FitConfig:
        return FitConfig.from_dict({**FitConfig().to_dict(), **self.fit})

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("horizons", "n_sequences", "beta_grid", "methods"):
            out[k] = list(out[k])
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise PlanError(f"unknown plan fields: {sorted(unknown)}")
        if "experiment" not in obj:
            raise PlanError("plan needs an 'experiment' field")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise PlanError(f"invalid plan: {exc}") from None


def read_plan(path) -> ExperimentPlan:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PlanError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentPlan.from_dict(obj)


DEFAULT_PLANS = {
    "consistency": dict(d=5, horizons=(500.0, 2000.0, 5000.0), n_sequences=(1,)),
    "multi_sequence": dict(experiment="consistency", d=10, horizons=(500.0,), n_sequences=(1, 10, 50)),
    "beta_grid": dict(d=5, horizons=(500.0,), n_sequences=(50,)),
    "baselines": dict(d=10, horizons=(500.0,), n_sequences=(100,), methods=tuple(METHODS)),
    "runtime": dict(d=5, horizons=(240.0, 480.0, 960.0), n_sequences=(400,), trials=1),
    "runtime_d10": dict(experiment="runtime", d=10, horizons=(240.0,), n_sequences=(400,), trials=1),
    "sign_recovery": dict(d=3, horizons=(120.0,), n_sequences=(200,), beta=0.6, fit={"p_select": 1.0}),
    "chains": dict(d=4, trials=50),
}


def default_plan(name: str, trials: int | None = None, seed: int = 0) -> ExperimentPlan:
    """Desk-scale plans behind the acceptance checks."""
    if name not in DEFAULT_PLANS:
        raise PlanError(f"no default plan {name!r}; choose from {sorted(DEFAULT_PLANS)}")
    fields = {"experiment": name, "trials": 20, "seed": seed, **DEFAULT_PLANS[name]}
    if trials is not None:
        fields["trials"] = trials
    return ExperimentPlan(**fields)


# -- trials -------------------------------------------------------------------


def configurations(plan: ExperimentPlan) -> list:
    if plan.experiment == "sign_recovery":
        return [{"horizon": plan.horizons[0], "n_sequences": plan.n_sequences[0]}]
    if plan.experiment == "chains":
        return [{}]
    return [{"horizon": T, "n_sequences": n} for T, n in itertools.product(plan.horizons, plan.n_sequences)]


def _fit_metrics(truth: HawkesParams, params_hat: HawkesParams) -> dict:
    m = metrics(truth.A, params_hat.A, truth.mu, params_hat.mu, truth.beta, params_hat.beta)
    return {"A_err": m.A_err, "mu_err": m.mu_err, "hd": m.hd, "shd": float(m.shd)}


def _problem(plan, config, seed):
    gen = GenConfig(plan.d, config["horizon"], config["n_sequences"], seed=seed, beta=plan.beta)
    return generate_synthetic_problem(gen)


def _trial_consistency(plan, config, seed):
    problem = _problem(plan, config, seed)
    cfg = plan.fit_config().updated(seed=seed)
    fit = fit_two_phase(problem.dataset, plan.beta, cfg)
    return [{"method": "two_phase", **_fit_metrics(problem.truth, fit.params_hat)}]


def _trial_baselines(plan, config, seed):
    problem = _problem(plan, config, seed)
    cfg = plan.fit_config().updated(seed=seed)
    rows = []
    for name in plan.methods:
        fit = METHODS[name](problem.dataset, plan.beta, cfg)
        rows.append({"method": name, **_fit_metrics(problem.truth, fit.params_hat)})
    return rows


def _trial_beta_grid(plan, config, seed):
    problem = _problem(plan, config, seed)
    cfg = plan.fit_config().updated(seed=seed)
    rows = []
    best = None
    for beta in plan.beta_grid:
        phase1 = phase1_pgd(problem.dataset, beta, cfg)
        fit = phase2_bcd(problem.dataset, beta, cfg, phase1)
        row = {"method": f"beta={beta:g}", "beta": beta, "phase1_loglik": phase1.loglik,
               **_fit_metrics(problem.truth, fit.params_hat)}
        rows.append(row)
        score = phase1.loglik if math.isfinite(phase1.loglik) else -math.inf
        if best is None or score > best[0]:
            best = (score, row)
    rows.append({**best[1], "method": "selected"})
    return rows


def _time_calls(fn, args, evaluations):
    fn(*args)  # warm caches and imports
    t0 = time.perf_counter()
    for _ in range(evaluations):
        fn(*args)
    return (time.perf_counter() - t0) / evaluations


def _trial_runtime(plan, config, seed):
    # Decay tables depend only on the data and beta, so an optimiser builds
    # them once; the per-iteration cost is the gradient call on cached tables.
    problem = _problem(plan, config, seed)
    params = problem.truth
    t0 = time.perf_counter()
    tab = prepare(problem.dataset, params.beta)
    build = time.perf_counter() - t0
    n_events = float(problem.dataset.n_events)
    return [
        {"method": "surrogate_grad", "seconds": _time_calls(surrogate_grad, (params, tab), plan.evaluations),
         "n_events": n_events, "build_seconds": build},
        {"method": "restart_grad", "seconds": _time_calls(restart_grad, (params, tab), plan.evaluations),
         "n_events": n_events, "build_seconds": build},
    ]


def sign_pattern(A, tol: float) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return np.sign(np.where(np.abs(A) < tol, 0.0, A)).astype(int)


def _trial_sign_recovery(plan, config, seed):
    example = {**SIGN_EXAMPLE, **plan.options.get("truth", {})}
    truth = HawkesParams(np.array(example["mu"], float), np.array(example["A"], float), float(example["beta"]))
    tol = float(plan.options.get("sign_tol", 0.05))
    data = sample_dataset(truth, config["horizon"], config["n_sequences"], seed)
    fit = fit_two_phase(data, truth.beta, plan.fit_config().updated(seed=seed))
    match = np.array_equal(sign_pattern(fit.params_hat.A, tol), sign_pattern(truth.A, tol))
    return [{"method": "two_phase", "sign_match": float(match),
             "A_err": float(np.abs(fit.params_hat.A - truth.A).sum())}]


def _cohort_seed(seed: int, cohort: int) -> int:
    return int(np.random.SeedSequence([int(seed), 21, cohort]).generate_state(1)[0])


def chain_cohorts(seed: int, options: dict | None = None):
    """Cohort 1 carries one injected exciting edge, cohort 2 has none, and a
    control cohort is a fresh draw from cohort 1's model."""
    o = {**CHAIN_DEFAULTS, **(options or {})}
    d = int(o["d"])
    mu = np.full(d, float(o["mu"]))
    A = np.zeros((d, d))
    A[int(o["target"]), int(o["source"])] = float(o["weight"])
    injected = HawkesParams(mu, A, float(o["beta"]))
    plain = HawkesParams(mu, np.zeros((d, d)), float(o["beta"]))
    T, n = float(o["horizon"]), int(o["cohort_size"])
    cohort1 = sample_dataset(injected, T, n, _cohort_seed(seed, 0))
    cohort2 = sample_dataset(plain, T, n, _cohort_seed(seed, 1))
    control = sample_dataset(injected, T, n, _cohort_seed(seed, 2))
    return injected, cohort1, cohort2, control


def _trial_chains(plan, config, seed):
    o = {**CHAIN_DEFAULTS, **plan.options}
    truth, cohort1, cohort2, control = chain_cohorts(seed, o)
    fit = fit_two_phase(cohort1, truth.beta, plan.fit_config().updated(seed=seed))
    graph = make_graph(fit.params_hat.A, cohort1.type_names, tuple(o["cuts"]))
    injected = (int(o["source"]), int(o["target"]))
    ranking = rank_chains(graph, cohort1, cohort2, int(o["max_len"]), float(o["alpha"]))
    top = ranking.reports[0] if ranking.reports else None
    first = top is not None and top.chain == injected and top.p_value <= o["alpha"]
    null = rank_chains(graph, cohort1, control, int(o["max_len"]), float(o["alpha"]))
    return [{
        "method": "two_phase",
        "injected_first": float(first),
        "injected_p": top.p_value if top is not None and top.chain == injected else math.nan,
        "n_chains": float(len(ranking.reports)),
        "control_flagged": float(len(null.significant())),
        "control_quiet": float(not null.significant()),
    }]


_TRIALS = {
    "consistency": _trial_consistency,
    "baselines": _trial_baselines,
    "beta_grid": _trial_beta_grid,
    "runtime": _trial_runtime,
    "sign_recovery": _trial_sign_recovery,
    "chains": _trial_chains,
}


def run_trial(plan: ExperimentPlan, config: dict, trial: int) -> list:
    """Records for one (configuration, trial); failures become a single failed record."""
    seed = plan.seed + trial
    base = {"config": config_label(config), "trial": trial, "seed": seed}
    t0 = time.perf_counter()
    try:
        rows = _TRIALS[plan.experiment](plan, config, seed)
    except Exception as exc:  # noqa: BLE001 - a failed trial is data, not a crash
        return [{**base, "method": "", "status": "failed", "error": f"{type(exc).__name__}: {exc}"}]
    elapsed = time.perf_counter() - t0
    return [{**base, **row, "status": "ok", "error": "", "elapsed": elapsed} for row in rows]


def config_label(config: dict) -> str:
    if not config:
        return "default"
    parts = []
    for k, v in config.items():
        parts.append(f"{k}={v:g}" if isinstance(v, (int, float)) else f"{k}={v}")
    return ",".join(parts)


def _run_one(args):
    plan, config, trial = args
    return run_trial(plan, config, trial)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# -- aggregation --------------------------------------------------------------


NON_METRICS = {"config", "trial", "seed", "method", "status", "error", "elapsed", "beta"}


def aggregate(records: list) -> list:
    """Median, mean and population std per (config, method) over successful trials."""
    groups: dict = {}
    failures: dict = {}
    for r in records:
        key = (r["config"], r["method"])
        if r["status"] != "ok":
            failures[r["config"]] = failures.get(r["config"], 0) + 1
            continue
        groups.setdefault(key, []).append(r)
    rows = []
    for (config, method), recs in groups.items():
        row = {"config": config, "method": method, "n_ok": len(recs), "n_failed": failures.get(config, 0)}
        names = [k for k in recs[0] if k not in NON_METRICS and isinstance(recs[0][k], float)]
        for name in names:
            values = np.array([r[name] for r in recs], dtype=float)
            values = values[~np.isnan(values)]
            row[f"{name}_median"] = float(np.median(values)) if values.size else math.nan
            row[f"{name}_mean"] = float(np.mean(values)) if values.size else math.nan
            row[f"{name}_std"] = float(np.std(values)) if values.size else math.nan
        rows.append(row)
    for config, count in failures.items():
        if not any(r["config"] == config for r in rows):
            rows.append({"config": config, "method": "", "n_ok": 0, "n_failed": count})
    return rows


@dataclass
class ExperimentResult:
    plan: ExperimentPlan
    records: list
    table: list

    def row(self, method: str, config: str | None = None) -> dict:
        for r in self.table:
            if r["method"] == method and (config is None or r["config"] == config):
                return r
        raise KeyError(f"no row for method={method!r} config={config!r}")

    def column(self, metric: str, method: str = "two_phase") -> list:
        """metric values for `method` in configuration order."""
        return [r[metric] for r in self.table if r["method"] == method]

    def to_json(self) -> str:
        return json.dumps({"plan": self.plan.to_dict(), "table": self.table}, indent=2, default=_json_default) + "\n"

    def write(self, out_dir, force: bool = False) -> list:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "records.csv": _to_csv(self.records),
            "summary.csv": _to_csv(self.table),
            "summary.json": self.to_json(),
        }
        written = []
        for name, text in files.items():
            path = out / name
            if path.exists() and not force:
                raise FileExistsError(f"{path} exists; pass --force to overwrite")
            atomic_write_text(path, text)
            written.append(path)
        return written


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _to_csv(rows: list) -> str:
    columns = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def run_experiment(plan: ExperimentPlan, workers: int | None = None) -> ExperimentResult:
    jobs = [(plan, config, trial) for config in configurations(plan) for trial in range(plan.trials)]
    workers = default_workers() if workers is None else max(1, int(workers))
    if plan.experiment == "runtime":
        workers = 1  # concurrent timings would contaminate each other
    if workers == 1 or len(jobs) == 1:
        batches = [_run_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            batches = list(pool.map(_run_one, jobs))
    records = [r for batch in batches for r in batch]
    return ExperimentResult(plan, records, aggregate(records))
