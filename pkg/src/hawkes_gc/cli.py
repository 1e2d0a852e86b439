"""Command-line entry point: hawkes-gc <subcommand> ...

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import defaults
from .chains import FISHER_MODES, DEFAULT_MODE, ChainLimitError, rank_chains
from .core import (
    DataError,
    FitConfig,
    HawkesParams,
    ParamsError,
    atomic_write_text,
    dataset_to_csv,
    dataset_to_jsonl,
    params_to_json,
    read_events,
    read_params,
)
from .estimate import METHOD_FITS, grid_search
from .experiments import DEFAULT_PLANS, PlanError, _to_csv, default_plan, read_plan, run_experiment
from .graph import export_graph, metrics
from .ingest import builtin_rules_config, eventize_with_report, read_ingest_config, read_measurements
from .likelihood import GradientSingular, IntractableLikelihood
from .simulate import DAGConvergenceError, GenConfig, NonStationaryError, generate_synthetic_problem

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
HELP_WIDTH = 88

log = logging.getLogger("hawkes_gc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _HelpFormatter(argparse.HelpFormatter):
    # show real defaults; None means "taken from --config or computed"
    def _get_help_string(self, action):
        text = action.help or ""
        if action.default in (None, False, argparse.SUPPRESS) or "default" in text:
            return text
        return text + " (default: %(default)s)"


def _formatter(prog):
    return _HelpFormatter(prog, width=HELP_WIDTH)


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# -- outputs and manifests ----------------------------------------------------


def _now(enabled: bool):
    return datetime.now(timezone.utc).isoformat() if enabled else None


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: dict
    outputs: list
    seed: int | None
    version: str
    started: str | None
    finished: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, default=str) + "\n"


@dataclass
class Outputs:
    """Collects files, refuses to clobber without --force, then writes them with a manifest."""

    force: bool
    files: dict = field(default_factory=dict)

    def add(self, path, text: str):
        self.files[Path(path)] = text

    def check(self, manifest_path: Path, extra=()):
        if self.force:
            return
        for path in [*self.files, *extra, manifest_path]:
            if path.exists():
                raise UsageError(f"{path} exists; pass --force to overwrite")

    def commit(self, manifest: RunManifest, manifest_path: Path, times: bool):
        self.check(manifest_path)
        for path, text in self.files.items():
            atomic_write_text(path, text)
        manifest.outputs = [str(p) for p in self.files]
        manifest.finished = _now(times)
        atomic_write_text(manifest_path, manifest.to_json())


def _manifest_path(out: Path) -> Path:
    if out.suffix == "":
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def _finish(args, config: dict, inputs: dict, outputs: Outputs, out: Path, seed=None):
    manifest = RunManifest(args.command, config, inputs, [], seed, tool_version(), args._started)
    outputs.commit(manifest, _manifest_path(out), not args.no_manifest_times)


# -- helpers ------------------------------------------------------------------


def _read_json(path, what: str):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} file not found", path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None


def _float_list(text: str, flag: str):
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise UsageError(f"{flag}: empty list")
    return values


def _fit_config(args) -> FitConfig:
    base = FitConfig().to_dict()
    if getattr(args, "config", None):
        obj = _read_json(args.config, "config")
        if not isinstance(obj, dict):
            raise DataError("fit config must be a JSON object", args.config)
        base.update({k: v for k, v in obj.items() if k != "beta"})
    for flag in ("lambda1", "seed", "gamma1", "gamma2", "p_select"):
        value = getattr(args, flag, None)
        if value is not None:
            base[flag] = value
    try:
        return FitConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--config: {exc}") from None


def _beta_from(args, config_path=None) -> float:
    if args.beta is not None:
        return args.beta
    if config_path:
        obj = _read_json(config_path, "config")
        if isinstance(obj, dict) and "beta" in obj:
            return float(obj["beta"])
    raise UsageError("--beta is required (or give beta in --config)")


# -- subcommands --------------------------------------------------------------


def cmd_simulate(args) -> int:
    fields = {}
    if args.config:
        obj = _read_json(args.config, "config")
        fields.update(obj.get("gen_config", obj))
    for flag, key in (("d", "d"), ("horizon", "horizon"), ("n_sequences", "n_sequences"),
                      ("neg_fraction", "neg_fraction"), ("seed", "seed"), ("beta", "beta")):
        value = getattr(args, flag)
        if value is not None:
            fields[key] = value
    if "d" not in fields or "horizon" not in fields:
        raise UsageError("simulate needs --d and --horizon (or a --config with both)")
    try:
        gen = GenConfig(**fields)
    except TypeError as exc:
        raise UsageError(f"--config: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    problem = generate_synthetic_problem(gen)
    out = Path(args.out)
    outputs = Outputs(args.force)
    outputs.add(out / "events.jsonl", dataset_to_jsonl(problem.dataset))
    outputs.add(out / "truth.json", problem.to_json())
    outputs.check(_manifest_path(out))
    _finish(args, gen.to_dict(), {}, outputs, out, gen.seed)
    return EXIT_OK


def cmd_fit(args) -> int:
    data = read_events(args.events)
    beta = _beta_from(args, args.config)
    cfg = _fit_config(args)
    result = METHOD_FITS[args.method](data, beta, cfg)
    out = Path(args.out)
    outputs = Outputs(args.force)
    times = not args.no_manifest_times
    outputs.add(out, result.to_json(times))
    if args.trace:
        outputs.add(Path(args.trace), result.trace.to_csv(times))
    outputs.check(_manifest_path(out))
    _finish(args, {"beta": beta, "method": args.method, **cfg.to_dict()}, {"events": args.events},
            outputs, out, cfg.seed)
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    data = read_events(args.events)
    grids = {"beta": list(defaults.BETA_GRID), "lambda1": list(defaults.LAMBDA1_GRID),
             "gamma1": list(defaults.GAMMA1_GRID)}
    if args.grid:
        obj = _read_json(args.grid, "grid")
        unknown = set(obj) - set(grids)
        if unknown:
            raise UsageError(f"--grid: unknown keys {sorted(unknown)}")
        grids.update({k: [float(x) for x in v] for k, v in obj.items()})
    if args.beta:
        grids["beta"] = _float_list(args.beta, "--beta")
    if args.lambda1:
        grids["lambda1"] = _float_list(args.lambda1, "--lambda1")
    cfg = _fit_config(argparse.Namespace(config=args.config, seed=args.seed))
    result = grid_search(data, grids["beta"], grids["lambda1"], grids["gamma1"], cfg, workers=args.workers)
    out = Path(args.out)
    outputs = Outputs(args.force)
    outputs.add(out, result.to_json(not args.no_manifest_times))
    outputs.check(_manifest_path(out))
    _finish(args, {"grids": grids, **cfg.to_dict()}, {"events": args.events}, outputs, out, cfg.seed)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    truth = read_params(args.truth)
    estimate = read_params(args.params)
    if truth.d != estimate.d:
        raise DataError(f"estimate has d={estimate.d} but truth has d={truth.d}", args.params)
    m = metrics(truth.A, estimate.A, truth.mu, estimate.mu, truth.beta, estimate.beta)
    out = Path(args.out)
    row = m.to_dict()
    if out.suffix.lower() == ".csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
        text = buf.getvalue()
    else:
        text = json.dumps(row, indent=2) + "\n"
    outputs = Outputs(args.force)
    outputs.add(out, text)
    outputs.check(_manifest_path(out))
    _finish(args, {}, {"truth": args.truth, "params": args.params}, outputs, out)
    return EXIT_OK


def _type_names(args, d):
    if args.type_names:
        names = [x.strip() for x in args.type_names.split(",")]
        if len(names) != d:
            raise UsageError(f"--type-names: expected {d} names, got {len(names)}")
        return names
    if getattr(args, "events", None):
        return list(read_events(args.events).type_names)
    return None


def _cuts(args):
    cuts = _float_list(args.cuts, "--cuts")
    if len(cuts) != 2 or not 0 < cuts[0] < cuts[1]:
        raise UsageError("--cuts: expected two increasing positive numbers")
    return tuple(cuts)


def cmd_graph(args) -> int:
    params = read_params(args.params)
    graph, dot = export_graph(params.A, _type_names(args, params.d), _cuts(args))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", *graph.type_names])
    for i, name in enumerate(graph.type_names):
        w.writerow([name, *(f"{graph.categories[i][j]}{'' if graph.weights[i, j] >= 0 else '-'}"
                            for j in range(graph.d))])
    out = Path(args.out)
    outputs = Outputs(args.force)
    outputs.add(out, dot)
    outputs.add(out.with_suffix(".categories.csv"), buf.getvalue())
    outputs.check(_manifest_path(out))
    _finish(args, {"cuts": list(_cuts(args))}, {"params": args.params}, outputs, out)
    return EXIT_OK


def cmd_chains(args) -> int:
    params = read_params(args.params)
    cohort1 = read_events(args.cohort1)
    cohort2 = read_events(args.cohort2)
    for name, cohort in (("--cohort1", cohort1), ("--cohort2", cohort2)):
        if cohort.d != params.d:
            raise DataError(f"{name} has d={cohort.d} but --params has d={params.d}")
    if tuple(cohort1.type_names) != tuple(cohort2.type_names):
        raise DataError("--cohort1 and --cohort2 use different type names")
    if not 0 < args.alpha < 1:
        raise UsageError("--alpha must lie in (0, 1)")
    if args.max_len < 2:
        raise UsageError("--max-len must be at least 2")
    from .graph import make_graph

    graph = make_graph(params.A, cohort1.type_names, _cuts(args))
    ranking = rank_chains(graph, cohort1, cohort2, args.max_len, args.alpha, args.mode, args.bonferroni)
    out = Path(args.out)
    outputs = Outputs(args.force)
    outputs.add(out, ranking.to_csv())
    outputs.add(out.with_suffix(".json"), ranking.to_json())
    outputs.check(_manifest_path(out))
    config = {"max_len": args.max_len, "alpha": args.alpha, "mode": args.mode,
              "bonferroni": args.bonferroni, "cuts": list(_cuts(args))}
    _finish(args, config, {"params": args.params, "cohort1": args.cohort1, "cohort2": args.cohort2},
            outputs, out)
    return EXIT_OK


def cmd_eventize(args) -> int:
    config = read_ingest_config(args.config) if args.config else builtin_rules_config()
    measurements = read_measurements(args.input)
    anchors = None
    if args.anchors:
        import pandas as pd

        try:
            anchors = pd.read_csv(args.anchors)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise DataError(f"cannot read anchors: {exc}", args.anchors) from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        dataset, report = eventize_with_report(measurements, config, anchors)
    for w in caught:
        log.warning("%s", w.message)
    out = Path(args.out)
    text = dataset_to_csv(dataset) if out.suffix.lower() == ".csv" else dataset_to_jsonl(dataset)
    outputs = Outputs(args.force)
    outputs.add(out, text)
    outputs.check(_manifest_path(out))
    inputs = {"input": args.input, "config": args.config, "anchors": args.anchors}
    _finish(args, {**config.to_dict(), "report": report.to_dict()}, inputs, outputs, out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    if bool(args.config) == bool(args.plan):
        raise UsageError("give exactly one of --config (plan JSON) or --plan (built-in plan name)")
    plan = read_plan(args.config) if args.config else default_plan(args.plan, args.trials, args.seed or 0)
    if args.config and (args.trials is not None or args.seed is not None):
        obj = plan.to_dict()
        if args.trials is not None:
            obj["trials"] = args.trials
        if args.seed is not None:
            obj["seed"] = args.seed
        plan = type(plan).from_dict(obj)
    out = Path(args.out)
    outputs = Outputs(args.force)
    names = ("records.csv", "summary.csv", "summary.json")
    outputs.check(_manifest_path(out), [out / name for name in names])  # before the long run
    result = run_experiment(plan, args.workers)
    if args.no_manifest_times:
        for r in result.records:
            r.pop("elapsed", None)
    outputs.add(out / "records.csv", _to_csv(result.records))
    outputs.add(out / "summary.csv", _to_csv(result.table))
    outputs.add(out / "summary.json", result.to_json())
    _finish(args, plan.to_dict(), {"plan": args.config or args.plan}, outputs, out, plan.seed)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _common(p, out_help: str):
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--no-manifest-times", action="store_true",
                   help="omit timestamps and timings so repeated runs are byte-identical")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hawkes-gc", formatter_class=_formatter,
                     description="Granger-causal graphs from event sequences with a ReLU-linked Hawkes model.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic DAG truth and event sequences",
                       formatter_class=_formatter)
    p.add_argument("--config", help="generator config JSON (fields of GenConfig)")
    p.add_argument("--d", type=int, help="number of event types")
    p.add_argument("--horizon", type=float, help="observation horizon per sequence")
    p.add_argument("--n-sequences", type=int, help="number of sequences (default 1)")
    p.add_argument("--neg-fraction", type=float, help=f"fraction of zero entries made inhibitory (default {defaults.NEG_FRACTION})")
    p.add_argument("--beta", type=float, help=f"decay rate (default {defaults.SYNTH_BETA})")
    p.add_argument("--seed", type=int, help="generator seed (default 0)")
    _common(p, "output directory for events.jsonl and truth.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit (mu, A) at a fixed beta", formatter_class=_formatter)
    p.add_argument("--events", required=True, help="events file (.jsonl or .csv)")
    p.add_argument("--beta", type=float, help="decay rate")
    p.add_argument("--config", help="FitConfig JSON; may also carry beta")
    p.add_argument("--method", choices=sorted(METHOD_FITS), default="two_phase", help="estimator")
    p.add_argument("--lambda1", type=float, help=f"L1 penalty weight (default {defaults.LAMBDA1})")
    p.add_argument("--seed", type=int, help=f"initialisation seed (default {defaults.SEED})")
    p.add_argument("--trace", help="also write the optimisation trace to this CSV file")
    _common(p, "FitResult JSON path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gridsearch", help="choose beta, lambda1 and gamma1 by end-of-phase-1 loglik",
                       formatter_class=_formatter)
    p.add_argument("--events", required=True, help="events file (.jsonl or .csv)")
    p.add_argument("--grid", help='grid JSON, e.g. {"beta": [...], "lambda1": [...], "gamma1": [...]}')
    p.add_argument("--beta", help="comma-separated beta grid (default: "
                   + ",".join(f"{b:g}" for b in defaults.BETA_GRID) + ")")
    p.add_argument("--lambda1", help="comma-separated lambda1 grid (default: "
                   + ",".join(f"{b:g}" for b in defaults.LAMBDA1_GRID) + ")")
    p.add_argument("--config", help="FitConfig JSON for the remaining settings")
    p.add_argument("--seed", type=int, help=f"initialisation seed (default {defaults.SEED})")
    p.add_argument("--workers", type=int, default=None, help="processes for grid points (default: available CPUs)")
    _common(p, "grid table and winning fit as JSON")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("evaluate", help="compare an estimate with the truth", formatter_class=_formatter)
    p.add_argument("--truth", required=True, help="true params JSON (truth.json from simulate works)")
    p.add_argument("--params", required=True, help="estimated params JSON (a fit result works)")
    _common(p, "metrics file; .csv for CSV, anything else for JSON")
    p.set_defaults(func=cmd_evaluate)

    cuts = ",".join(f"{c:g}" for c in defaults.STRENGTH_CUTS)
    p = sub.add_parser("graph", help="export the GC graph as DOT plus a category matrix",
                       formatter_class=_formatter)
    p.add_argument("--params", required=True, help="params JSON (a fit result works)")
    p.add_argument("--events", help="events file whose type names label the nodes")
    p.add_argument("--type-names", help="comma-separated node names")
    p.add_argument("--cuts", default=cuts, help="|weight| boundaries between +, ++ and +++")
    _common(p, "DOT path; the category matrix goes next to it as .categories.csv")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("chains", help="rank GC chains by how specific they are to cohort 1",
                       formatter_class=_formatter)
    p.add_argument("--params", required=True, help="params JSON whose A defines the graph")
    p.add_argument("--cohort1", required=True, help="events of cohort 1")
    p.add_argument("--cohort2", required=True, help="events of cohort 2")
    p.add_argument("--max-len", type=int, default=defaults.MAX_CHAIN_LEN, help="longest chain")
    p.add_argument("--alpha", type=float, default=defaults.ALPHA, help="significance level")
    p.add_argument("--mode", choices=FISHER_MODES, default=DEFAULT_MODE, help="Fisher test variant")
    p.add_argument("--bonferroni", action="store_true", help="judge significance on Bonferroni-adjusted p")
    p.add_argument("--cuts", default=cuts, help="|weight| boundaries between +, ++ and +++")
    _common(p, "ranking CSV; a JSON copy goes next to it")
    p.set_defaults(func=cmd_chains)

    p = sub.add_parser("eventize", help="threshold measurements into events", formatter_class=_formatter)
    p.add_argument("--input", required=True, help="CSV with patient_id,time,measurement,value")
    p.add_argument("--config", help="rules and window JSON (default: bundled thresholds)")
    p.add_argument("--anchors", help="CSV with patient_id and the window's anchor column")
    _common(p, "events file; .csv for CSV, anything else for JSONL")
    p.set_defaults(func=cmd_eventize)

    p = sub.add_parser("experiment", help="run a seeded synthetic study", formatter_class=_formatter)
    p.add_argument("--config", help="plan JSON")
    p.add_argument("--plan", choices=tuple(DEFAULT_PLANS), metavar="NAME",
                   help="built-in plan, one of: " + ", ".join(DEFAULT_PLANS))
    p.add_argument("--trials", type=int, help="override the number of trials")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: available CPUs)")
    _common(p, "output directory for records.csv, summary.csv and summary.json")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    args._started = _now(not getattr(args, "no_manifest_times", False))
    try:
        return args.func(args)
    except (UsageError, PlanError, ChainLimitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParamsError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IntractableLikelihood, GradientSingular, NonStationaryError, DAGConvergenceError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
