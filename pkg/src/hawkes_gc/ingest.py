"""Turn tabular measurements into abnormality events on a per-patient window."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from . import defaults
from .core import Dataset, DataError, EventSequence

log = logging.getLogger(__name__)

PREDICATES = ("greater", "less", "outside")
MEASUREMENT_COLUMNS = ("patient_id", "time", "measurement", "value")


@dataclass(frozen=True)
class ThresholdRule:
    event_name: str
    measurement: str
    predicate: str
    bounds: tuple

    def __post_init__(self):
        if self.predicate not in PREDICATES:
            raise ValueError(f"unknown predicate {self.predicate!r}; expected one of {PREDICATES}")
        bounds = tuple(float(x) for x in np.atleast_1d(self.bounds))
        want = 2 if self.predicate == "outside" else 1
        if len(bounds) != want:
            raise ValueError(f"{self.predicate} takes {want} bound(s), got {len(bounds)}")
        if self.predicate == "outside" and not bounds[0] < bounds[1]:
            raise ValueError(f"outside({bounds[0]}, {bounds[1]}) needs lo < hi")
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def greater(cls, event_name, measurement, x):
        return cls(event_name, measurement, "greater", (x,))

    @classmethod
    def less(cls, event_name, measurement, x):
        return cls(event_name, measurement, "less", (x,))

    @classmethod
    def outside(cls, event_name, measurement, lo, hi):
        return cls(event_name, measurement, "outside", (lo, hi))

    def holds(self, values):
        v = np.asarray(values, dtype=float)
        if self.predicate == "greater":
            return v > self.bounds[0]
        if self.predicate == "less":
            return v < self.bounds[0]
        lo, hi = self.bounds
        return (v < lo) | (v > hi)

    def to_dict(self) -> dict:
        arg = list(self.bounds) if self.predicate == "outside" else self.bounds[0]
        return {"event": self.event_name, "measurement": self.measurement, self.predicate: arg}

    @classmethod
    def from_dict(cls, obj: dict) -> "ThresholdRule":
        preds = [p for p in PREDICATES if p in obj]
        if len(preds) != 1:
            raise ValueError(f"rule needs exactly one of {PREDICATES}: {obj}")
        return cls(str(obj["event"]), str(obj["measurement"]), preds[0], obj[preds[0]])


@dataclass(frozen=True)
class WindowSpec:
    anchor_column: str
    before: float
    after: float

    def __post_init__(self):
        if self.before < 0 or self.after < 0:
            raise ValueError("window offsets must be nonnegative")
        if not self.before + self.after > 0:
            raise ValueError("window must have positive length")

    @property
    def length(self) -> float:
        return float(self.before + self.after)

    def to_dict(self) -> dict:
        return {"anchor_column": self.anchor_column, "before": self.before, "after": self.after}


@dataclass(frozen=True)
class IngestConfig:
    rules: tuple
    window: WindowSpec
    bin_hours: float = defaults.BIN_HOURS

    def __post_init__(self):
        if not self.rules:
            raise ValueError("at least one rule is required")
        if not self.bin_hours > 0:
            raise ValueError("bin_hours must be positive")

    def event_names(self) -> tuple:
        return tuple(dict.fromkeys(r.event_name for r in self.rules))

    def to_dict(self) -> dict:
        return {
            "rules": [r.to_dict() for r in self.rules],
            "window": self.window.to_dict(),
            "bin_hours": self.bin_hours,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "IngestConfig":
        try:
            rules = tuple(ThresholdRule.from_dict(r) for r in obj["rules"])
            w = obj["window"]
            window = WindowSpec(str(w["anchor_column"]), float(w["before"]), float(w["after"]))
        except KeyError as exc:
            raise ValueError(f"ingest config is missing {exc.args[0]!r}") from None
        return cls(rules, window, float(obj.get("bin_hours", defaults.BIN_HOURS)))


def read_ingest_config(path) -> IngestConfig:
    return IngestConfig.from_dict(json.loads(Path(path).read_text()))


def builtin_rules_config() -> IngestConfig:
    """The bundled vital-sign and lab thresholds for the sepsis-style event types."""
    text = resources.files("hawkes_gc").joinpath("data/sad_rules.json").read_text()
    return IngestConfig.from_dict(json.loads(text))


@dataclass
class IngestReport:
    n_patients: int = 0
    skipped_no_anchor: list = field(default_factory=list)
    inert_rules: list = field(default_factory=list)
    n_events: int = 0

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "skipped_no_anchor": list(self.skipped_no_anchor),
            "inert_rules": [r.to_dict() for r in self.inert_rules],
            "n_events": self.n_events,
        }


# -- time handling ------------------------------------------------------------


def _to_hours(col: pd.Series, what: str) -> np.ndarray:
    """Real hours pass through; anything else is parsed as ISO-8601 and measured from the epoch."""
    numeric = pd.to_numeric(col, errors="coerce")
    if numeric.notna().all():
        return numeric.to_numpy(dtype=float)
    try:
        stamps = pd.to_datetime(col, utc=True, format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"cannot parse {what} as hours or ISO-8601: {exc}") from None
    if stamps.isna().any():
        raise DataError(f"missing {what} values")
    epoch = pd.Timestamp("1970-01-01", tz="UTC")
    return ((stamps - epoch) / pd.Timedelta(hours=1)).to_numpy(dtype=float)


def read_measurements(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read measurements: {exc}", str(path)) from None
    missing = [c for c in MEASUREMENT_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"measurement table lacks columns {missing}", str(path))
    return frame


def _anchor_map(measurements: pd.DataFrame, anchors, column: str) -> dict:
    if anchors is None:
        if column not in measurements.columns:
            raise DataError(f"no anchors given and no {column!r} column in the measurements")
        frame = measurements[["patient_id", column]].dropna().drop_duplicates("patient_id")
    elif isinstance(anchors, dict):
        return {k: float(v) for k, v in anchors.items() if v is not None and not pd.isna(v)}
    else:
        frame = pd.DataFrame(anchors)
        if "patient_id" not in frame.columns or column not in frame.columns:
            raise DataError(f"anchor table needs patient_id and {column!r} columns")
        frame = frame[["patient_id", column]].dropna().drop_duplicates("patient_id")
    if frame.empty:
        return {}
    hours = _to_hours(frame[column], "anchor time")
    return dict(zip(frame["patient_id"].tolist(), hours.tolist()))


# -- eventization -------------------------------------------------------------


def _exact_mean(values) -> float:
    # fsum keeps bin means unchanged when rows are duplicated
    return math.fsum(values) / len(values)


def eventize_with_report(measurements: pd.DataFrame, config: IngestConfig, anchors=None):
    missing = [c for c in MEASUREMENT_COLUMNS if c not in measurements.columns]
    if missing:
        raise DataError(f"measurement table lacks columns {missing}")
    names = config.event_names()
    type_of = {n: k for k, n in enumerate(names)}
    report = IngestReport()
    known = set(measurements["measurement"].astype(str).unique())
    report.inert_rules = [r for r in config.rules if r.measurement not in known]
    if report.inert_rules:
        listed = ", ".join(f"{r.measurement} ({r.event_name})" for r in report.inert_rules)
        warnings.warn(f"{len(report.inert_rules)} rule(s) inert, no measurements for: {listed}", stacklevel=2)

    frame = measurements.loc[:, list(MEASUREMENT_COLUMNS)].copy()
    frame["measurement"] = frame["measurement"].astype(str)
    frame["value"] = pd.to_numeric(frame["value"], errors="coerce")
    frame = frame.dropna(subset=["value"])
    frame["hours"] = _to_hours(frame["time"], "time") if len(frame) else np.zeros(0)
    anchor = _anchor_map(measurements, anchors, config.window.anchor_column)

    window = config.window
    horizon = window.length
    patients = sorted(pd.unique(measurements["patient_id"]).tolist(), key=_sort_key)
    by_patient = dict(tuple(frame.groupby("patient_id", sort=False)))
    seqs = []
    for pid in patients:
        if pid not in anchor:
            report.skipped_no_anchor.append(pid)
            continue
        start = anchor[pid] - window.before
        rows = by_patient.get(pid)
        events = set()
        if rows is not None:
            rel = rows["hours"].to_numpy() - start
            inside = (rel >= 0) & (rel < horizon)
            rows = rows.loc[inside].assign(bin=np.floor(rel[inside] / config.bin_hours).astype(np.int64))
            means = rows.groupby(["bin", "measurement"])["value"].agg(_exact_mean)
            for rule in config.rules:
                if rule.measurement not in known:
                    continue
                try:
                    series = means.xs(rule.measurement, level="measurement")
                except KeyError:
                    continue
                hit = series.index.to_numpy()[rule.holds(series.to_numpy())]
                events.update((int(b), type_of[rule.event_name]) for b in hit)
        ordered = sorted(events)
        times = np.array([b * config.bin_hours for b, _ in ordered], dtype=float)
        marks = np.array([k for _, k in ordered], dtype=np.int64)
        seqs.append(EventSequence(str(pid), horizon, times, marks))
        report.n_events += len(ordered)
    report.n_patients = len(seqs)
    if report.skipped_no_anchor:
        log.warning("skipped %d patient(s) without an anchor time", len(report.skipped_no_anchor))
    return Dataset(len(names), names, tuple(seqs)), report


def eventize(measurements: pd.DataFrame, config: IngestConfig, anchors=None) -> Dataset:
    return eventize_with_report(measurements, config, anchors)[0]


def _sort_key(pid):
    # numeric ids sort numerically, everything else as text after them
    try:
        return (0, float(pid), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(pid))
