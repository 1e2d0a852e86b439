"""Domain types shared by every module, plus the events/params file formats.

Events are stored as JSON lines: a header ``{"d": ..., "type_names": [...]}``
followed by one object per sequence ``{"seq_id", "horizon", "events": [[t, mark], ...]}``.
A CSV alternative with columns ``seq_id,time,mark`` (optional ``horizon``) is
accepted on read.  Parameters are a single JSON object ``{"d", "beta", "mu", "A"}``
where ``A[i][j]`` is the effect of type ``j`` on type ``i``.
"""
from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import defaults


class DataError(ValueError):
    """Malformed or structurally inconsistent input data."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ParamsError(ValueError):
    """HawkesParams invariant violated."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EventSequence:
    seq_id: str
    horizon: float
    times: np.ndarray
    marks: np.ndarray

    def __post_init__(self):
        times = _frozen(self.times).reshape(-1)
        marks = np.array(self.marks, dtype=np.int64, copy=True).reshape(-1)
        marks.setflags(write=False)
        if times.shape != marks.shape:
            raise DataError(f"sequence {self.seq_id!r}: {times.size} times but {marks.size} marks")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "seq_id", str(self.seq_id))

    @classmethod
    def from_events(cls, seq_id, horizon, events: Iterable[Sequence]) -> "EventSequence":
        events = list(events)
        times = [float(t) for t, _ in events]
        marks = [int(m) for _, m in events]
        return cls(seq_id, horizon, np.asarray(times, dtype=float), np.asarray(marks, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.times.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (
            self.seq_id == other.seq_id
            and self.horizon == other.horizon
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.marks, other.marks)
        )

    def __hash__(self):
        return hash((self.seq_id, self.horizon, self.times.tobytes(), self.marks.tobytes()))

    def simultaneous_pairs(self) -> list[tuple[int, int]]:
        """Index pairs (n, n+1) of adjacent events sharing a timestamp."""
        if len(self) < 2:
            return []
        idx = np.flatnonzero(self.times[1:] == self.times[:-1])
        return [(int(n), int(n) + 1) for n in idx]

    def counts(self, d: int) -> np.ndarray:
        return np.bincount(self.marks, minlength=d)[:d]


@dataclass(frozen=True, eq=False)
class Dataset:
    d: int
    type_names: tuple[str, ...]
    sequences: tuple[EventSequence, ...]

    def __post_init__(self):
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "type_names", tuple(str(n) for n in self.type_names))
        object.__setattr__(self, "sequences", tuple(self.sequences))
        if self.d <= 0:
            raise DataError(f"d must be positive, got {self.d}")
        if len(self.type_names) != self.d:
            raise DataError(f"{len(self.type_names)} type names for d={self.d}")

    @classmethod
    def of(cls, sequences, d: int, type_names=None) -> "Dataset":
        if type_names is None:
            type_names = default_type_names(d)
        return cls(d, tuple(type_names), tuple(sequences))

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.d == other.d
            and self.type_names == other.type_names
            and self.sequences == other.sequences
        )

    @property
    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)

    @property
    def total_horizon(self) -> float:
        return float(sum(s.horizon for s in self.sequences))

    def subset(self, indices) -> "Dataset":
        return Dataset(self.d, self.type_names, tuple(self.sequences[i] for i in indices))

    def with_sequences(self, sequences) -> "Dataset":
        return Dataset(self.d, self.type_names, tuple(sequences))


def default_type_names(d: int) -> tuple[str, ...]:
    return tuple(f"type{i}" for i in range(d))


@dataclass(frozen=True, eq=False)
class HawkesParams:
    """Background rates ``mu``, interaction matrix ``A`` (row = target) and decay ``beta``."""

    mu: np.ndarray
    A: np.ndarray
    beta: float

    def __post_init__(self):
        mu = _frozen(self.mu)
        A = _frozen(self.A)
        beta = float(self.beta)
        if mu.ndim != 1:
            raise ParamsError(f"mu must be a vector, got shape {mu.shape}")
        d = mu.size
        if A.shape != (d, d):
            raise ParamsError(f"A has shape {A.shape}, expected ({d}, {d})")
        if not beta > 0 or not math.isfinite(beta):
            raise ParamsError(f"beta must be positive and finite, got {beta}")
        if np.any(mu < 0):
            raise ParamsError("mu entries must be nonnegative")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(A))):
            raise ParamsError("parameters must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "beta", beta)

    @property
    def d(self) -> int:
        return int(self.mu.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HawkesParams):
            return NotImplemented
        return (
            self.beta == other.beta
            and np.array_equal(self.mu, other.mu)
            and np.array_equal(self.A, other.A)
        )

    def __hash__(self):
        return hash((self.beta, self.mu.tobytes(), self.A.tobytes()))

    def replace(self, mu=None, A=None, beta=None) -> "HawkesParams":
        return HawkesParams(
            self.mu if mu is None else mu,
            self.A if A is None else A,
            self.beta if beta is None else beta,
        )

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "beta": self.beta,
            "mu": [float(x) for x in self.mu],
            "A": [[float(x) for x in row] for row in self.A],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "HawkesParams":
        try:
            mu = np.asarray(obj["mu"], dtype=float)
            A = np.asarray(obj["A"], dtype=float)
            beta = float(obj["beta"])
        except KeyError as exc:
            raise ParamsError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ParamsError(f"bad parameter value: {exc}") from None
        d = obj.get("d")
        if d is not None and int(d) != mu.size:
            raise ParamsError(f"d={d} but mu has {mu.size} entries")
        return cls(mu, A, beta)


@dataclass(frozen=True)
class FitConfig:
    gamma1: float = defaults.GAMMA1
    gamma2: float = defaults.GAMMA2
    gamma0: float = defaults.GAMMA0
    p_select: float = defaults.P_SELECT
    lambda1: float = defaults.LAMBDA1
    phase1_iters: int = defaults.PHASE1_ITERS
    phase1_halve_every: int = defaults.PHASE1_HALVE_EVERY
    seed: int = defaults.SEED
    mu_init_range: tuple[float, float] = defaults.MU_INIT_RANGE
    # Caps for the halving loops (per phase-2 row, early-stopped GD, restart SGD epochs).
    max_inner_iters: int = defaults.MAX_INNER_ITERS
    max_epochs: int = defaults.MAX_EPOCHS
    truncated_compensator: bool = False
    feasibility_tol: float = defaults.FEASIBILITY_TOL

    def __post_init__(self):
        object.__setattr__(self, "mu_init_range", tuple(float(x) for x in self.mu_init_range))
        problems = []
        for name in ("gamma1", "gamma2", "gamma0"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if not 0 < self.p_select <= 1:
            problems.append("p_select must lie in (0, 1]")
        if self.lambda1 < 0:
            problems.append("lambda1 must be nonnegative")
        if self.phase1_iters < 1 or self.phase1_halve_every < 1:
            problems.append("iteration counts must be positive")
        if not self.gamma0 < self.gamma2:
            problems.append("gamma0 must be smaller than gamma2")
        if self.phase1_halve_every > self.phase1_iters:
            problems.append("phase1_halve_every must not exceed phase1_iters")
        lo, hi = self.mu_init_range
        if not 0 <= lo <= hi:
            problems.append("mu_init_range must satisfy 0 <= lo <= hi")
        if self.seed < 0:
            problems.append("seed must be unsigned")
        if problems:
            raise ValueError("invalid FitConfig: " + "; ".join(problems))

    def updated(self, **changes) -> "FitConfig":
        fields = {**self.to_dict(), **{k: v for k, v in changes.items() if v is not None}}
        return FitConfig(**fields)

    def to_dict(self) -> dict:
        return {
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "gamma0": self.gamma0,
            "p_select": self.p_select,
            "lambda1": self.lambda1,
            "phase1_iters": self.phase1_iters,
            "phase1_halve_every": self.phase1_halve_every,
            "seed": self.seed,
            "mu_init_range": list(self.mu_init_range),
            "max_inner_iters": self.max_inner_iters,
            "max_epochs": self.max_epochs,
            "truncated_compensator": self.truncated_compensator,
            "feasibility_tol": self.feasibility_tol,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FitConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown FitConfig fields: {sorted(unknown)}")
        return cls(**obj)


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    seq_id: str | None
    rule: str
    index: int | None = None
    detail: str = ""


def validate_dataset(dataset: Dataset) -> list[Violation]:
    """Collect every invariant breach; never raises."""
    out: list[Violation] = []
    if len(dataset.sequences) == 0:
        out.append(Violation(None, "empty dataset"))
    seen_ids = set()
    for seq in dataset.sequences:
        sid = seq.seq_id
        if sid in seen_ids:
            out.append(Violation(sid, "duplicate seq_id"))
        seen_ids.add(sid)
        if not (math.isfinite(seq.horizon) and seq.horizon >= 0):
            out.append(Violation(sid, "invalid horizon", None, f"horizon={seq.horizon}"))
        t = seq.times
        bad_t = ~np.isfinite(t)
        for n in np.flatnonzero(bad_t):
            out.append(Violation(sid, "non-finite time", int(n)))
        for n in np.flatnonzero(np.diff(t) < 0):
            out.append(Violation(sid, "unordered times", int(n) + 1, f"{t[n]} > {t[n + 1]}"))
        for n in np.flatnonzero(np.isfinite(t) & ((t < 0) | (t > seq.horizon))):
            out.append(Violation(sid, "time out of range", int(n), f"t={t[n]}"))
        m = seq.marks
        for n in np.flatnonzero((m < 0) | (m >= dataset.d)):
            out.append(Violation(sid, "mark out of range", int(n), f"mark={m[n]}"))
    return out


# -- file I/O -------------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(x: float) -> str:
    # repr round-trips doubles exactly
    return repr(float(x))


def dataset_to_jsonl(dataset: Dataset) -> str:
    lines = [json.dumps({"d": dataset.d, "type_names": list(dataset.type_names)})]
    for seq in dataset.sequences:
        events = ", ".join(f"[{_num(t)}, {int(m)}]" for t, m in zip(seq.times, seq.marks))
        lines.append(
            f'{{"seq_id": {json.dumps(seq.seq_id)}, "horizon": {_num(seq.horizon)}, '
            f'"events": [{events}]}}'
        )
    return "\n".join(lines) + "\n"


def write_events(dataset: Dataset, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        atomic_write_text(path, dataset_to_csv(dataset))
    else:
        atomic_write_text(path, dataset_to_jsonl(dataset))


def dataset_to_csv(dataset: Dataset) -> str:
    rows = ["seq_id,time,mark,horizon"]
    for seq in dataset.sequences:
        if len(seq) == 0:
            rows.append(f"{seq.seq_id},,,{_num(seq.horizon)}")
        for t, m in zip(seq.times, seq.marks):
            rows.append(f"{seq.seq_id},{_num(t)},{int(m)},{_num(seq.horizon)}")
    return "\n".join(rows) + "\n"


def read_events(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError("file not found", path)
    if path.suffix.lower() == ".csv":
        dataset = _read_events_csv(path)
    else:
        dataset = _read_events_jsonl(path)
    problems = validate_dataset(dataset)
    if problems:
        shown = "; ".join(
            f"{v.rule} in {v.seq_id!r}" + (f" at event {v.index}" if v.index is not None else "")
            + (f" ({v.detail})" if v.detail else "")
            for v in problems[:5]
        )
        more = f" and {len(problems) - 5} more" if len(problems) > 5 else ""
        raise DataError(f"invalid events: {shown}{more}", path)
    return dataset


def _parse_time(value, path, lineno) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DataError(f"non-numeric time {value!r}", path, lineno)
    return float(value)


def _read_events_jsonl(path: Path) -> Dataset:
    header = None
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(obj, dict):
                raise DataError("expected a JSON object", path, lineno)
            if header is None:
                if "d" not in obj:
                    raise DataError("first line must be a header with 'd' and 'type_names'", path, lineno)
                header = obj
                try:
                    d = int(obj["d"])
                except (TypeError, ValueError):
                    raise DataError(f"bad d {obj['d']!r}", path, lineno) from None
                names = obj.get("type_names") or list(default_type_names(d))
                if len(names) != d:
                    raise DataError(f"{len(names)} type names for d={d}", path, lineno)
                continue
            if "d" in obj and int(obj["d"]) != int(header["d"]):
                raise DataError(
                    f"sequence declares d={obj['d']} but header has d={header['d']}", path, lineno
                )
            if "type_names" in obj and list(obj["type_names"]) != list(names):
                raise DataError("sequence type_names disagree with header", path, lineno)
            try:
                sid = obj["seq_id"]
                horizon = obj["horizon"]
                events = obj["events"]
            except KeyError as exc:
                raise DataError(f"missing field {exc.args[0]!r}", path, lineno) from None
            horizon = _parse_time(horizon, path, lineno)
            times, marks = [], []
            for ev in events:
                if not isinstance(ev, (list, tuple)) or len(ev) != 2:
                    raise DataError(f"event {ev!r} is not a [time, mark] pair", path, lineno)
                times.append(_parse_time(ev[0], path, lineno))
                mark = ev[1]
                if isinstance(mark, bool) or not isinstance(mark, int):
                    raise DataError(f"non-integer mark {mark!r}", path, lineno)
                marks.append(mark)
            sequences.append(
                EventSequence(str(sid), horizon, np.asarray(times, float), np.asarray(marks, np.int64))
            )
    if header is None:
        raise DataError("empty events file", path)
    return Dataset(int(header["d"]), tuple(names), tuple(sequences))


def _read_events_csv(path: Path) -> Dataset:
    groups: dict[str, dict] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or [])
        if not {"seq_id", "time", "mark"} <= cols:
            raise DataError("CSV needs columns seq_id,time,mark", path, 1)
        for lineno, row in enumerate(reader, start=2):
            sid = row["seq_id"]
            g = groups.setdefault(sid, {"times": [], "marks": [], "horizon": None})
            if row.get("horizon"):
                try:
                    h = float(row["horizon"])
                except ValueError:
                    raise DataError(f"non-numeric horizon {row['horizon']!r}", path, lineno) from None
                if g["horizon"] is not None and g["horizon"] != h:
                    raise DataError(f"inconsistent horizon for sequence {sid!r}", path, lineno)
                g["horizon"] = h
            if row["time"] in ("", None) and row["mark"] in ("", None):
                continue
            try:
                t = float(row["time"])
            except ValueError:
                raise DataError(f"non-numeric time {row['time']!r}", path, lineno) from None
            try:
                m = int(row["mark"])
            except ValueError:
                raise DataError(f"non-integer mark {row['mark']!r}", path, lineno) from None
            g["times"].append(t)
            g["marks"].append(m)
    if not groups:
        raise DataError("no rows", path)
    d = 1 + max((max(g["marks"]) for g in groups.values() if g["marks"]), default=0)
    seqs = []
    for sid, g in groups.items():
        h = g["horizon"]
        if h is None:
            h = max(g["times"], default=0.0)
        seqs.append(EventSequence(sid, h, np.asarray(g["times"], float), np.asarray(g["marks"], np.int64)))
    return Dataset(d, default_type_names(d), tuple(seqs))


def write_params(params: HawkesParams, path) -> None:
    atomic_write_text(path, params_to_json(params))


def params_to_json(params: HawkesParams) -> str:
    # json.dumps uses repr for floats, so the text round-trips exactly
    return json.dumps(params.to_dict(), indent=2) + "\n"


def read_params(path) -> HawkesParams:
    path = Path(path)
    if not path.exists():
        raise DataError("file not found", path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    if isinstance(obj, dict) and "params" in obj and "mu" not in obj:
        obj = obj["params"]  # a FitResult or SyntheticProblem document
    if not isinstance(obj, dict):
        raise DataError("expected a JSON object", path)
    try:
        return HawkesParams.from_dict(obj)
    except ParamsError as exc:
        raise ParamsError(f"{path}: {exc}") from None
