"""Recurrent-event data model, CSV ingestion and event-stratified risk sets.

Stratum ``s`` (1-based in the docs, 0-based in arrays) holds subjects awaiting
their ``s``-th event.  A subject with event times ``t_1 < t_2 < ...`` and
follow-up ``T`` is at risk in stratum ``s`` on ``(t_{s-1}, min(t_s, T)]`` with
``t_0 = 0``.  Intervals are open on the left so that at an event instant the
subject still belongs to the stratum of the event it experiences (left-limit
convention).  After the ``B``-th event a subject leaves every modeled risk set.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

WIDE_COVARIATES = ("pyridoxine", "thiotepa", "number", "size")


class DataFormatError(ValueError):
    """Raised on malformed input files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    follow_up: float
    terminal: bool
    event_times: tuple[float, ...]
    covariates: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=float).reshape(-1)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "event_times", tuple(float(t) for t in self.event_times))
        if not np.all(np.isfinite(x)):
            raise ValueError(f"subject {self.id}: covariates must be finite")
        if not (math.isfinite(self.follow_up) and self.follow_up > 0):
            raise ValueError(f"subject {self.id}: follow-up must be finite and positive")
        prev = 0.0
        for t in self.event_times:
            if not t > prev:
                raise ValueError(f"subject {self.id}: event times must be positive and strictly increasing")
            prev = t
        if self.event_times and self.event_times[-1] > self.follow_up:
            raise ValueError(f"subject {self.id}: event after follow-up")


@dataclass(frozen=True)
class Dataset:
    subjects: tuple[SubjectRecord, ...]
    B: int
    covariate_names: tuple[str, ...] = ()
    tau: float | None = None
    n_dropped: int = 0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not self.subjects:
            raise ValueError("dataset has no subjects")
        p = self.subjects[0].covariates.size
        for s in self.subjects:
            if s.covariates.size != p:
                raise ValueError(f"subject {s.id}: expected {p} covariates, got {s.covariates.size}")
        if not self.covariate_names:
            object.__setattr__(self, "covariate_names", tuple(f"x{j + 1}" for j in range(p)))
        elif len(self.covariate_names) != p:
            raise ValueError("covariate_names length does not match covariate dimension")
        tmax = max(s.follow_up for s in self.subjects)
        if self.tau is None:
            object.__setattr__(self, "tau", tmax)
        elif self.tau < tmax:
            raise ValueError("tau must be >= every follow-up time")

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> int:
        return self.subjects[0].covariates.size

    @property
    def X(self) -> np.ndarray:
        return np.vstack([s.covariates for s in self.subjects])

    def subset(self, idx: Sequence[int]) -> "Dataset":
        return Dataset(
            tuple(self.subjects[i] for i in idx), self.B, self.covariate_names, self.tau
        )

    def with_covariates(self, X: np.ndarray) -> "Dataset":
        """Copy with the covariate matrix replaced (rows in subject order)."""
        X = np.asarray(X, dtype=float)
        subj = tuple(
            SubjectRecord(s.id, s.follow_up, s.terminal, s.event_times, X[i])
            for i, s in enumerate(self.subjects)
        )
        names = self.covariate_names if X.shape[1] == len(self.covariate_names) else ()
        return Dataset(subj, self.B, names, self.tau, self.n_dropped)


# risk sums fall back to direct summation when the mass removed by the
# cumulative-sum difference exceeds the kept mass by this factor
CANCELLATION_RATIO = 1e3


@dataclass(frozen=True)
class RiskRows:
    """Counting-process rows ``(start, stop]`` with an event flag at ``stop``.

    One row per (subject, stratum) for a single stratum; the pooled risk set is
    the concatenation of all strata rows, so a subject may own several rows
    there (never overlapping).
    """

    subj: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    event: np.ndarray
    X: np.ndarray

    @property
    def m(self) -> int:
        return self.subj.size

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @cached_property
    def event_rows(self) -> np.ndarray:
        """Row indices of events, sorted by event time."""
        idx = np.flatnonzero(self.event)
        return idx[np.argsort(self.stop[idx], kind="stable")]

    @cached_property
    def event_times(self) -> np.ndarray:
        return self.stop[self.event_rows]

    @cached_property
    def _stop_order(self):
        order = np.argsort(self.stop, kind="stable")
        pos = np.searchsorted(self.stop[order], self.event_times, side="left")
        return order, pos

    @cached_property
    def _start_order(self):
        order = np.argsort(self.start, kind="stable")
        # rows with start >= t are *not* at risk at t
        pos = np.searchsorted(self.start[order], self.event_times, side="left")
        return order, pos

    def risk_sums(self, values: np.ndarray) -> np.ndarray:
        """Sum ``values`` (rows x k) over the risk set of each event.

        Row ``r`` is at risk at ``t`` iff ``start_r < t <= stop_r``.  Computed
        with two reverse cumulative sums, O(m log m).  Their difference loses
        relative precision when the rows already left behind outweigh the
        current risk set by orders of magnitude (large linear predictors), so
        those events are summed directly.
        """
        values = np.asarray(values, dtype=float)
        o1, p1 = self._stop_order
        o2, p2 = self._start_order
        c1 = _reverse_cumsum(values[o1])
        c2 = _reverse_cumsum(values[o2])
        out = c1[p1] - c2[p2]
        mag = np.abs(values).reshape(values.shape[0], -1).sum(axis=1)
        removed = _reverse_cumsum(mag[o2])[p2]
        kept = _reverse_cumsum(mag[o1])[p1] - removed
        bad = np.flatnonzero(removed > CANCELLATION_RATIO * np.maximum(kept, 0.0))
        if bad.size:
            t = self.event_times[bad, None]
            mask = (self.start[None, :] < t) & (t <= self.stop[None, :])
            out[bad] = np.tensordot(mask.astype(float), values, axes=(1, 0))
        return out

    def risk_matrix(self) -> np.ndarray:
        """Dense (events x rows) at-risk indicator; used for small problems and tests."""
        t = self.event_times[:, None]
        return (self.start[None, :] < t) & (t <= self.stop[None, :])

    def change_points(self) -> np.ndarray:
        return np.unique(np.concatenate([self.start, self.stop]))


def _reverse_cumsum(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1,) + a.shape[1:])
    out[:-1] = np.cumsum(a[::-1], axis=0)[::-1]
    return out


@dataclass(frozen=True)
class StratifiedDesign:
    n: int
    p: int
    B: int
    strata: tuple[RiskRows, ...]

    @cached_property
    def pooled(self) -> RiskRows:
        """Rows of the unstratified risk set ``Y_i(t)``: union of all strata."""
        cat = lambda name: np.concatenate([getattr(r, name) for r in self.strata])
        return RiskRows(cat("subj"), cat("start"), cat("stop"), cat("event"),
                        np.vstack([r.X for r in self.strata]))

    def events_per_stratum(self) -> np.ndarray:
        return np.array([r.n_events for r in self.strata])

    def at_risk(self, t: float) -> np.ndarray:
        """(n x B) indicator matrix of ``Y_i^s(t)``."""
        Y = np.zeros((self.n, self.B), dtype=bool)
        for s, r in enumerate(self.strata):
            inside = (r.start < t) & (t <= r.stop)
            Y[r.subj[inside], s] = True
        return Y


def subject_intervals(rec: SubjectRecord, B: int) -> list[tuple[float, float, bool]]:
    """At-risk intervals ``(start, stop, ends_in_event)`` for strata 1..B."""
    ev = rec.event_times[:B]
    out = []
    start = 0.0
    for s in range(B):
        if s < len(ev):
            out.append((start, ev[s], True))
            start = ev[s]
        else:
            if rec.follow_up > start:
                out.append((start, rec.follow_up, False))
            break
    return out


def build_design(data: Dataset) -> StratifiedDesign:
    rows = [[] for _ in range(data.B)]
    for i, rec in enumerate(data.subjects):
        for s, (a, b, e) in enumerate(subject_intervals(rec, data.B)):
            rows[s].append((i, a, b, e))
    X = data.X
    strata = []
    for s in range(data.B):
        r = rows[s]
        subj = np.array([x[0] for x in r], dtype=int)
        strata.append(RiskRows(
            subj,
            np.array([x[1] for x in r], dtype=float),
            np.array([x[2] for x in r], dtype=float),
            np.array([x[3] for x in r], dtype=bool),
            X[subj] if subj.size else np.zeros((0, data.p)),
        ))
    return StratifiedDesign(data.n, data.p, data.B, tuple(strata))


# ---------------------------------------------------------------------------
# CSV I/O


def _cap_events(events: list[float], B: int) -> tuple[list[float], int]:
    if len(events) > B:
        return events[:B], len(events) - B
    return events, 0


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(f"cannot parse {what} {text!r}", line) from None
    if not math.isfinite(v):
        raise DataFormatError(f"{what} must be finite", line)
    return v


def _parse_flag(text: str, what: str, line: int) -> bool:
    if text.strip() not in ("0", "1"):
        raise DataFormatError(f"{what} must be 0 or 1, got {text!r}", line)
    return text.strip() == "1"


def load_long_csv(path, B: int) -> Dataset:
    """Read counting-process long format ``id,tstart,tstop,event,terminal,x1..xp``.

    Per subject the intervals must tile ``(0, T_i]``.  Recurrences beyond the
    ``B``-th are dropped and counted (a ``UserWarning`` reports the total).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        lines = list(csv.reader(fh))
    if not lines:
        raise DataFormatError("empty file", 1)
    header = [h.strip() for h in lines[0]]
    if header[:5] != ["id", "tstart", "tstop", "event", "terminal"] or len(header) < 6:
        raise DataFormatError("header must be id,tstart,tstop,event,terminal,x1,...,xp", 1)
    names = tuple(header[5:])
    p = len(names)

    groups: dict[str, list] = {}
    for lineno, row in enumerate(lines[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5 + p:
            raise DataFormatError(f"expected {5 + p} fields, got {len(row)}", lineno)
        sid = row[0].strip()
        t0 = _parse_float(row[1], "tstart", lineno)
        t1 = _parse_float(row[2], "tstop", lineno)
        if not t1 > t0:
            raise DataFormatError("tstop must exceed tstart", lineno)
        ev = _parse_flag(row[3], "event", lineno)
        term = _parse_flag(row[4], "terminal", lineno)
        x = [_parse_float(c, header[5 + k], lineno) for k, c in enumerate(row[5:])]
        groups.setdefault(sid, []).append((t0, t1, ev, term, x, lineno))
    if not groups:
        raise DataFormatError("no data rows", 2)

    subjects = []
    dropped = 0
    for sid, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        expected = 0.0
        events = []
        for k, (t0, t1, ev, term, x, lineno) in enumerate(rows):
            if t0 != expected:
                raise DataFormatError(
                    f"subject {sid}: intervals must be contiguous from 0 (expected tstart {expected})", lineno)
            if term and k != len(rows) - 1:
                raise DataFormatError(f"subject {sid}: terminal flag only allowed on last interval", lineno)
            if x != rows[0][4]:
                raise DataFormatError(f"subject {sid}: time-varying covariates are not supported", lineno)
            if ev:
                events.append(t1)
            expected = t1
        events, d = _cap_events(events, B)
        dropped += d
        subjects.append(SubjectRecord(sid, rows[-1][1], rows[-1][3], events, np.array(rows[0][4])))
    if dropped:
        warnings.warn(f"dropped {dropped} events beyond stratum B={B}", UserWarning, stacklevel=2)
    return Dataset(tuple(subjects), B, names, n_dropped=dropped)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_long_csv(data: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "tstart", "tstop", "event", "terminal", *data.covariate_names])
        for rec in data.subjects:
            x = [_fmt(v) for v in rec.covariates]
            start = 0.0
            for t in rec.event_times:
                last = t == rec.follow_up
                w.writerow([rec.id, _fmt(start), _fmt(t), 1, int(rec.terminal and last), *x])
                start = t
            if rec.follow_up > start:
                w.writerow([rec.id, _fmt(start), _fmt(rec.follow_up), 0, int(rec.terminal), *x])


def load_wide_recurrences(path, B: int) -> Dataset:
    """Read bladder-style wide data ``id,pyridoxine,thiotepa,number,size,futime,status,r1..rK``."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = list(csv.reader(fh))
    if not lines:
        raise DataFormatError("empty file", 1)
    header = [h.strip() for h in lines[0]]
    fixed = ["id", *WIDE_COVARIATES, "futime", "status"]
    if header[:7] != fixed:
        raise DataFormatError("header must start with " + ",".join(fixed), 1)
    K = len(header) - 7
    subjects = []
    dropped = 0
    for lineno, row in enumerate(lines[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 7 + K:
            raise DataFormatError(f"expected {7 + K} fields, got {len(row)}", lineno)
        x = np.array([_parse_float(row[1 + k], WIDE_COVARIATES[k], lineno) for k in range(4)])
        futime = _parse_float(row[5], "futime", lineno)
        if not futime > 0:
            raise DataFormatError("futime must be positive", lineno)
        status = _parse_flag(row[6], "status", lineno)
        rec = [c.strip() for c in row[7:]]
        while rec and not rec[-1]:
            rec.pop()
        if any(not c for c in rec):
            raise DataFormatError("blank recurrence followed by a recurrence", lineno)
        times = [_parse_float(c, f"r{k + 1}", lineno) for k, c in enumerate(rec)]
        prev = 0.0
        for t in times:
            if not t > prev:
                raise DataFormatError("recurrence times must be positive and strictly increasing", lineno)
            prev = t
        if times and times[-1] > futime:
            raise DataFormatError("recurrence time after futime", lineno)
        times, d = _cap_events(times, B)
        dropped += d
        subjects.append(SubjectRecord(row[0].strip(), futime, status, times, x))
    if not subjects:
        raise DataFormatError("no data rows", 2)
    if dropped:
        warnings.warn(f"dropped {dropped} events beyond stratum B={B}", UserWarning, stacklevel=2)
    return Dataset(tuple(subjects), B, WIDE_COVARIATES, n_dropped=dropped)


def load_dataset(path, B: int, fmt: str = "long") -> Dataset:
    if fmt == "long":
        return load_long_csv(path, B)
    if fmt == "wide":
        return load_wide_recurrences(path, B)
    raise ValueError(f"unknown format {fmt!r}")
