"""Trial datasets: ingestion, artificial data-cuts and Kaplan-Meier curves."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

COLUMNS = ("id", "endpoint", "arm", "time", "event", "age", "sex", "country")
SEXES = ("female", "male")
_COUNTRY_RE = re.compile(r"^[A-Z]{2,3}$")


class SchemaError(ValueError):
    """Input file does not have the expected structure."""


class ValidationError(ValueError):
    """A row holds a value outside its domain."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    endpoint: str
    arm: str
    time: float
    event: int
    age: float
    sex: str
    country: str

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValidationError(f"time must be positive and finite, got {self.time!r}")
        if self.event not in (0, 1):
            raise ValidationError(f"event must be 0 or 1, got {self.event!r}")
        if not (self.age >= 0 and math.isfinite(self.age)):
            raise ValidationError(f"age must be non-negative, got {self.age!r}")
        if self.sex not in SEXES:
            raise ValidationError(f"unknown sex {self.sex!r}")
        if not _COUNTRY_RE.match(self.country):
            raise ValidationError(f"unknown country code {self.country!r}")


@dataclass(frozen=True)
class TrialDataset:
    """Immutable collection of subject rows.

    ``endpoints`` and ``arms`` fix the index order used by the models; when not
    given they follow order of first appearance in ``records``.
    """

    records: tuple[SubjectRecord, ...]
    endpoints: tuple[str, ...] = ()
    arms: tuple[str, ...] = ()

    def __post_init__(self):
        recs = tuple(self.records)
        object.__setattr__(self, "records", recs)
        seen_e = tuple(dict.fromkeys(r.endpoint for r in recs))
        seen_a = tuple(dict.fromkeys(r.arm for r in recs))
        if not self.endpoints:
            object.__setattr__(self, "endpoints", seen_e)
        if not self.arms:
            object.__setattr__(self, "arms", seen_a)
        for label in seen_e:
            if label not in self.endpoints:
                raise ValidationError(f"endpoint {label!r} not declared")
        for label in seen_a:
            if label not in self.arms:
                raise ValidationError(f"arm {label!r} not declared")

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def time(self) -> np.ndarray:
        return np.array([r.time for r in self.records], dtype=float)

    @cached_property
    def event(self) -> np.ndarray:
        return np.array([r.event for r in self.records], dtype=np.int8)

    @cached_property
    def age(self) -> np.ndarray:
        return np.array([r.age for r in self.records], dtype=float)

    @cached_property
    def endpoint_index(self) -> np.ndarray:
        lookup = {e: j for j, e in enumerate(self.endpoints)}
        return np.array([lookup[r.endpoint] for r in self.records], dtype=np.intp)

    @cached_property
    def arm_index(self) -> np.ndarray:
        lookup = {a: k for k, a in enumerate(self.arms)}
        return np.array([lookup[r.arm] for r in self.records], dtype=np.intp)

    @cached_property
    def covariate_means(self) -> dict[str, float]:
        if not self.records:
            return {"age": 0.0}
        return {"age": math.fsum(r.age for r in self.records) / len(self.records)}

    def cell(self, arm: str, endpoint: str) -> TrialDataset:
        recs = [r for r in self.records if r.arm == arm and r.endpoint == endpoint]
        return TrialDataset(tuple(recs), self.endpoints, self.arms)


def _parse_row(raw: dict[str, str], row: int) -> SubjectRecord:
    try:
        time = float(raw["time"])
    except ValueError:
        raise ValidationError(f"time {raw['time']!r} is not a number", row) from None
    try:
        event_f = float(raw["event"])
    except ValueError:
        raise ValidationError(f"event {raw['event']!r} is not a number", row) from None
    try:
        age = float(raw["age"])
    except ValueError:
        raise ValidationError(f"age {raw['age']!r} is not a number", row) from None
    if event_f not in (0.0, 1.0):
        raise ValidationError(f"event must be 0 or 1, got {raw['event']!r}", row)
    try:
        return SubjectRecord(
            id=raw["id"].strip(),
            endpoint=raw["endpoint"].strip(),
            arm=raw["arm"].strip(),
            time=time,
            event=int(event_f),
            age=age,
            sex=raw["sex"].strip().lower(),
            country=raw["country"].strip().upper(),
        )
    except ValidationError as exc:
        raise ValidationError(str(exc), row) from None


def load_dataset(path: str | Path, delimiter: str = ",") -> TrialDataset:
    """Read a delimited subject file with header ``id,endpoint,arm,time,event,age,sex,country``.

    Rows are numbered from 1 (the first data row after the header) in error
    messages. Extra columns are ignored.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = [h.strip() for h in (reader.fieldnames or [])]
        for col in COLUMNS:
            if col not in header:
                raise SchemaError(f"missing column {col!r}")
        reader.fieldnames = header
        records = [_parse_row(raw, i) for i, raw in enumerate(reader, start=1)]
    return TrialDataset(tuple(records))


def write_dataset(data: TrialDataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in data.records:
            writer.writerow([r.id, r.endpoint, r.arm, repr(r.time), r.event,
                             repr(r.age), r.sex, r.country])


def apply_datacut(data: TrialDataset, cut: float) -> TrialDataset:
    """Censor every subject still followed at ``cut`` months at that time."""
    if not cut > 0:
        raise ValueError(f"data-cut must be positive, got {cut!r}")
    records = tuple(
        replace(r, time=float(cut), event=0) if r.time > cut else r for r in data.records
    )
    return TrialDataset(records, data.endpoints, data.arms)


@dataclass(frozen=True)
class KMCurve:
    """Product-limit estimate on the distinct event times.

    ``times[0]`` is always 0 with survival 1, so the curve can be read as a
    right-continuous step function from the origin.
    """

    times: np.ndarray
    survival: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __call__(self, t) -> np.ndarray:
        """Evaluate the step function at arbitrary times."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return self.survival[np.clip(idx, 0, None)]


def kaplan_meier(times: Sequence[float], events: Sequence[int], level: float = 0.95) -> KMCurve:
    """Kaplan-Meier survival with Greenwood intervals on the log-survival scale.

    Censored observations tied with an event time stay in that event's risk set.
    Where the estimate reaches zero the log-scale interval is undefined and
    the bounds collapse to zero.
    """
    t = np.asarray(times, dtype=float)
    d = np.asarray(events, dtype=int)
    if t.size == 0:
        raise ValueError("kaplan_meier needs at least one observation")
    if t.shape != d.shape:
        raise ValueError("times and events must have equal length")
    if np.any(t <= 0):
        raise ValueError("times must be positive")

    event_times = np.unique(t[d == 1])
    n_risk = np.array([(t >= s).sum() for s in event_times], dtype=int)
    n_event = np.array([((t == s) & (d == 1)).sum() for s in event_times], dtype=int)

    surv = np.cumprod(1.0 - n_event / n_risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = n_event / (n_risk * (n_risk - n_event))
    # Var(log S) by Greenwood; infinite once the curve has hit zero
    var_log = np.cumsum(np.where(n_risk > n_event, terms, np.inf))
    z = stats.norm.ppf(0.5 + level / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_s = np.log(surv)
        half = z * np.sqrt(var_log)
        lower = np.where(surv > 0, np.exp(log_s - half), 0.0)
        upper = np.where(surv > 0, np.exp(log_s + half), 0.0)
    lower = np.clip(np.nan_to_num(lower, nan=0.0), 0.0, 1.0)
    upper = np.clip(np.nan_to_num(upper, nan=0.0), 0.0, 1.0)

    return KMCurve(
        times=np.concatenate([[0.0], event_times]),
        survival=np.concatenate([[1.0], surv]),
        lower95=np.concatenate([[1.0], lower]),
        upper95=np.concatenate([[1.0], upper]),
        n_risk=np.concatenate([[t.size], n_risk]),
        n_event=np.concatenate([[0], n_event]),
    )


def km_by_cell(data: TrialDataset) -> Iterable[tuple[str, str, KMCurve | None]]:
    """Yield ``(arm, endpoint, curve)``; ``curve`` is None for an empty cell."""
    for arm in data.arms:
        for endpoint in data.endpoints:
            cell = data.cell(arm, endpoint)
            if len(cell) == 0:
                yield arm, endpoint, None
            else:
                yield arm, endpoint, kaplan_meier(cell.time, cell.event)
