"""General-population background mortality from abridged life tables.

Tables hold conditional probabilities of death ``q`` for the half-open
five-year bands [0, 5), ..., [80, 85) and a constant annual hazard from 85.
Within a band the hazard is constant, ``-ln(1 - q) / 5`` per year. Nobody
survives to 100.

File format (comma separated, header required)::

    country,sex,age_start,q5
    GBR,female,0,0.0043
    ...
    GBR,female,80,0.2301
    GBR,female,85,0.1582     <- annual hazard for ages 85-100
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import TrialDataset

BAND_WIDTH = 5.0
N_BANDS = 17  # [0, 5) ... [80, 85)
OPEN_AGE = 85.0
MAX_AGE = 100.0
MONTHS_PER_YEAR = 12.0


class LifeTableError(ValueError):
    pass


@dataclass(frozen=True)
class LifeTable:
    country: str
    sex: str
    q: tuple[float, ...]
    over85_rate: float

    def __post_init__(self):
        if len(self.q) != N_BANDS:
            raise LifeTableError(f"expected {N_BANDS} five-year bands, got {len(self.q)}")
        for i, q in enumerate(self.q):
            if not 0.0 < q < 1.0:
                raise LifeTableError(
                    f"{self.country}/{self.sex}: q={q!r} for band {5 * i}-{5 * i + 5} outside (0, 1)"
                )
        if not self.over85_rate > 0:
            raise LifeTableError(f"{self.country}/{self.sex}: over-85 rate must be positive")

    @property
    def band_hazards(self) -> np.ndarray:
        """Per-year hazards for the 17 bands followed by the over-85 rate."""
        h = [-math.log1p(-q) / BAND_WIDTH for q in self.q]
        return np.array(h + [self.over85_rate])

    @property
    def cumulative_at_breaks(self) -> np.ndarray:
        """Cumulative hazard from birth to each break 0, 5, ..., 85, 100."""
        widths = np.array([BAND_WIDTH] * N_BANDS + [MAX_AGE - OPEN_AGE])
        return np.concatenate([[0.0], np.cumsum(self.band_hazards * widths)])


_BREAKS = np.concatenate([np.arange(0.0, OPEN_AGE + 1, BAND_WIDTH), [MAX_AGE]])


def load_life_table(path: str | Path) -> dict[tuple[str, str], LifeTable]:
    """Read life tables keyed by ``(country, sex)``."""
    rows: dict[tuple[str, str], dict[float, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        for col in ("country", "sex", "age_start", "q5"):
            if col not in header:
                raise LifeTableError(f"missing column {col!r}")
        reader.fieldnames = header
        for i, raw in enumerate(reader, start=1):
            key = (raw["country"].strip().upper(), raw["sex"].strip().lower())
            try:
                age = float(raw["age_start"])
                value = float(raw["q5"])
            except ValueError:
                raise LifeTableError(f"row {i}: non-numeric age_start or q5") from None
            bands = rows.setdefault(key, {})
            if age in bands:
                raise LifeTableError(f"{key}: duplicate band starting at {age:g}")
            bands[age] = value

    tables = {}
    for key, bands in rows.items():
        expected = [BAND_WIDTH * i for i in range(N_BANDS)] + [OPEN_AGE]
        for age in bands:
            if age not in expected:
                raise LifeTableError(f"{key}: band starting at {age:g} overlaps the 5-year grid")
        for a in expected:
            if a not in bands:
                what = "over-85 rate" if a == OPEN_AGE else f"band {a:g}-{a + BAND_WIDTH:g}"
                raise LifeTableError(f"{key}: gap in table, missing {what}")
        q = tuple(bands[a] for a in expected[:-1])
        tables[key] = LifeTable(key[0], key[1], q, bands[OPEN_AGE])
    return tables


def background_hazard(table: LifeTable, attained_age, multiplier: float = 1.0):
    """Hazard per year at the attained age; ``inf`` from age 100 on."""
    a = np.asarray(attained_age, dtype=float)
    if np.any(a < 0):
        raise ValueError("attained age must be non-negative")
    idx = np.minimum(np.floor(a / BAND_WIDTH).astype(int), N_BANDS)
    h = multiplier * table.band_hazards[idx]
    return np.where(a >= MAX_AGE, np.inf, h)


def cumulative_hazard_to_age(table: LifeTable, age, multiplier: float = 1.0):
    """Integrated hazard from birth to ``age`` (years); ``inf`` from 100."""
    a = np.asarray(age, dtype=float)
    idx = np.minimum(np.searchsorted(_BREAKS, a, side="right") - 1, N_BANDS)
    idx = np.maximum(idx, 0)
    h = table.band_hazards[idx]
    cum = table.cumulative_at_breaks[idx] + h * (a - _BREAKS[idx])
    return np.where(a >= MAX_AGE, np.inf, multiplier * cum)


def background_survival(table: LifeTable, age0, t, multiplier: float = 1.0):
    """Survival over ``t`` months from entry age ``age0`` (years)."""
    age0 = np.asarray(age0, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(age0 < 0) or np.any(t < 0):
        raise ValueError("age0 and t must be non-negative")
    end = age0 + t / MONTHS_PER_YEAR
    start_cum = cumulative_hazard_to_age(table, age0, multiplier)
    end_cum = cumulative_hazard_to_age(table, end, multiplier)
    with np.errstate(invalid="ignore"):
        s = np.exp(-(end_cum - start_cum))
    s = np.where(end >= MAX_AGE, 0.0, s)
    return np.where(t == 0, 1.0, s)


class BackgroundCurve:
    """Fixed background survival for each record of a dataset.

    Holds ``log S_b(t_i)`` and the monthly hazard ``h_b(t_i)`` at every
    record's observed time (the quantities the likelihood needs), plus the
    tables to evaluate cell-average curves on arbitrary time grids.
    """

    def __init__(self, data: TrialDataset, tables=None, multiplier: float = 1.0):
        self.n = len(data)
        self.arm_index = data.arm_index
        self.endpoint_index = data.endpoint_index
        self.n_arms = len(data.arms)
        self.n_endpoints = len(data.endpoints)
        self.multiplier = multiplier
        self.enabled = tables is not None
        self._age0 = data.age
        self._groups = {}
        if not self.enabled:
            self.log_survival = np.zeros(self.n)
            self.hazard = np.zeros(self.n)
            self._tables = None
            return
        self._tables = []
        for r in data.records:
            key = (r.country, r.sex)
            if key not in tables:
                raise LifeTableError(f"no life table for country={r.country!r}, sex={r.sex!r}")
            self._tables.append(tables[key])
        s = np.array([background_survival(tb, r.age, r.time, multiplier)
                      for tb, r in zip(self._tables, data.records)])
        with np.errstate(divide="ignore"):
            self.log_survival = np.log(s)
        attained = data.age + data.time / MONTHS_PER_YEAR
        self.hazard = np.array([float(background_hazard(tb, a, multiplier))
                                for tb, a in zip(self._tables, attained)]) / MONTHS_PER_YEAR

    @classmethod
    def none(cls, data: TrialDataset) -> BackgroundCurve:
        """``S_b = 1``, ``h_b = 0``: no competing background mortality."""
        return cls(data, None)

    def cell_mask(self, arm: int, endpoint: int) -> np.ndarray:
        return (self.arm_index == arm) & (self.endpoint_index == endpoint)

    def _cell_groups(self, arm: int, endpoint: int) -> list[tuple[LifeTable, np.ndarray]]:
        key = (arm, endpoint)
        if key not in self._groups:
            idx = np.flatnonzero(self.cell_mask(arm, endpoint))
            if idx.size == 0:
                raise LifeTableError(f"empty cell (arm={arm}, endpoint={endpoint})")
            groups: dict[int, tuple[LifeTable, list[float]]] = {}
            for i in idx:
                tb = self._tables[i]
                groups.setdefault(id(tb), (tb, []))[1].append(self._age0[i])
            self._groups[key] = [(tb, np.asarray(a)) for tb, a in groups.values()]
        return self._groups[key]

    def mean_survival(self, arm: int, endpoint: int, t) -> np.ndarray:
        """Average over the cell's subjects of S_b at each time in ``t``."""
        t = np.asarray(t, dtype=float)
        if not self.enabled:
            return np.ones_like(t)
        groups = self._cell_groups(arm, endpoint)
        total = np.zeros(t.shape)
        for tb, ages in groups:
            a = np.asarray(ages).reshape((-1,) + (1,) * t.ndim)
            total = total + background_survival(tb, a, t[None, ...], self.multiplier).sum(axis=0)
        return total / sum(len(a) for _, a in groups)
