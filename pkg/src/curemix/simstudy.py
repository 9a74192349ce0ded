"""Simulation study comparing hierarchical and separate cure-fraction models.

Each scenario fixes the number of end-points, the per-end-point sample size
and three prior choices (latency, global cure fraction, between-end-point SD),
giving a 2^5 = 32 cell factorial grid. Data are generated from a Weibull
mixture cure model with end-point cure fractions drawn around a common mean;
cured subjects are censored at the cut-point ``tau``.

Scenario numbering varies the factors in the order latency prior, SD prior,
cure prior, per-end-point sample size, number of end-points, with the last one
changing fastest.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from . import priors as pr
from .data import SubjectRecord, TrialDataset
from .dists import LatencyParams, sample_time
from .model import ModelSpec, Priors
from .posterior import cure_fraction_summary, fit, rmst
from .sampler import FitError, SamplerConfig, sample

logger = logging.getLogger(__name__)

MODELS = ("hierarchical", "separate")
ESTIMANDS = ("cure_fraction", "rmst")
RESULT_COLUMNS = ("scenario", "model", "estimand", "endpoint", "bias", "rb", "empse",
                  "coverage", "n_rep", "n_fail")
ALL_CURVES = "all"

MU_TRUE = float(special.logit(0.2))
SIGMA_TRUE = 0.4
TAU = 5.0
SEPARATE_CURE_PRIOR = pr.Normal(-1.0, 0.6)

# (shape k, rate lambda) with S(t) = exp(-lambda t^k); alternate across end-points
LATENCY_TRUTHS = ((1.0, 1.0), (1.0, 4.0))

# log-rate prior means and variances by truth rate, then shape priors
_LATENCY_PRIORS = {
    "informative": {"mean": {1.0: 0.0, 4.0: 1.4}, "var": {1.0: 0.01, 4.0: 0.002},
                    "shape": pr.Gamma(1000.0, 1000.0)},
    "weak": {"mean": {1.0: 0.0, 4.0: 1.4}, "var": {1.0: 0.1, 4.0: 0.02},
             "shape": pr.Gamma(1000.0, 100.0)},
}
_CURE_PRIORS = {"informative": pr.Normal(-1.0, 0.01), "weak": pr.Normal(0.0, 0.7)}
_SD_PRIORS = {"informative": pr.LogNormal.from_variance(0.05, 0.05),
              "weak": pr.LogNormal.from_variance(0.05, 0.1)}

LEVELS = {
    "latency_prior": ("weak", "informative"),
    "sd_prior": ("informative", "weak"),
    "cure_prior": ("weak", "informative"),
    "n_per_endpoint": (10, 100),
    "n_endpoints": (3, 10),
}

# two chains of 500 kept draws after 250 warmup iterations
DESK_CONFIG = SamplerConfig(chains=2, iterations=750, warmup=250)


@dataclass(frozen=True)
class Scenario:
    id: int
    latency_prior: str
    sd_prior: str
    cure_prior: str
    n_per_endpoint: int
    n_endpoints: int
    mu_true: float = MU_TRUE
    sigma_true: float = SIGMA_TRUE
    tau: float = TAU
    latency_truth: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        for name in ("latency_prior", "sd_prior", "cure_prior"):
            if getattr(self, name) not in ("informative", "weak"):
                raise ValueError(f"{name} must be 'informative' or 'weak'")
        if self.n_endpoints < 1 or self.n_per_endpoint < 1:
            raise ValueError("need at least one end-point and one subject")
        if not self.latency_truth:
            truth = tuple(LATENCY_TRUTHS[j % 2] for j in range(self.n_endpoints))
            object.__setattr__(self, "latency_truth", truth)
        if len(self.latency_truth) != self.n_endpoints:
            raise ValueError("one latency truth per end-point required")

    @property
    def endpoints(self) -> tuple[str, ...]:
        return tuple(f"E{j + 1}" for j in range(self.n_endpoints))

    def priors(self, pooling: str) -> Priors:
        """Prior settings for a fit of this scenario under ``pooling``."""
        lat = _LATENCY_PRIORS[self.latency_prior]
        b0 = {}
        for e, (_, rate) in zip(self.endpoints, self.latency_truth):
            key = min(lat["mean"], key=lambda r: abs(r - rate))
            b0[e] = pr.Normal(lat["mean"][key], math.sqrt(lat["var"][key]))
        cure = SEPARATE_CURE_PRIOR if pooling == "separate" else _CURE_PRIORS[self.cure_prior]
        return Priors(beta_lambda0_by_endpoint=b0, phi={"weibull": lat["shape"]},
                      beta_pi=cure, sigma=_SD_PRIORS[self.sd_prior])

    def model_spec(self, pooling: str) -> ModelSpec:
        return ModelSpec(endpoints=self.endpoints, arms=("A",),
                         families=("weibull",) * self.n_endpoints, pooling=pooling,
                         priors=self.priors(pooling), covariates=False)


def scenario_grid() -> list[Scenario]:
    """All 32 scenarios, numbered from 1."""
    order = ("latency_prior", "sd_prior", "cure_prior", "n_per_endpoint", "n_endpoints")
    grid = []
    for i, combo in enumerate(itertools.product(*(LEVELS[f] for f in order)), start=1):
        grid.append(Scenario(id=i, **dict(zip(order, combo))))
    return grid


_GRID_COLUMNS = ("id", "latency_prior", "sd_prior", "cure_prior", "n_per_endpoint",
                 "n_endpoints", "mu_true", "sigma_true", "tau", "latency_truth")


def write_scenarios(scenarios: Iterable[Scenario], path: str | Path) -> None:
    """One row per scenario; latency truths as ``shape:rate`` pairs joined by ``;``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_GRID_COLUMNS)
        for s in scenarios:
            truth = ";".join(f"{k!r}:{r!r}" for k, r in s.latency_truth)
            w.writerow([s.id, s.latency_prior, s.sd_prior, s.cure_prior, s.n_per_endpoint,
                        s.n_endpoints, repr(s.mu_true), repr(s.sigma_true), repr(s.tau), truth])


def read_scenarios(path: str | Path) -> list[Scenario]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            truth = tuple(tuple(float(v) for v in pair.split(":"))
                          for pair in row["latency_truth"].split(";"))
            out.append(Scenario(
                id=int(row["id"]), latency_prior=row["latency_prior"], sd_prior=row["sd_prior"],
                cure_prior=row["cure_prior"], n_per_endpoint=int(row["n_per_endpoint"]),
                n_endpoints=int(row["n_endpoints"]), mu_true=float(row["mu_true"]),
                sigma_true=float(row["sigma_true"]), tau=float(row["tau"]),
                latency_truth=truth))
    return out


# -- data generation -------------------------------------------------------------

def draw_cure_fractions(s: Scenario, rng: np.random.Generator) -> np.ndarray:
    """End-point cure fractions ``expit(N(mu_true, sigma_true^2))``."""
    return special.expit(rng.normal(s.mu_true, s.sigma_true, s.n_endpoints))


def generate_dataset(s: Scenario, rng: np.random.Generator,
                     cure_fractions: Sequence[float] | None = None) -> TrialDataset:
    """Simulate one trial: cured subjects are censored at ``tau``, all others have events."""
    pis = draw_cure_fractions(s, rng) if cure_fractions is None else np.asarray(cure_fractions)
    records = []
    for j, (e, (shape, rate)) in enumerate(zip(s.endpoints, s.latency_truth)):
        n = s.n_per_endpoint
        cured = rng.random(n) < pis[j]
        times = sample_time("weibull", LatencyParams(rate, shape), rng, n)
        for i in range(n):
            t, d = (s.tau, 0) if cured[i] else (float(times[i]), 1)
            records.append(SubjectRecord(f"{e}-{i + 1}", e, "A", t, d, 60.0, "female", "GBR"))
    return TrialDataset(tuple(records), s.endpoints, ("A",))


def weibull_rmst(shape: float, rate: float, tau: float) -> float:
    """Integral of exp(-rate t^shape) over [0, tau], via the incomplete gamma function."""
    a = 1.0 / shape
    return float(special.gamma(a) * special.gammainc(a, rate * tau**shape) / (shape * rate**a))


def true_estimands(s: Scenario, cure_fractions) -> dict[str, np.ndarray]:
    pis = np.asarray(cure_fractions, dtype=float)
    unc = np.array([weibull_rmst(k, r, s.tau) for k, r in s.latency_truth])
    return {"cure_fraction": pis, "rmst": pis * s.tau + (1.0 - pis) * unc}


# -- replications --------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicationResult:
    """Posterior means and 95% intervals per end-point for one replication.

    ``estimates[(model, estimand)]`` has shape (3, J): mean, lower, upper.
    """

    scenario: int
    rep: int
    truth: dict[str, np.ndarray]
    estimates: dict[tuple[str, str], np.ndarray] = field(repr=False)


@dataclass
class ScenarioRun:
    scenario: Scenario
    results: list[ReplicationResult]
    n_fail: int = 0
    failed_reps: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter(self.results)

    def __len__(self) -> int:
        return len(self.results)


def replication_seed(seed: int, scenario_id: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, scenario_id, rep])


def _failing_target(x):
    return -np.inf, np.zeros_like(x)


def _estimates(s: Scenario, pooling: str, data: TrialDataset, cfg: SamplerConfig,
               seed_seq: np.random.SeedSequence) -> dict[str, np.ndarray]:
    spec = s.model_spec(pooling)
    fitted = fit(spec, data, None, cfg, seed_seq=seed_seq, pointwise=False)
    J = s.n_endpoints
    cf = [r for r in cure_fraction_summary(fitted.draws, spec) if r.endpoint != "global"]
    rm = [r for r in rmst(fitted.draws, spec, None, s.tau) if r.quantity == "rmst"]
    out = {}
    for name, rows in (("cure_fraction", cf), ("rmst", rm)):
        assert len(rows) == J
        out[name] = np.array([[r.mean for r in rows], [r.lower95 for r in rows],
                              [r.upper95 for r in rows]])
    return out


def run_replication(s: Scenario, rep: int, cfg: SamplerConfig, seed: int = 0,
                    inject_failure: bool = False) -> ReplicationResult:
    """Generate one dataset and fit both models; raises :class:`FitError` on failure."""
    root = replication_seed(seed, s.id, rep)
    data_seq, *fit_seqs = root.spawn(1 + len(MODELS))
    rng = np.random.default_rng(data_seq)
    pis = draw_cure_fractions(s, rng)
    data = generate_dataset(s, rng, pis)
    if inject_failure:
        sample(_failing_target, 1, replace(cfg, init_retries=3), seed_seq=fit_seqs[0])
    estimates = {}
    for model, seq in zip(MODELS, fit_seqs):
        for estimand, arr in _estimates(s, model, data, cfg, seq).items():
            estimates[(model, estimand)] = arr
    return ReplicationResult(s.id, rep, true_estimands(s, pis), estimates)


def _replication_or_none(args):
    s, rep, cfg, seed, inject = args
    try:
        return run_replication(s, rep, cfg, seed, inject)
    except FitError as exc:
        logger.warning("scenario %d replication %d failed: %s", s.id, rep, exc)
        return None


def run_scenario(s: Scenario, n_rep: int, cfg: SamplerConfig = DESK_CONFIG, seed: int = 0,
                 threads: int = 1,
                 fault_injector: Callable[[int], bool] | None = None) -> ScenarioRun:
    """Run ``n_rep`` replications; failed fits are excluded and counted.

    ``fault_injector(rep)`` returning True forces that replication's fit to
    fail (the target is non-finite everywhere), exercising the failure path.
    Results depend on ``seed`` only, never on ``threads``.
    """
    if n_rep < 1:
        raise ValueError("n_rep must be >= 1")
    jobs = [(s, r, cfg, seed, bool(fault_injector and fault_injector(r))) for r in range(n_rep)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_replication_or_none, jobs))
    else:
        outcomes = [_replication_or_none(j) for j in jobs]
    failed = [r for r, o in enumerate(outcomes) if o is None]
    if failed:
        logger.warning("scenario %d: %d of %d replications failed", s.id, len(failed), n_rep)
    return ScenarioRun(s, [o for o in outcomes if o is not None], len(failed), failed)


# -- performance measures -----------------------------------------------------------

@dataclass(frozen=True)
class PerformanceRow:
    scenario: int
    model: str
    estimand: str
    endpoint: str
    bias: float
    rb: float
    empse: float
    coverage: float
    n_rep: int
    n_fail: int = 0

    def row(self) -> tuple:
        return (self.scenario, self.model, self.estimand, self.endpoint, self.bias, self.rb,
                self.empse, self.coverage, self.n_rep, self.n_fail)


def curve_performance(estimates, lower, upper, truth) -> tuple[float, float, float, float]:
    """Bias, relative bias, empirical SE and coverage for one curve.

    ``truth`` may vary across replications; errors are taken per replication
    and the empirical SE is the SD of the errors (the SD of the estimates when
    the truth is fixed). Relative bias is NaN when the mean truth is 0.
    """
    est = np.asarray(estimates, dtype=float)
    truth = np.broadcast_to(np.asarray(truth, dtype=float), est.shape)
    if est.size < 2:
        raise ValueError("performance measures need at least 2 replications")
    err = est - truth
    bias = float(err.mean())
    mean_truth = float(truth.mean())
    rb = bias / mean_truth if mean_truth != 0 else float("nan")
    empse = float(err.std(ddof=1))
    cover = float(np.mean((np.asarray(lower) <= truth) & (truth <= np.asarray(upper))))
    return bias, rb, empse, cover


def performance_measures(run: ScenarioRun | Sequence[ReplicationResult],
                         scenario: Scenario | None = None) -> list[PerformanceRow]:
    """Per-curve performance rows plus ``all`` rows averaging over curves."""
    results = list(run)
    n_fail = run.n_fail if isinstance(run, ScenarioRun) else 0
    if scenario is None:
        scenario = run.scenario if isinstance(run, ScenarioRun) else None
    if len(results) < 2:
        raise ValueError("performance measures need at least 2 replications")
    results.sort(key=lambda r: r.rep)
    sid = results[0].scenario
    J = results[0].truth["cure_fraction"].size
    endpoints = scenario.endpoints if scenario else tuple(f"E{j + 1}" for j in range(J))
    rows = []
    for model in MODELS:
        for estimand in ESTIMANDS:
            if (model, estimand) not in results[0].estimates:
                continue
            arr = np.stack([r.estimates[(model, estimand)] for r in results])  # (R, 3, J)
            truth = np.stack([r.truth[estimand] for r in results])  # (R, J)
            per = []
            for j, e in enumerate(endpoints):
                m = curve_performance(arr[:, 0, j], arr[:, 1, j], arr[:, 2, j], truth[:, j])
                per.append(m)
                rows.append(PerformanceRow(sid, model, estimand, e, *m, len(results), n_fail))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)  # RB is NaN on every curve
                avg = np.nanmean(np.array(per), axis=0)
            rows.append(PerformanceRow(sid, model, estimand, ALL_CURVES,
                                       *map(float, avg), len(results), n_fail))
    return rows


def replication_errors(run, model: str, estimand: str) -> np.ndarray:
    """Per-replication error averaged over curves, ordered by replication."""
    results = sorted(run, key=lambda r: r.rep)
    return np.array([np.mean(r.estimates[(model, estimand)][0] - r.truth[estimand])
                     for r in results])


def paired_bias_gap(run, estimand: str, better: str, worse: str) -> tuple[float, float]:
    """``|bias(worse)| - |bias(better)|`` and its replication standard error.

    Positive values favour ``better``. The standard error comes from the
    paired per-replication differences of the sign-aligned errors.
    """
    eb = replication_errors(run, better, estimand)
    ew = replication_errors(run, worse, estimand)
    d = np.sign(ew.mean()) * ew - np.sign(eb.mean()) * eb
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))


def write_performance(rows: Iterable[PerformanceRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            vals = r.row()
            w.writerow(list(vals[:4]) + [f"{v:.6g}" for v in vals[4:8]] + list(vals[8:]))
