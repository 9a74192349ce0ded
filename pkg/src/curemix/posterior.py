"""Posterior functionals of a fitted cure model.

Curves, RMST and medians are evaluated at the reference covariate value
(age equal to the centring constant, so the latency rate is ``exp(beta0)``).
When a background curve is supplied it enters as the average background
survival of the subjects in each (arm, end-point) cell.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, optimize, special

from .data import TrialDataset
from .dists import latency_terms
from .lifetable import BackgroundCurve
from .model import CureModel, Layout, ModelSpec, initialize
from .sampler import PosteriorDraws, SamplerConfig, sample

SUMMARY_COLUMNS = ("arm", "endpoint", "quantity", "mean", "lower95", "upper95")
GLOBAL = "global"
K_HAT_THRESHOLD = 0.7


# -- fitting -----------------------------------------------------------------

def _init_from_prior(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    return initialize(spec, None, rng)


@dataclass
class Fit:
    """A model bound to its data together with posterior draws."""

    spec: ModelSpec
    data: TrialDataset
    background: BackgroundCurve
    draws: PosteriorDraws

    @property
    def layout(self) -> Layout:
        return Layout(self.spec)

    def constrained(self) -> dict[str, np.ndarray]:
        return self.layout.constrain(self.draws.flat())


def fit(spec: ModelSpec, data: TrialDataset, bg: BackgroundCurve | None = None,
        cfg: SamplerConfig | None = None, threads: int = 1,
        seed_seq: np.random.SeedSequence | None = None, pointwise: bool = True) -> Fit:
    """Sample the posterior of ``spec`` given ``data``."""
    cfg = cfg or SamplerConfig()
    bg = bg if bg is not None else BackgroundCurve.none(data)
    model = CureModel(spec, data, bg)
    draws = sample(model, model.dim, cfg,
                   init=functools.partial(_init_from_prior, spec),
                   pointwise=model.pointwise_loglik if pointwise else None,
                   names=model.layout.names, threads=threads, seed_seq=seed_seq)
    return Fit(spec, data, bg, draws)


# -- summaries ---------------------------------------------------------------

@dataclass(frozen=True)
class QuantitySummary:
    arm: str
    endpoint: str
    quantity: str
    mean: float
    lower95: float
    upper95: float
    draws: np.ndarray = field(repr=False, compare=False, default=None)
    not_reached: float = 0.0

    def row(self) -> tuple:
        return (self.arm, self.endpoint, self.quantity, self.mean, self.lower95, self.upper95)


def _summarize(x: np.ndarray, axis=0):
    lo, hi = np.quantile(x, [0.025, 0.975], axis=axis)
    return np.mean(x, axis=axis), lo, hi


def _flat(draws) -> np.ndarray:
    x = draws.flat() if isinstance(draws, PosteriorDraws) else np.atleast_2d(np.asarray(draws, float))
    if x.shape[0] == 0:
        raise ValueError("no posterior draws")
    return x


def write_summary_table(rows: Iterable[QuantitySummary], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r.arm, r.endpoint, r.quantity] + [f"{v:.6g}" for v in r.row()[3:]])


# -- per-draw building blocks ------------------------------------------------

def _latency_survival(family: str, beta0, log_phi, t) -> np.ndarray:
    """S_u at times ``t`` for each draw: returns shape ``(draws, len(t))``."""
    t = np.asarray(t, dtype=float)
    eta = np.asarray(beta0, dtype=float)[:, None]
    la = None if log_phi is None else np.asarray(log_phi, dtype=float)[:, None]
    with np.errstate(divide="ignore", over="ignore", under="ignore", invalid="ignore"):
        s = np.exp(latency_terms(family, eta, la, t[None, :]).log_surv)
    return np.where(t[None, :] == 0, 1.0, s)


def _cell_params(x: np.ndarray, spec: ModelSpec):
    """Yield ``(k, j, pi, beta0, log_phi)`` per cell, each vectorised over draws."""
    lay = Layout(spec)
    p = lay.unpack(x)
    pi = special.expit(lay.logit_pi(p))
    pos = {int(j): i for i, j in enumerate(lay.anc_endpoints)}
    for k in range(spec.n_arms):
        for j in range(spec.n_endpoints):
            log_phi = p["log_phi"][:, pos[j]] if j in pos else None
            yield k, j, pi[:, k, j], p["beta0"][:, k, j], log_phi


def _background(bg: BackgroundCurve | None, k: int, j: int, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if bg is None:
        return np.ones_like(t)
    return bg.mean_survival(k, j, t)


# -- survival curves ---------------------------------------------------------

@dataclass(frozen=True)
class CurveSummary:
    """Pointwise posterior summaries on ``grid`` with arrays shaped (K, J, G)."""

    grid: np.ndarray
    arms: tuple[str, ...]
    endpoints: tuple[str, ...]
    mean: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    uncured_mean: np.ndarray
    uncured_lower95: np.ndarray
    uncured_upper95: np.ndarray
    background: np.ndarray

    def to_dict(self) -> dict:
        out = {"grid": self.grid.tolist(), "curves": []}
        for k, a in enumerate(self.arms):
            for j, e in enumerate(self.endpoints):
                out["curves"].append({
                    "arm": a, "endpoint": e,
                    "mean": self.mean[k, j].tolist(),
                    "lower95": self.lower95[k, j].tolist(),
                    "upper95": self.upper95[k, j].tolist(),
                    "uncured_mean": self.uncured_mean[k, j].tolist(),
                    "uncured_lower95": self.uncured_lower95[k, j].tolist(),
                    "uncured_upper95": self.uncured_upper95[k, j].tolist(),
                    "background": self.background[k, j].tolist(),
                })
        return out


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a non-empty 1-D array")
    if grid[0] < 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and start at or above 0")
    return grid


def mixture_curves(draws, spec: ModelSpec, bg: BackgroundCurve | None, grid):
    """Per-draw mixture, uncured and background curves.

    Returns ``(mixture, uncured, background)`` with shapes (S, K, J, G),
    (S, K, J, G) and (K, J, G).
    """
    x = _flat(draws)
    grid = _check_grid(grid)
    S, K, J, G = x.shape[0], spec.n_arms, spec.n_endpoints, grid.size
    mix = np.empty((S, K, J, G))
    unc = np.empty((S, K, J, G))
    back = np.empty((K, J, G))
    for k, j, pi, b0, lphi in _cell_params(x, spec):
        su = _latency_survival(spec.families[j], b0, lphi, grid)
        sb = _background(bg, k, j, grid)
        unc[:, k, j] = su
        back[k, j] = sb
        mix[:, k, j] = sb[None, :] * (pi[:, None] + (1.0 - pi[:, None]) * su)
    return mix, unc, back


def survival_curves(draws, spec: ModelSpec, bg: BackgroundCurve | None, grid) -> CurveSummary:
    """Posterior mean and 95% band of the mixture survival curve per cell."""
    grid = _check_grid(grid)
    mix, unc, back = mixture_curves(draws, spec, bg, grid)
    m, lo, hi = _summarize(mix)
    um, ulo, uhi = _summarize(unc)
    return CurveSummary(grid, spec.arms, spec.endpoints, m, lo, hi, um, ulo, uhi, back)


# -- restricted mean survival time --------------------------------------------

RMST_QUANTITIES = ("rmst", "rmst_uncured", "rmst_cured")


def rmst_draws(draws, spec: ModelSpec, bg: BackgroundCurve | None, tau: float,
               epsabs: float = 1e-9) -> dict[tuple[int, int], np.ndarray]:
    """Per-draw RMST up to ``tau`` months for every cell.

    Values are arrays of shape (3, S): the mixture RMST, the uncured RMST
    (integral of S_b S_u) and the cured RMST (integral of S_b).
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau!r}")
    x = _flat(draws)
    out = {}
    for k, j, pi, b0, lphi in _cell_params(x, spec):
        fam = spec.families[j]

        def integrand(t, pi=pi, b0=b0, lphi=lphi, k=k, j=j, fam=fam):
            su = _latency_survival(fam, b0, lphi, [t])[:, 0]
            sb = float(_background(bg, k, j, [t])[0])
            mix = sb * (pi + (1.0 - pi) * su)
            return np.concatenate([mix, sb * su, [sb]])

        val, _ = integrate.quad_vec(integrand, 0.0, float(tau), epsabs=epsabs,
                                    epsrel=1e-10, norm="max", limit=2000)
        S = pi.size
        out[(k, j)] = np.vstack([val[:S], val[S:2 * S], np.full(S, val[-1])])
    return out


def rmst(draws, spec: ModelSpec, bg: BackgroundCurve | None, tau: float) -> list[QuantitySummary]:
    """Mixture, uncured and cured RMST per cell, as posterior mean and 95% CrI."""
    rows = []
    for (k, j), vals in rmst_draws(draws, spec, bg, tau).items():
        for name, v in zip(RMST_QUANTITIES, vals):
            m, lo, hi = _summarize(v)
            rows.append(QuantitySummary(spec.arms[k], spec.endpoints[j], name,
                                        float(m), float(lo), float(hi), v))
    return rows


# -- median survival ------------------------------------------------------------

MEDIAN_BRACKET = (1e-9, 1e6)


def _median_one(family: str, pi: float, b0: float, lphi, xtol: float) -> float:
    if pi >= 0.5:
        return np.inf
    target = (0.5 - pi) / (1.0 - pi)
    la = None if lphi is None else np.array([lphi])
    b = np.array([b0])

    def f(t):
        return float(_latency_survival(family, b, la, [t])[0, 0]) - target

    lo, hi = MEDIAN_BRACKET
    if f(lo) < 0:
        return lo
    if f(hi) > 0:
        return np.nan
    return optimize.brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps)


def median_draws(draws, spec: ModelSpec, xtol: float = 1e-10) -> dict[tuple[int, int], np.ndarray]:
    """Per-draw median survival without background mortality.

    Solves ``S_u(t) = (0.5 - pi) / (1 - pi)``. Draws with ``pi >= 0.5`` never
    reach the median and are returned as ``inf``; draws whose median lies
    beyond the search bracket are ``nan``.
    """
    x = _flat(draws)
    out = {}
    for k, j, pi, b0, lphi in _cell_params(x, spec):
        fam = spec.families[j]
        out[(k, j)] = np.array([
            _median_one(fam, pi[s], b0[s], None if lphi is None else lphi[s], xtol)
            for s in range(pi.size)])
    return out


def _quantiles_with_inf(v: np.ndarray, qs) -> list[float]:
    """Linear-interpolation quantiles where any step towards ``inf`` is ``inf``."""
    v = np.sort(v)
    out = []
    for q in qs:
        h = (v.size - 1) * q
        lo, hi = int(math.floor(h)), int(math.ceil(h))
        g = h - lo
        if np.isinf(v[lo]) or (g > 0 and np.isinf(v[hi])):
            out.append(math.inf)
        else:
            out.append(float(v[lo] + g * (v[hi] - v[lo])))
    return out


def median_survival(draws, spec: ModelSpec) -> list[QuantitySummary]:
    """Median survival per cell with the share of draws where it is not reached.

    The mean is over draws that reach the median; the interval is taken over
    all draws with unreached medians counted as infinite.
    """
    rows = []
    for (k, j), v in median_draws(draws, spec).items():
        reached = np.isfinite(v)
        frac = float(1.0 - reached.mean())
        m = float(v[reached].mean()) if reached.any() else math.inf
        lo, hi = _quantiles_with_inf(np.where(np.isnan(v), np.inf, v), (0.025, 0.975))
        rows.append(QuantitySummary(spec.arms[k], spec.endpoints[j], "median",
                                    m, float(lo), float(hi), v, not_reached=frac))
    return rows


# -- cure fractions -------------------------------------------------------------

def cure_fraction_summary(draws, spec: ModelSpec) -> list[QuantitySummary]:
    """Cure fraction per cell and, unless pooling is separate, per arm."""
    x = _flat(draws)
    c = Layout(spec).constrain(x)
    rows = []
    for k, a in enumerate(spec.arms):
        for j, e in enumerate(spec.endpoints):
            v = c["pi"][:, k, j]
            m, lo, hi = _summarize(v)
            rows.append(QuantitySummary(a, e, "cure_fraction", float(m), float(lo), float(hi), v))
        if "pi_global" in c:
            v = c["pi_global"][:, k]
            m, lo, hi = _summarize(v)
            rows.append(QuantitySummary(a, GLOBAL, "cure_fraction", float(m), float(lo), float(hi), v))
    return rows


# -- predictive scores ------------------------------------------------------------

@dataclass(frozen=True)
class FitScore:
    """WAIC or LOO on the deviance scale (smaller is better).

    ``value = -2 * elpd`` and ``elpd = lppd - p_eff``. ``se`` is the standard
    error of ``value``. For LOO, ``k_hat`` holds tail-index estimates of the
    importance weights and ``flags`` marks records with ``k_hat > 0.7``.
    """

    criterion: str
    value: float
    elpd: float
    p_eff: float
    lppd: float
    se: float
    pointwise: np.ndarray = field(repr=False, compare=False)
    k_hat: np.ndarray | None = field(default=None, repr=False, compare=False)
    flags: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_flagged(self) -> int:
        return 0 if self.flags is None else int(self.flags.sum())

    def to_dict(self) -> dict:
        d = {"criterion": self.criterion, "value": self.value, "elpd": self.elpd,
             "p_eff": self.p_eff, "lppd": self.lppd, "se": self.se}
        if self.flags is not None:
            d["n_flagged"] = self.n_flagged
            d["max_k_hat"] = float(np.nanmax(self.k_hat)) if self.k_hat.size else float("nan")
        return d


def _loglik_matrix(loglik) -> np.ndarray:
    if isinstance(loglik, PosteriorDraws):
        loglik = loglik.loglik_matrix()
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2:
        raise ValueError("log-likelihood matrix must be draws x records")
    if ll.shape[0] < 2:
        raise ValueError("at least 2 draws are needed")
    return ll


def _lppd_pointwise(ll: np.ndarray) -> np.ndarray:
    return special.logsumexp(ll, axis=0) - math.log(ll.shape[0])


def waic(loglik) -> FitScore:
    """Widely applicable information criterion from a draws x records matrix."""
    ll = _loglik_matrix(loglik)
    lppd_i = _lppd_pointwise(ll)
    p_i = ll.var(axis=0, ddof=1)
    elpd_i = lppd_i - p_i
    n = ll.shape[1]
    lppd, p = float(lppd_i.sum()), float(p_i.sum())
    se = 2.0 * math.sqrt(n * elpd_i.var()) if n > 1 else 0.0
    return FitScore("waic", -2.0 * (lppd - p), lppd - p, p, lppd, se, elpd_i)


def hill_tail_index(w: np.ndarray) -> float:
    """Hill estimate of the tail index of positive weights ``w``."""
    S = w.size
    m = int(min(0.2 * S, 3.0 * math.sqrt(S)))
    if m < 5:
        return float("nan")
    top = np.sort(w)[-(m + 1):]
    if not top[0] > 0:
        return float("inf")
    return float(np.mean(np.log(top[1:]) - np.log(top[0])))


def loo(loglik) -> FitScore:
    """Leave-one-out cross-validation by truncated importance sampling.

    Raw weights ``1 / p(y_i | theta_s)`` are capped at ``mean * S^(3/4)``.
    Records whose weight tail index exceeds 0.7 are flagged as unreliable.
    """
    ll = _loglik_matrix(loglik)
    S, n = ll.shape
    lppd_i = _lppd_pointwise(ll)
    elpd_i = np.empty(n)
    k_hat = np.empty(n)
    log_cap = 0.75 * math.log(S)
    for i in range(n):
        lw = -ll[:, i]
        lw = lw - lw.max()
        w = np.exp(lw)
        k_hat[i] = hill_tail_index(w)
        cap = math.log(w.mean()) + log_cap
        lw = np.minimum(lw, cap)
        elpd_i[i] = special.logsumexp(lw + ll[:, i]) - special.logsumexp(lw)
    elpd = float(elpd_i.sum())
    lppd = float(lppd_i.sum())
    se = 2.0 * math.sqrt(n * elpd_i.var()) if n > 1 else 0.0
    flags = ~(k_hat <= K_HAT_THRESHOLD) & ~np.isnan(k_hat)
    return FitScore("loo", -2.0 * elpd, elpd, lppd - elpd, lppd, se, elpd_i, k_hat, flags)


# -- report ---------------------------------------------------------------------

def report(fitted: Fit, grid: Sequence[float], tau: float,
           with_median: bool = True) -> tuple[dict, list[QuantitySummary]]:
    """Bundle curves, cure fractions, RMST, medians and WAIC/LOO.

    Returns a JSON-serialisable dict and the flat list of summary rows.
    """
    spec, bg, d = fitted.spec, fitted.background, fitted.draws
    bg_used = bg if bg.enabled else None
    curves = survival_curves(d, spec, bg_used, grid)
    rows = cure_fraction_summary(d, spec) + rmst(d, spec, bg_used, tau)
    if with_median:
        rows += median_survival(d, spec)
    out = {
        "curves": curves.to_dict(),
        "summaries": [dict(zip(SUMMARY_COLUMNS, r.row()), **(
            {"not_reached": r.not_reached} if r.quantity == "median" else {})) for r in rows],
        "tau": tau,
    }
    if d.loglik is not None:
        out["waic"] = waic(d).to_dict()
        out["loo"] = loo(d).to_dict()
    return out, rows


def dump_json(obj, path: str | Path) -> None:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o))

    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None if math.isnan(o) else ("inf" if o > 0 else "-inf")
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(clean(obj), fh, indent=2, default=default)
        fh.write("\n")
