"""Parametric latency families for the uncured sub-population.

Every family is parameterised by a positive ``rate`` (the quantity the
log-linear predictor acts on) and, except the exponential, a positive
``ancillary`` parameter:

=============  ====================================  =========================
family         survival S(t)                         ancillary
=============  ====================================  =========================
exponential    exp(-rate t)                          --
weibull        exp(-rate t^k)                        shape k
gompertz       exp(-(rate/a)(e^{a t} - 1))           shape a > 0
lognormal      1 - Phi((ln t - ln rate) / s)         log-scale SD s
loglogistic    1 / (1 + (rate t)^b)                  shape b
=============  ====================================  =========================

For the log-normal the linear predictor is the log-time location, so
``rate`` there is the median survival time rather than an inverse time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special

FAMILIES = ("exponential", "weibull", "gompertz", "lognormal", "loglogistic")
HAS_ANCILLARY = {f: f != "exponential" for f in FAMILIES}

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Parameter or argument outside the support of a family."""


@dataclass(frozen=True)
class LatencyParams:
    rate: float
    ancillary: float | None = None


@dataclass(frozen=True)
class LinearPredictor:
    """Log-link predictor ``rate = exp(intercept + age_coef * (age - center))``."""

    intercept: float
    age_coef: float = 0.0
    center: float = 0.0


def rate_from_covariates(lp: LinearPredictor, age):
    return np.exp(lp.intercept + lp.age_coef * (np.asarray(age, dtype=float) - lp.center))


def _check_family(family: str) -> None:
    if family not in FAMILIES:
        raise DomainError(f"unknown family {family!r}; expected one of {FAMILIES}")


def _unpack(family: str, p: LatencyParams):
    _check_family(family)
    rate = np.asarray(p.rate, dtype=float)
    if np.any(~(rate > 0)) or np.any(~np.isfinite(rate)):
        raise DomainError(f"rate must be positive and finite, got {p.rate!r}")
    if not HAS_ANCILLARY[family]:
        return np.log(rate), None
    if p.ancillary is None:
        raise DomainError(f"{family} needs an ancillary parameter")
    anc = np.asarray(p.ancillary, dtype=float)
    if np.any(~(anc > 0)) or np.any(~np.isfinite(anc)):
        raise DomainError(f"ancillary must be positive and finite, got {p.ancillary!r}")
    return np.log(rate), np.log(anc)


class LatencyTerms(NamedTuple):
    """Log survival and log density with derivatives.

    Derivatives are with respect to the linear predictor ``eta = log rate`` and
    ``log_anc = log ancillary`` (zero arrays for the exponential).
    """

    log_surv: np.ndarray
    dsurv_eta: np.ndarray
    dsurv_anc: np.ndarray
    log_pdf: np.ndarray
    dpdf_eta: np.ndarray
    dpdf_anc: np.ndarray


def latency_terms(family: str, eta, log_anc, t, log_t=None) -> LatencyTerms:
    """Vectorised building block for the mixture likelihood.

    No argument checking: callers pass finite ``eta``/``log_anc`` and ``t > 0``.
    """
    t = np.asarray(t, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if log_t is None:
        with np.errstate(divide="ignore"):
            log_t = np.log(t)
    zero = np.zeros(np.broadcast(eta, t).shape)

    if family == "exponential":
        h = np.exp(eta) * t
        return LatencyTerms(-h, -h, zero, eta - h, 1.0 - h, zero)

    anc = np.exp(log_anc)
    if family == "weibull":
        h = np.exp(eta + anc * log_t)
        hk = h * anc * log_t
        return LatencyTerms(
            -h, -h, -hk,
            log_anc + eta + (anc - 1.0) * log_t - h,
            1.0 - h,
            1.0 + anc * log_t - hk,
        )

    if family == "gompertz":
        lam = np.exp(eta)
        at = anc * t
        with np.errstate(over="ignore", invalid="ignore"):
            h = lam * special.expm1(at) / anc
            # a * dH/da = -H + rate * t * e^{a t}
            dh_la = -h + lam * t * np.exp(at)
        return LatencyTerms(-h, -h, -dh_la, eta + at - h, 1.0 - h, at - dh_la)

    if family == "lognormal":
        z = (log_t - eta) / anc
        log_sf = special.log_ndtr(-z)
        log_phi = -0.5 * z * z - _HALF_LOG_2PI
        mills = np.exp(log_phi - log_sf)
        return LatencyTerms(
            log_sf, mills / anc, mills * z,
            log_phi - log_anc - log_t,
            z / anc,
            z * z - 1.0,
        )

    if family == "loglogistic":
        u = anc * (eta + log_t)
        sp = np.logaddexp(0.0, u)
        sig = special.expit(u)
        return LatencyTerms(
            -sp, -sig * anc, -sig * u,
            log_anc - log_t + u - 2.0 * sp,
            anc * (1.0 - 2.0 * sig),
            1.0 + u * (1.0 - 2.0 * sig),
        )

    raise DomainError(f"unknown family {family!r}")


def log_survival(family: str, p: LatencyParams, t):
    eta, log_anc = _unpack(family, p)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("t must be non-negative")
    return latency_terms(family, eta, log_anc, t).log_surv


def survival(family: str, p: LatencyParams, t):
    """S(t); equals 1 at t = 0 for every family."""
    eta, log_anc = _unpack(family, p)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("t must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.exp(latency_terms(family, eta, log_anc, t).log_surv)
    # lognormal/loglogistic go through log(0) at the origin
    return np.where(t == 0, 1.0, out)


def log_pdf(family: str, p: LatencyParams, t):
    eta, log_anc = _unpack(family, p)
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("log_pdf needs t > 0")
    return latency_terms(family, eta, log_anc, t).log_pdf


def log_hazard(family: str, p: LatencyParams, t):
    eta, log_anc = _unpack(family, p)
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("hazard needs t > 0")
    terms = latency_terms(family, eta, log_anc, t)
    return terms.log_pdf - terms.log_surv


def hazard(family: str, p: LatencyParams, t):
    """f(t) / S(t), formed on the log scale so survival underflow is harmless."""
    return np.exp(log_hazard(family, p, t))


def quantile_survival(family: str, p: LatencyParams, s):
    """Inverse survival function: the time t with S(t) = s, for s in (0, 1]."""
    eta, log_anc = _unpack(family, p)
    s = np.asarray(s, dtype=float)
    rate = np.exp(eta)
    neg_log_s = -np.log(s)
    if family == "exponential":
        return neg_log_s / rate
    anc = np.exp(log_anc)
    if family == "weibull":
        return (neg_log_s / rate) ** (1.0 / anc)
    if family == "gompertz":
        return np.log1p(anc * neg_log_s / rate) / anc
    if family == "lognormal":
        return np.exp(eta + anc * special.ndtri(1.0 - s))
    if family == "loglogistic":
        return ((1.0 - s) / s) ** (1.0 / anc) / rate
    raise DomainError(f"unknown family {family!r}")


def sample_time(family: str, p: LatencyParams, rng: np.random.Generator, size=None):
    """Draw event times by inversion of the survival function."""
    _unpack(family, p)
    u = 1.0 - rng.random(size)  # (0, 1]
    return quantile_survival(family, p, u)
