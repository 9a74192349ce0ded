"""Prior densities with analytic derivatives.

Every prior exposes ``logpdf(x)``, ``dlogpdf(x)`` and ``sample(rng, size)``.
Normal priors are given as (mean, SD) throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    sd: float = 1.0

    def logpdf(self, x):
        z = (np.asarray(x) - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * _LOG_2PI

    def dlogpdf(self, x):
        return -(np.asarray(x) - self.mean) / self.sd**2

    def sample(self, rng, size=None):
        return rng.normal(self.mean, self.sd, size)


@dataclass(frozen=True)
class LogNormal:
    """Log-normal on a positive quantity; ``mu``/``sd`` are log-scale."""

    mu: float = 0.0
    sd: float = 1.0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        lx = np.log(x)
        z = (lx - self.mu) / self.sd
        return -0.5 * z * z - lx - math.log(self.sd) - 0.5 * _LOG_2PI

    def dlogpdf(self, x):
        x = np.asarray(x, dtype=float)
        return (-(np.log(x) - self.mu) / self.sd**2 - 1.0) / x

    def sample(self, rng, size=None):
        return rng.lognormal(self.mu, self.sd, size)

    @classmethod
    def from_variance(cls, mu: float, var: float) -> LogNormal:
        return cls(mu, math.sqrt(var))


@dataclass(frozen=True)
class Gamma:
    shape: float = 1.0
    rate: float = 1.0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return (self.shape * math.log(self.rate) - special.gammaln(self.shape)
                + (self.shape - 1.0) * np.log(x) - self.rate * x)

    def dlogpdf(self, x):
        x = np.asarray(x, dtype=float)
        return (self.shape - 1.0) / x - self.rate

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size)


@dataclass(frozen=True)
class HalfNormal:
    """Normal(0, sd^2) folded onto (0, inf)."""

    sd: float = 1.0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return math.log(2.0) - 0.5 * (x / self.sd) ** 2 - math.log(self.sd) - 0.5 * _LOG_2PI

    def dlogpdf(self, x):
        return -np.asarray(x) / self.sd**2

    def sample(self, rng, size=None):
        return np.abs(rng.normal(0.0, self.sd, size))


@dataclass(frozen=True)
class Exponential:
    rate: float = 1.0

    def logpdf(self, x):
        return math.log(self.rate) - self.rate * np.asarray(x, dtype=float)

    def dlogpdf(self, x):
        return np.full(np.shape(x), -self.rate) if np.ndim(x) else -self.rate

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)


@dataclass(frozen=True)
class TruncatedCauchy:
    """Cauchy(loc, scale) restricted to (0, inf)."""

    loc: float = 0.0
    scale: float = 1.0

    @property
    def _log_mass(self) -> float:
        return math.log(0.5 + math.atan(self.loc / self.scale) / math.pi)

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.loc) / self.scale
        return -math.log(math.pi * self.scale) - np.log1p(z * z) - self._log_mass

    def dlogpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.loc) / self.scale
        return -2.0 * z / (self.scale * (1.0 + z * z))

    def sample(self, rng, size=None):
        lo = 0.5 - math.atan(self.loc / self.scale) / math.pi  # CDF at 0
        u = lo + (1.0 - lo) * rng.random(size)
        return self.loc + self.scale * np.tan(math.pi * (u - 0.5))


def pc_prior_rate(sigma0: float, alpha: float) -> float:
    """Exponential rate giving ``P(sigma > sigma0) = alpha``."""
    if not sigma0 > 0:
        raise ValueError(f"sigma0 must be positive, got {sigma0!r}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha!r}")
    return -math.log(alpha) / sigma0


def pc_prior(sigma0: float, alpha: float) -> Exponential:
    rate = pc_prior_rate(sigma0, alpha)
    if rate == 0.0:
        raise ValueError("alpha = 1 gives an improper flat prior")
    return Exponential(rate)


def positive_logpdf_unconstrained(prior, u):
    """Log density of ``log x`` when ``x`` has ``prior``; includes the Jacobian."""
    x = np.exp(u)
    return prior.logpdf(x) + u


def positive_dlogpdf_unconstrained(prior, u):
    x = np.exp(u)
    return prior.dlogpdf(x) * x + 1.0
