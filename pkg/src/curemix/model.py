"""Mixture cure model over several end-points and treatment arms.

For a subject in arm ``k`` and end-point ``j`` the survival function is

    S(t) = S_b(t) * (pi_kj + (1 - pi_kj) * S_u(t))

and the event density, obtained as ``-dS/dt``, is

    f(t) = S_b(t) * (h_b(t) * (pi_kj + (1 - pi_kj) * S_u(t)) + (1 - pi_kj) * f_u(t)).

The cure fractions ``pi_kj`` are tied together according to the pooling mode:

* ``separate``: each ``logit(pi_kj)`` has its own parameter.
* ``pooled``: ``logit(pi_kj) = beta_pi_k`` for every end-point.
* ``hierarchical``: ``logit(pi_kj) = nu_k + sigma_k * z_kj`` with ``z_kj ~ N(0, 1)``
  (non-centred form of ``logit(pi_kj) ~ N(nu_k, sigma_k^2)``).

All parameters live on an unconstrained vector; positive quantities are stored
as logs and the priors carry the Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import special

from . import priors as pr
from .data import TrialDataset
from .dists import FAMILIES, HAS_ANCILLARY, latency_terms
from .lifetable import BackgroundCurve

POOLINGS = ("separate", "pooled", "hierarchical")
_LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA_FLOOR = 1e-3


class ModelError(ValueError):
    """Likelihood evaluation produced an undefined value."""


def _default_phi():
    return {
        "weibull": pr.Gamma(1.0, 1.0),
        "loglogistic": pr.Gamma(1.0, 1.0),
        "gompertz": pr.Gamma(1.0, 1000.0),
        "lognormal": pr.Gamma(1.0, 2.0),
    }


@dataclass(frozen=True)
class Priors:
    """Prior settings; defaults follow the melanoma application.

    ``beta_pi`` is the prior on the arm-level logit cure fraction: ``nu_k`` when
    hierarchical, ``beta_pi_k`` when pooled and each ``logit(pi_kj)`` when
    separate. ``beta_lambda0_by_endpoint`` overrides ``beta_lambda0`` for named
    end-points.
    """

    beta_lambda0: pr.Normal = pr.Normal(-3.0, 0.5)
    beta_age: pr.Normal = pr.Normal(0.0, 0.01)
    phi: Mapping[str, pr.Gamma] = field(default_factory=_default_phi)
    beta_pi: pr.Normal = pr.Normal(-0.1, 0.2)
    sigma: object = pr.HalfNormal(2.5)
    beta_lambda0_by_endpoint: Mapping[str, pr.Normal] = field(default_factory=dict)

    def beta_lambda0_for(self, endpoint: str) -> pr.Normal:
        return self.beta_lambda0_by_endpoint.get(endpoint, self.beta_lambda0)


@dataclass(frozen=True)
class ModelSpec:
    endpoints: tuple[str, ...]
    arms: tuple[str, ...]
    families: tuple[str, ...]
    pooling: str = "hierarchical"
    priors: Priors = field(default_factory=Priors)
    age_center: float = 0.0
    covariates: bool = True

    def __post_init__(self):
        object.__setattr__(self, "endpoints", tuple(self.endpoints))
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "families", tuple(self.families))
        if not self.endpoints or not self.arms:
            raise ValueError("need at least one end-point and one arm")
        if len(self.families) != len(self.endpoints):
            raise ValueError("one latency family per end-point required")
        for f in self.families:
            if f not in FAMILIES:
                raise ValueError(f"unknown family {f!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        for f in self.families:
            if HAS_ANCILLARY[f] and f not in self.priors.phi:
                raise ValueError(f"no ancillary prior for family {f!r}")

    @classmethod
    def for_data(cls, data: TrialDataset, families, pooling="hierarchical",
                 priors: Priors | None = None, covariates: bool = True) -> ModelSpec:
        if isinstance(families, str):
            families = [families] * len(data.endpoints)
        elif isinstance(families, Mapping):
            families = [families[e] for e in data.endpoints]
        return cls(
            endpoints=data.endpoints,
            arms=data.arms,
            families=tuple(families),
            pooling=pooling,
            priors=priors or Priors(),
            age_center=data.covariate_means["age"],
            covariates=covariates,
        )

    @property
    def n_endpoints(self) -> int:
        return len(self.endpoints)

    @property
    def n_arms(self) -> int:
        return len(self.arms)


class Layout:
    """Deterministic block layout of the unconstrained parameter vector."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        K, J = spec.n_arms, spec.n_endpoints
        self.blocks: list[tuple[str, tuple[int, ...]]] = []
        if spec.pooling == "separate":
            self.blocks.append(("logit_pi", (K, J)))
        elif spec.pooling == "pooled":
            self.blocks.append(("beta_pi", (K,)))
        else:
            self.blocks += [("nu", (K,)), ("log_sigma", (K,)), ("z", (K, J))]
        self.blocks.append(("beta0", (K, J)))
        if spec.covariates:
            self.blocks.append(("beta_age", (J,)))
        self.anc_endpoints = np.array(
            [j for j, f in enumerate(spec.families) if HAS_ANCILLARY[f]], dtype=np.intp)
        if self.anc_endpoints.size:
            self.blocks.append(("log_phi", (self.anc_endpoints.size,)))

        self.slices: dict[str, slice] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}
        start = 0
        for name, shape in self.blocks:
            n = int(np.prod(shape))
            self.slices[name] = slice(start, start + n)
            self.shapes[name] = shape
            start += n
        self.size = start

    @property
    def names(self) -> list[str]:
        spec = self.spec
        out = []
        for name, shape in self.blocks:
            if name in ("logit_pi", "z", "beta0"):
                out += [f"{name}[{a},{e}]" for a in spec.arms for e in spec.endpoints]
            elif name in ("beta_pi", "nu", "log_sigma"):
                out += [f"{name}[{a}]" for a in spec.arms]
            elif name == "beta_age":
                out += [f"beta_age[{e}]" for e in spec.endpoints]
            elif name == "log_phi":
                out += [f"log_phi[{spec.endpoints[j]}]" for j in self.anc_endpoints]
        return out

    def unpack(self, x) -> dict[str, np.ndarray]:
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        return {name: x[..., self.slices[name]].reshape(lead + self.shapes[name])
                for name, _ in self.blocks}

    def pack(self, blocks: Mapping[str, np.ndarray]) -> np.ndarray:
        x = np.empty(self.size)
        for name, _ in self.blocks:
            x[self.slices[name]] = np.ravel(blocks[name])
        return x

    def logit_pi(self, p: Mapping[str, np.ndarray]) -> np.ndarray:
        """Cell logit cure fractions with shape ``lead + (K, J)``."""
        J = self.spec.n_endpoints
        if self.spec.pooling == "separate":
            return p["logit_pi"]
        if self.spec.pooling == "pooled":
            return np.repeat(p["beta_pi"][..., None], J, axis=-1)
        return p["nu"][..., None] + np.exp(p["log_sigma"])[..., None] * p["z"]

    def constrain(self, x) -> dict[str, np.ndarray]:
        """Natural-scale quantities, vectorised over any leading draw axes.

        ``rate`` is at the reference covariate (age equal to the centring
        constant). ``phi`` is NaN for exponential end-points.
        """
        p = self.unpack(x)
        lead = np.shape(x)[:-1]
        out = {"pi": special.expit(self.logit_pi(p)), "rate": np.exp(p["beta0"])}
        phi = np.full(lead + (self.spec.n_endpoints,), np.nan)
        if self.anc_endpoints.size:
            phi[..., self.anc_endpoints] = np.exp(p["log_phi"])
        out["phi"] = phi
        if self.spec.pooling == "pooled":
            out["pi_global"] = special.expit(p["beta_pi"])
        elif self.spec.pooling == "hierarchical":
            out["pi_global"] = special.expit(p["nu"])
            out["sigma"] = np.exp(p["log_sigma"])
        return out


class LogPrior:
    """Joint prior density of the unconstrained parameters of a spec."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.layout = Layout(spec)
        pri = spec.priors
        b0 = [pri.beta_lambda0_for(e) for e in spec.endpoints]
        self._b0_mean = np.array([p.mean for p in b0])
        self._b0_sd = np.array([p.sd for p in b0])
        anc_fams = [spec.families[j] for j in self.layout.anc_endpoints]
        self._phi_shape = np.array([pri.phi[f].shape for f in anc_fams])
        self._phi_rate = np.array([pri.phi[f].rate for f in anc_fams])
        # per-block normalising constants, summed once
        K = spec.n_arms
        self._b0_mean = np.tile(self._b0_mean, K)
        self._b0_sd = np.tile(self._b0_sd, K)
        self._b0_const = float(-np.sum(np.log(self._b0_sd)) - 0.5 * self._b0_sd.size * _LOG_2PI)
        self._phi_const = float(np.sum(self._phi_shape * np.log(self._phi_rate)
                                       - special.gammaln(self._phi_shape)))
        self._inc_block = {"separate": "logit_pi", "pooled": "beta_pi"}.get(spec.pooling, "nu")

    def evaluate(self, x, grad: bool):
        spec = self.spec
        pri = spec.priors
        sl = self.layout.slices
        g = np.zeros(x.size) if grad else None
        terms = {"hyper": 0.0}

        bp = pri.beta_pi
        inc = x[sl[self._inc_block]]
        terms["incidence"] = float(np.sum(bp.logpdf(inc)))
        if grad:
            g[sl[self._inc_block]] = bp.dlogpdf(inc)
        if spec.pooling == "hierarchical":
            ls = x[sl["log_sigma"]]
            z = x[sl["z"]]
            terms["hyper"] = float(np.sum(pr.positive_logpdf_unconstrained(pri.sigma, ls))
                                   - 0.5 * np.dot(z, z) - 0.5 * z.size * _LOG_2PI)
            if grad:
                g[sl["log_sigma"]] = pr.positive_dlogpdf_unconstrained(pri.sigma, ls)
                g[sl["z"]] = -z

        zb = (x[sl["beta0"]] - self._b0_mean) / self._b0_sd
        lat = self._b0_const - 0.5 * np.dot(zb, zb)
        if grad:
            g[sl["beta0"]] = -zb / self._b0_sd
        if spec.covariates:
            ba = x[sl["beta_age"]]
            lat += np.sum(pri.beta_age.logpdf(ba))
            if grad:
                g[sl["beta_age"]] = pri.beta_age.dlogpdf(ba)
        if self.layout.anc_endpoints.size:
            u = x[sl["log_phi"]]
            phi = np.exp(u)
            lat += self._phi_const + np.dot(self._phi_shape, u) - np.dot(self._phi_rate, phi)
            if grad:
                g[sl["log_phi"]] = self._phi_shape - self._phi_rate * phi
        terms["latency"] = float(lat)
        return terms, g

    def terms(self, x) -> dict[str, float]:
        """Prior split into ``incidence``, ``hyper`` (sigma and z) and ``latency``."""
        t, _ = self.evaluate(np.asarray(x, dtype=float), grad=False)
        return {k: float(v) for k, v in t.items()}

    def __call__(self, x) -> float:
        return sum(self.terms(x).values())


class CureModel:
    """Log posterior of a :class:`ModelSpec` bound to data and background.

    Instances are immutable after construction and safe to evaluate from
    several chains at once.
    """

    def __init__(self, spec: ModelSpec, data: TrialDataset, bg: BackgroundCurve | None = None):
        if tuple(data.endpoints) != spec.endpoints or tuple(data.arms) != spec.arms:
            raise ValueError("dataset end-points/arms do not match the model specification")
        if bg is None:
            bg = BackgroundCurve.none(data)
        if bg.n != len(data):
            raise ValueError("background curve was built for a different dataset")
        self.spec = spec
        self.layout = Layout(spec)
        K, J = spec.n_arms, spec.n_endpoints
        self.n = len(data)
        self.t = data.time
        self.log_t = np.log(self.t)
        self.event = data.event.astype(bool)
        self.j = data.endpoint_index
        self.cell = data.arm_index * J + self.j
        self.age_c = data.age - spec.age_center
        self.log_sb = bg.log_survival
        with np.errstate(divide="ignore"):
            self.log_hb = np.log(bg.hazard)
        self.has_background = bool(np.any(bg.hazard > 0))
        self.record_ids = [r.id for r in data.records]

        anc_pos = np.full(J, -1)
        anc_pos[self.layout.anc_endpoints] = np.arange(self.layout.anc_endpoints.size)
        self.groups = []
        for fam in dict.fromkeys(spec.families):
            js = [j for j in range(J) if spec.families[j] == fam]
            idx = np.flatnonzero(np.isin(self.j, js))
            self.groups.append((fam, idx, anc_pos[self.j[idx]]))

        self.prior = LogPrior(spec)
        self._KJ = K * J

    # -- core evaluation ----------------------------------------------------

    def _pointwise(self, x, grad: bool):
        lay = self.layout
        p = lay.unpack(x)
        ell_cell = lay.logit_pi(p).ravel()
        ell = ell_cell[self.cell]
        eta = p["beta0"].ravel()[self.cell]
        if self.spec.covariates:
            eta = eta + p["beta_age"][self.j] * self.age_c

        n = self.n
        log_su = np.empty(n)
        log_fu = np.empty(n)
        if grad:
            dsu_eta, dsu_anc = np.empty(n), np.empty(n)
            dfu_eta, dfu_anc = np.empty(n), np.empty(n)
        for fam, idx, apos in self.groups:
            log_anc = p["log_phi"][apos] if HAS_ANCILLARY[fam] else None
            terms = latency_terms(fam, eta[idx], log_anc, self.t[idx], self.log_t[idx])
            log_su[idx] = terms.log_surv
            log_fu[idx] = terms.log_pdf
            if grad:
                dsu_eta[idx] = terms.dsurv_eta
                dsu_anc[idx] = terms.dsurv_anc
                dfu_eta[idx] = terms.dpdf_eta
                dfu_anc[idx] = terms.dpdf_anc

        log_pi = -np.logaddexp(0.0, -ell)
        log_1mpi = -np.logaddexp(0.0, ell)
        pi = np.exp(log_pi)
        b = log_1mpi + log_su
        A = np.logaddexp(log_pi, b)  # log(pi + (1 - pi) S_u)
        ev = self.event
        if self.has_background:
            C = np.logaddexp(self.log_hb + A, log_1mpi + log_fu)
        else:
            C = log_1mpi + log_fu
        ll = self.log_sb + np.where(ev, C, A)
        if not grad:
            return ll, None

        wa = np.exp(log_pi - A)
        wb = np.exp(b - A)
        dA_ell = wa * (1.0 - pi) - wb * pi
        dA_eta = wb * dsu_eta
        dA_anc = wb * dsu_anc
        if not self.has_background:
            g_ell = np.where(ev, -pi, dA_ell)
            g_eta = np.where(ev, dfu_eta, dA_eta)
            g_anc = np.where(ev, dfu_anc, dA_anc)
            return ll, (g_ell, g_eta, g_anc)
        with np.errstate(invalid="ignore"):
            v1 = np.exp(self.log_hb + A - C)
            v2 = np.exp(log_1mpi + log_fu - C)
        v1 = np.where(np.isfinite(v1), v1, 0.0)
        g_ell = np.where(ev, v1 * dA_ell - v2 * pi, dA_ell)
        g_eta = np.where(ev, v1 * dA_eta + v2 * dfu_eta, dA_eta)
        g_anc = np.where(ev, v1 * dA_anc + v2 * dfu_anc, dA_anc)
        return ll, (g_ell, g_eta, g_anc)

    def _scatter(self, x, g_ell, g_eta, g_anc) -> np.ndarray:
        lay = self.layout
        spec = self.spec
        sl = lay.slices
        K, J = spec.n_arms, spec.n_endpoints
        out = np.empty(x.size)
        G = np.bincount(self.cell, g_ell, self._KJ)
        if spec.pooling == "separate":
            out[sl["logit_pi"]] = G
        elif spec.pooling == "pooled":
            out[sl["beta_pi"]] = G.reshape(K, J).sum(axis=1)
        else:
            G = G.reshape(K, J)
            sigma = np.exp(x[sl["log_sigma"]])
            z = x[sl["z"]].reshape(K, J)
            out[sl["nu"]] = G.sum(axis=1)
            out[sl["z"]] = (G * sigma[:, None]).ravel()
            out[sl["log_sigma"]] = (G * z).sum(axis=1) * sigma
        out[sl["beta0"]] = np.bincount(self.cell, g_eta, self._KJ)
        if spec.covariates:
            out[sl["beta_age"]] = np.bincount(self.j, g_eta * self.age_c, J)
        if lay.anc_endpoints.size:
            out[sl["log_phi"]] = np.bincount(self.j, g_anc, J)[lay.anc_endpoints]
        return out

    # -- public API ---------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.layout.size

    def pointwise_loglik(self, x) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return self._pointwise(np.asarray(x, dtype=float), grad=False)[0]

    def log_likelihood(self, x) -> float:
        return float(np.sum(self.pointwise_loglik(x)))

    def log_prior_terms(self, x) -> dict[str, float]:
        """Prior split into ``incidence``, ``hyper`` (sigma and z) and ``latency``."""
        return self.prior.terms(x)

    def log_prior(self, x) -> float:
        return sum(self.log_prior_terms(x).values())

    def log_density(self, x) -> float:
        return self.log_likelihood(x) + self.log_prior(x)

    def logp_and_grad(self, x) -> tuple[float, np.ndarray]:
        """Log posterior and its gradient; ``-inf`` when undefined."""
        x = np.asarray(x, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            ll, (g_ell, g_eta, g_anc) = self._pointwise(x, grad=True)
            terms, g_prior = self.prior.evaluate(x, grad=True)
            lp = float(np.sum(ll)) + sum(terms.values())
            if not np.isfinite(lp):
                return -np.inf, np.zeros_like(x)
            grad = self._scatter(x, g_ell, g_eta, g_anc) + g_prior
        if not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros_like(x)
        return lp, grad

    __call__ = logp_and_grad

    def check(self, x) -> np.ndarray:
        """Pointwise log-likelihood, raising :class:`ModelError` on NaN terms."""
        ll = self.pointwise_loglik(x)
        bad = np.flatnonzero(np.isnan(ll) | (ll == np.inf))
        if bad.size:
            i = int(bad[0])
            p = self.layout.unpack(x)
            block = "latency"
            if not np.all(np.isfinite(self.layout.logit_pi(p))):
                block = "incidence"
            elif np.isnan(self.log_sb[i]) or np.isnan(self.log_hb[i]):
                block = "background"
            raise ModelError(
                f"non-finite log-likelihood for record {self.record_ids[i]!r} "
                f"(index {i}) in the {block} block")
        return ll


def log_likelihood(spec: ModelSpec, data: TrialDataset, bg: BackgroundCurve | None, x) -> float:
    return float(np.sum(CureModel(spec, data, bg).check(x)))


def log_prior(spec: ModelSpec, x) -> float:
    """Log prior density of the unconstrained vector, Jacobians included."""
    return LogPrior(spec)(x)


def log_posterior_and_gradient(spec: ModelSpec, data: TrialDataset,
                               bg: BackgroundCurve | None, x) -> tuple[float, np.ndarray]:
    return CureModel(spec, data, bg).logp_and_grad(x)


def initialize(spec: ModelSpec, data: TrialDataset | None, rng: np.random.Generator) -> np.ndarray:
    """Draw an unconstrained starting point from the priors.

    Between-end-point SDs are floored at ``SIGMA_FLOOR`` so chains do not start
    in the neck of the hierarchical funnel.
    """
    lay = Layout(spec)
    pri = spec.priors
    K, J = spec.n_arms, spec.n_endpoints
    blocks = {}
    if spec.pooling == "separate":
        blocks["logit_pi"] = pri.beta_pi.sample(rng, (K, J))
    elif spec.pooling == "pooled":
        blocks["beta_pi"] = pri.beta_pi.sample(rng, K)
    else:
        blocks["nu"] = pri.beta_pi.sample(rng, K)
        blocks["log_sigma"] = np.log(np.maximum(pri.sigma.sample(rng, K), SIGMA_FLOOR))
        blocks["z"] = rng.standard_normal((K, J))
    blocks["beta0"] = np.column_stack(
        [pri.beta_lambda0_for(e).sample(rng, K) for e in spec.endpoints])
    if spec.covariates:
        blocks["beta_age"] = pri.beta_age.sample(rng, J)
    if lay.anc_endpoints.size:
        phis = [pri.phi[spec.families[j]].sample(rng) for j in lay.anc_endpoints]
        blocks["log_phi"] = np.log(np.maximum(phis, 1e-300))
    return lay.pack(blocks)
