"""TOML run configuration for model fits.

Example::

    pooling = "hierarchical"          # separate | pooled | hierarchical
    background = "lifetable"          # lifetable | none
    tau = 60                          # RMST horizon, months
    horizon = 120                     # survival-curve grid end, months

    [family]                          # one entry per end-point, or a single
    OS = "weibull"                    # string applying to all of them
    PFS = "loglogistic"

    [prior.beta_lambda0]
    mean = -3.0
    sd = 0.5

    [prior.phi.weibull]
    gamma_shape = 1.0
    gamma_rate = 1.0

    [prior.sigma]
    kind = "pc"                       # halfnormal | pc | lognormal | cauchy_trunc
    sigma0 = 0.18
    alpha = 0.01

    [sampler]
    chains = 4
    iterations = 2000
    warmup = 100

All Normal priors take a mean and a standard deviation. Sigma prior
parameters: ``halfnormal`` (``sd``), ``pc`` (``sigma0``, ``alpha``),
``lognormal`` (``meanlog``, ``sdlog``) and ``cauchy_trunc`` (``loc``, ``scale``).
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import priors as pr
from .dists import FAMILIES, HAS_ANCILLARY
from .model import POOLINGS, Priors
from .sampler import SamplerConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BACKGROUNDS = ("lifetable", "none")
SIGMA_KINDS = {
    "halfnormal": ("sd",),
    "pc": ("sigma0", "alpha"),
    "lognormal": ("meanlog", "sdlog"),
    "cauchy_trunc": ("loc", "scale"),
}
_TOP_KEYS = {"pooling", "background", "family", "prior", "sampler", "tau", "horizon"}
_NORMAL_PRIORS = ("beta_lambda0", "beta_age", "beta_pi")
_SAMPLER_KEYS = {f.name for f in fields(SamplerConfig)} - {"seed"}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists one message per offending field."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  {e}" for e in self.errors))


@dataclass(frozen=True)
class RunConfig:
    pooling: str = "hierarchical"
    background: str = "lifetable"
    families: object = "weibull"
    priors: Priors = field(default_factory=Priors)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    tau: float = 60.0
    horizon: float = 120.0

    def families_for(self, endpoints) -> list[str]:
        if isinstance(self.families, str):
            return [self.families] * len(endpoints)
        missing = [e for e in endpoints if e not in self.families]
        if missing:
            raise ConfigError([f"family.{e}: no latency family for end-point" for e in missing])
        return [self.families[e] for e in endpoints]


def _number(value, where: str, errors: list[str], positive: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        errors.append(f"{where}: expected a finite number, got {value!r}")
        return None
    if positive and not value > 0:
        errors.append(f"{where}: must be positive, got {value!r}")
        return None
    return float(value)


def _table(value, where: str, keys: tuple[str, ...], errors: list[str],
           positive: tuple[str, ...] = ()) -> dict | None:
    if not isinstance(value, dict):
        errors.append(f"{where}: expected a table with keys {', '.join(keys)}")
        return None
    out = {}
    for k in keys:
        if k not in value:
            errors.append(f"{where}.{k}: missing")
            continue
        v = _number(value[k], f"{where}.{k}", errors, positive=k in positive)
        if v is not None:
            out[k] = v
    for k in value:
        if k not in keys and k != "kind":
            errors.append(f"{where}.{k}: unknown key")
    return out if len(out) == len(keys) else None


def _sigma_prior(value, errors: list[str]):
    where = "prior.sigma"
    if not isinstance(value, dict):
        errors.append(f"{where}: expected a table")
        return None
    kind = value.get("kind")
    if kind not in SIGMA_KINDS:
        errors.append(f"{where}.kind: must be one of {', '.join(SIGMA_KINDS)}, got {kind!r}")
        return None
    keys = SIGMA_KINDS[kind]
    pos = tuple(k for k in keys if k not in ("meanlog", "loc"))
    t = _table(value, where, keys, errors, positive=pos)
    if t is None:
        return None
    if kind == "halfnormal":
        return pr.HalfNormal(t["sd"])
    if kind == "lognormal":
        return pr.LogNormal(t["meanlog"], t["sdlog"])
    if kind == "cauchy_trunc":
        return pr.TruncatedCauchy(t["loc"], t["scale"])
    try:
        return pr.pc_prior(t["sigma0"], t["alpha"])
    except ValueError as exc:
        errors.append(f"{where}: {exc}")
        return None


def parse_config(raw: dict) -> RunConfig:
    """Validate a parsed TOML document; raises :class:`ConfigError`."""
    errors: list[str] = []
    for k in raw:
        if k not in _TOP_KEYS:
            errors.append(f"{k}: unknown key")
    kw: dict = {}

    pooling = raw.get("pooling", "hierarchical")
    if pooling not in POOLINGS:
        errors.append(f"pooling: must be one of {', '.join(POOLINGS)}, got {pooling!r}")
    kw["pooling"] = pooling
    background = raw.get("background", "lifetable")
    if background not in BACKGROUNDS:
        errors.append(f"background: must be one of {', '.join(BACKGROUNDS)}, got {background!r}")
    kw["background"] = background

    fam = raw.get("family", "weibull")
    if isinstance(fam, str):
        if fam not in FAMILIES:
            errors.append(f"family: unknown family {fam!r}")
    elif isinstance(fam, dict):
        for e, f in fam.items():
            if f not in FAMILIES:
                errors.append(f"family.{e}: unknown family {f!r}")
    else:
        errors.append("family: expected a family name or a table of end-point = family")
    kw["families"] = fam

    for key in ("tau", "horizon"):
        if key in raw:
            v = _number(raw[key], key, errors, positive=True)
            if v is not None:
                kw[key] = v

    prior_raw = raw.get("prior", {})
    pkw: dict = {}
    if not isinstance(prior_raw, dict):
        errors.append("prior: expected a table")
        prior_raw = {}
    for k in prior_raw:
        if k not in _NORMAL_PRIORS + ("phi", "sigma"):
            errors.append(f"prior.{k}: unknown key")
    for k in _NORMAL_PRIORS:
        if k in prior_raw:
            t = _table(prior_raw[k], f"prior.{k}", ("mean", "sd"), errors, positive=("sd",))
            if t is not None:
                pkw[k] = pr.Normal(t["mean"], t["sd"])
    if "phi" in prior_raw:
        phi = dict(Priors().phi)
        if not isinstance(prior_raw["phi"], dict):
            errors.append("prior.phi: expected a table of family = {gamma_shape, gamma_rate}")
        else:
            for f, v in prior_raw["phi"].items():
                if f not in FAMILIES or not HAS_ANCILLARY[f]:
                    errors.append(f"prior.phi.{f}: not a family with an ancillary parameter")
                    continue
                t = _table(v, f"prior.phi.{f}", ("gamma_shape", "gamma_rate"), errors,
                           positive=("gamma_shape", "gamma_rate"))
                if t is not None:
                    phi[f] = pr.Gamma(t["gamma_shape"], t["gamma_rate"])
        pkw["phi"] = phi
    if "sigma" in prior_raw:
        s = _sigma_prior(prior_raw["sigma"], errors)
        if s is not None:
            pkw["sigma"] = s
    kw["priors"] = Priors(**pkw)

    sampler_raw = raw.get("sampler", {})
    skw = {}
    if not isinstance(sampler_raw, dict):
        errors.append("sampler: expected a table")
        sampler_raw = {}
    for k, v in sampler_raw.items():
        if k not in _SAMPLER_KEYS:
            errors.append(f"sampler.{k}: unknown key")
        elif k in ("target_accept", "trajectory_length"):
            num = _number(v, f"sampler.{k}", errors, positive=True)
            if num is not None:
                skw[k] = num
        elif isinstance(v, bool) or not isinstance(v, int):
            errors.append(f"sampler.{k}: expected an integer, got {v!r}")
        else:
            skw[k] = v
    if not errors:
        try:
            kw["sampler"] = SamplerConfig(**skw)
        except ValueError as exc:
            errors.append(f"sampler: {exc}")

    if errors:
        raise ConfigError(errors)
    return RunConfig(**kw)


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: not valid TOML ({exc})"]) from None
    return parse_config(raw)
