"""Convergence diagnostics: split R-hat, effective sample size, MCSE."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateChainWarning(UserWarning):
    """Chains with zero variance; the statistic falls back to a convention."""


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim != 2:
        raise ValueError("expected draws with shape (chains, draws) or (draws,)")
    return x


def split_rhat(x) -> float:
    """Split R-hat for one parameter; ``x`` has shape ``(chains, draws)``.

    Each chain is cut in half (dropping the middle draw when odd) and the
    usual between/within variance ratio is computed over the halves. Chains
    with no variance return 1.0 with a :class:`DegenerateChainWarning`.
    """
    x = _as_chains(x)
    n = x.shape[1] // 2
    if n < 2:
        raise ValueError("split R-hat needs at least 4 draws per chain")
    halves = np.concatenate([x[:, :n], x[:, -n:]], axis=0)
    w = halves.var(axis=1, ddof=1).mean()
    if not w > 0:
        warnings.warn("zero within-chain variance; R-hat set to 1", DegenerateChainWarning,
                      stacklevel=2)
        return 1.0
    b = n * halves.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row, via zero-padded FFT."""
    n = x.shape[-1]
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n]
    return acov / n


def ess(x) -> float:
    """Effective sample size with Geyer's initial monotone sequence.

    Works on one chain or several (``(chains, draws)``), combining chains as
    in Stan. A constant sequence gives 0 with a warning.
    """
    x = _as_chains(x)
    m, n = x.shape
    if n < 8:
        raise ValueError("ESS needs at least 8 draws per chain")
    acov = _autocovariance(x)
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        warnings.warn("constant draws; ESS set to 0", DegenerateChainWarning, stacklevel=2)
        return 0.0
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    total = 0.0
    prev = np.inf
    for p in pairs:
        if p <= 0:
            break
        p = min(p, prev)
        total += p
        prev = p
    tau = -1.0 + 2.0 * total
    draws = m * n
    tau = max(tau, 1.0 / math.log10(draws)) if draws > 1 else tau
    return float(draws / tau)


def mcse(x, ess_value: float | None = None) -> float:
    """Monte-Carlo standard error of the mean, ``SD / sqrt(ESS)``."""
    x = np.asarray(x, dtype=float).ravel()
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    if sd == 0:
        return 0.0
    if ess_value is None:
        ess_value = ess(x)
    if not ess_value > 0:
        raise ValueError("ess must be positive")
    return float(sd / math.sqrt(ess_value))


@dataclass(frozen=True)
class ParamSummary:
    name: str
    mean: float
    sd: float
    lower95: float
    upper95: float
    rhat: float
    ess: float
    mcse: float


def summarize(draws: np.ndarray, names) -> list[ParamSummary]:
    """Per-parameter posterior summary for ``draws`` of shape (chains, draws, dim)."""
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateChainWarning)
        for i, name in enumerate(names):
            x = draws[..., i]
            flat = x.ravel()
            if x.shape[1] >= 4:
                r = split_rhat(x)
            else:
                r = float("nan")
            e = ess(x) if x.shape[1] >= 8 else float("nan")
            se = mcse(flat, e) if e > 0 else 0.0
            lo, hi = np.quantile(flat, [0.025, 0.975])
            out.append(ParamSummary(name, float(flat.mean()), float(flat.std(ddof=1)),
                                    float(lo), float(hi), r, e, se))
    return out
