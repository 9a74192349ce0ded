"""Hamiltonian Monte Carlo with warmup adaptation.

Each transition draws the number of leapfrog steps uniformly from
``1..L_max``, where ``L_max`` covers ``trajectory_length`` in the adapted
metric at the current step size (capped at ``max_leapfrog``). During warmup
the step size follows dual averaging towards ``target_accept`` and a diagonal
inverse metric is re-estimated on doubling windows. Both are frozen for the
sampling phase.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diagnostics import DegenerateChainWarning, ess, mcse, split_rhat, summarize  # noqa: F401

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0


class FitError(RuntimeError):
    """The target could not be evaluated at any starting point."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iterations: int = 2000
    warmup: int = 100
    seed: int = 0
    target_accept: float = 0.8
    max_leapfrog: int = 64
    trajectory_length: float = 4.0
    init_retries: int = 100

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("need 0 <= warmup < iterations")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_leapfrog < 1:
            raise ValueError("max_leapfrog must be >= 1")
        if not self.trajectory_length > 0:
            raise ValueError("trajectory_length must be positive")
        if self.init_retries < 1:
            raise ValueError("init_retries must be >= 1")

    @property
    def n_draws(self) -> int:
        return self.iterations - self.warmup


@dataclass
class PosteriorDraws:
    """Post-warmup output of :func:`sample`.

    Array axes are ``(chain, draw, ...)``; ``loglik`` holds the pointwise
    log-likelihood of each record at each kept draw, when requested.
    """

    draws: np.ndarray
    names: list[str]
    log_density: np.ndarray
    accept_stat: np.ndarray
    divergent: np.ndarray
    n_leapfrog: np.ndarray
    step_size: np.ndarray
    inv_metric: np.ndarray
    step_size_trace: np.ndarray
    loglik: np.ndarray | None = None
    warmup_divergences: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.dim)

    def loglik_matrix(self) -> np.ndarray:
        if self.loglik is None:
            raise ValueError("pointwise log-likelihood was not recorded")
        return self.loglik.reshape(-1, self.loglik.shape[-1])

    @property
    def divergences(self) -> np.ndarray:
        return self.divergent.sum(axis=1)

    @property
    def divergence_rate(self) -> float:
        return float(self.divergent.mean())

    def param(self, name: str) -> np.ndarray:
        return self.draws[..., self.names.index(name)]


class DualAveraging:
    """Step-size adaptation of Hoffman and Gelman (2014)."""

    gamma = 0.05
    t0 = 10.0
    kappa = 0.75

    def __init__(self, step_size: float, target: float):
        self.target = target
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.hbar = 0.0
        self.log_eps_bar = 0.0
        self.count = 0

    def update(self, accept: float) -> float:
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.hbar = (1.0 - eta) * self.hbar + eta * (self.target - accept)
        log_eps = self.mu - math.sqrt(self.count) / self.gamma * self.hbar
        w = self.count ** -self.kappa
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def adaptation_windows(warmup: int) -> list[tuple[int, int]]:
    """Slow metric-adaptation windows ``[start, end)`` within warmup."""
    if warmup < 20:
        return []
    init, term, base = 75, 50, 25
    if init + term + base > warmup:
        init = int(0.15 * warmup)
        term = int(0.1 * warmup)
        base = warmup - init - term
    windows = []
    start, size = init, base
    last = warmup - term
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


def leapfrog(target, x, p, grad, step_size: float, n_steps: int, inv_metric):
    """Integrate Hamilton's equations; returns ``(x, p, logp, grad)``.

    Stops early if the target becomes non-finite.
    """
    x = x.copy()
    p = p + 0.5 * step_size * grad
    lp = -np.inf
    for i in range(n_steps):
        x = x + step_size * inv_metric * p
        lp, grad = target(x)
        if not np.isfinite(lp):
            return x, p, -np.inf, grad
        if i < n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return x, p, lp, grad


def hamiltonian(lp: float, p, inv_metric) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        return -lp + 0.5 * float(np.sum(inv_metric * p * p))


def _initial_point(target, dim, init, rng, retries):
    for _ in range(retries):
        if init is None:
            x = rng.uniform(-2.0, 2.0, dim)
        elif callable(init):
            x = np.asarray(init(rng), dtype=float)
        else:
            x = np.asarray(init, dtype=float).copy()
        lp, g = target(x)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            return x, lp, g
        if init is not None and not callable(init):
            break
    raise FitError(f"target not finite at any of {retries} initial points")


def _reasonable_step(target, x, lp, g, inv_metric, rng) -> float:
    eps = 1.0
    p = rng.standard_normal(x.size) / np.sqrt(inv_metric)
    h0 = hamiltonian(lp, p, inv_metric)

    def log_ratio(e):
        _, p1, lp1, _ = leapfrog(target, x, p, g, e, 1, inv_metric)
        h1 = hamiltonian(lp1, p1, inv_metric) if np.isfinite(lp1) else np.inf
        return h0 - h1

    log_half = math.log(0.5)
    growing = log_ratio(eps) > log_half
    for _ in range(60):
        eps = eps * 2.0 if growing else eps * 0.5
        ok = log_ratio(eps) > log_half
        if ok != growing:
            if growing:
                eps *= 0.5
            break
    return float(np.clip(eps, 1e-10, 1e7))


def _n_steps_max(cfg: SamplerConfig, step_size: float) -> int:
    return int(min(cfg.max_leapfrog, max(1, math.ceil(cfg.trajectory_length / step_size))))


def run_chain(target, dim: int, cfg: SamplerConfig, seed_seq: np.random.SeedSequence,
              init=None, pointwise: Callable | None = None) -> dict:
    """Run one chain; returns a dict of arrays for :class:`PosteriorDraws`."""
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    x, lp, g = _initial_point(target, dim, init, rng, cfg.init_retries)
    inv_metric = np.ones(dim)
    eps = _reasonable_step(target, x, lp, g, inv_metric, rng)
    adapt = DualAveraging(eps, cfg.target_accept)
    windows = adaptation_windows(cfg.warmup)
    win_idx = 0
    w_n, w_mean, w_m2 = 0, np.zeros(dim), np.zeros(dim)

    S = cfg.n_draws
    draws = np.empty((S, dim))
    lps = np.empty(S)
    acc = np.empty(S)
    div = np.zeros(S, dtype=bool)
    nlf = np.empty(S, dtype=int)
    eps_trace = np.empty(S)
    ll_rows = None
    last_ll = None
    warm_div = 0

    for it in range(cfg.iterations):
        warm = it < cfg.warmup
        L = int(rng.integers(1, _n_steps_max(cfg, eps) + 1))
        p0 = rng.standard_normal(dim) / np.sqrt(inv_metric)
        h0 = hamiltonian(lp, p0, inv_metric)
        x1, p1, lp1, g1 = leapfrog(target, x, p0, g, eps, L, inv_metric)
        h1 = hamiltonian(lp1, p1, inv_metric) if np.isfinite(lp1) else np.inf
        dh = h1 - h0
        divergent = not np.isfinite(dh) or dh > DIVERGENCE_THRESHOLD
        a = 0.0 if divergent or np.isnan(dh) else min(1.0, math.exp(min(0.0, -dh)))
        moved = rng.random() < a
        if moved:
            x, lp, g = x1, lp1, g1

        if warm:
            warm_div += divergent
            eps = adapt.update(a)
            if win_idx < len(windows):
                start, end = windows[win_idx]
                if start <= it < end:
                    w_n += 1
                    delta = x - w_mean
                    w_mean = w_mean + delta / w_n
                    w_m2 = w_m2 + delta * (x - w_mean)
                if it == end - 1:
                    var = w_m2 / max(w_n - 1, 1)
                    inv_metric = (w_n / (w_n + 5.0)) * var + 1e-3 * (5.0 / (w_n + 5.0))
                    w_n, w_mean, w_m2 = 0, np.zeros(dim), np.zeros(dim)
                    win_idx += 1
                    eps = _reasonable_step(target, x, lp, g, inv_metric, rng)
                    adapt.restart(eps)
            if it == cfg.warmup - 1:
                eps = adapt.final
            continue

        s = it - cfg.warmup
        draws[s] = x
        lps[s] = lp
        acc[s] = a
        div[s] = divergent
        nlf[s] = L
        eps_trace[s] = eps
        if pointwise is not None:
            if moved or last_ll is None:
                last_ll = np.asarray(pointwise(x), dtype=float)
            if ll_rows is None:
                ll_rows = np.empty((S, last_ll.size))
            ll_rows[s] = last_ll

    return dict(draws=draws, log_density=lps, accept_stat=acc, divergent=div,
                n_leapfrog=nlf, step_size=eps, inv_metric=inv_metric,
                step_size_trace=eps_trace, loglik=ll_rows, warmup_divergences=warm_div)


def chain_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """Independent per-chain streams spawned from ``seed``."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(n)


def sample(target: Callable, dim: int, cfg: SamplerConfig, init=None,
           pointwise: Callable | None = None, names: Sequence[str] | None = None,
           threads: int = 1, seed_seq: np.random.SeedSequence | None = None) -> PosteriorDraws:
    """Draw from ``target``, a callable returning ``(log density, gradient)``.

    ``init`` is a starting vector or a callable ``init(rng) -> vector``.
    Results depend only on ``cfg.seed`` (or ``seed_seq``), not on ``threads``.
    """
    seeds = chain_seeds(seed_seq if seed_seq is not None else cfg.seed, cfg.chains)
    if threads > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, cfg.chains)) as pool:
            futures = [pool.submit(run_chain, target, dim, cfg, s, init, pointwise) for s in seeds]
            results = [f.result() for f in futures]
    else:
        results = [run_chain(target, dim, cfg, s, init, pointwise) for s in seeds]

    stack = {k: np.stack([r[k] for r in results]) for k in
             ("draws", "log_density", "accept_stat", "divergent", "n_leapfrog",
              "step_size", "inv_metric", "step_size_trace", "warmup_divergences")}
    loglik = None
    if pointwise is not None:
        loglik = np.stack([r["loglik"] for r in results])
    out = PosteriorDraws(names=list(names) if names is not None else [f"x[{i}]" for i in range(dim)],
                         loglik=loglik, **stack)
    n_div = int(out.divergent.sum())
    if n_div:
        logger.info("%d divergent transitions after warmup", n_div)
    return out
