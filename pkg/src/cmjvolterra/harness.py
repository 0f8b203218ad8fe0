"""Scaling-limit experiments: CMJ families converging to a CBI limit.

For each n in a sequence, a model is built whose mechanisms converge to those
of the limit, replicas are simulated, and the empirical Laplace transform of
Z(gamma_n t) / n is compared with the exact transform of the limit.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .cbi_limit import LimitParams, laplace_cbi
from .cmj_sim import simulate_ensemble
from .distributions import DiscreteLaw, LifeLengthLaw, ModelParams, SizeBiasedLaw, eta_beta
from .grid import GridFunction, fmt
from .volterra import (ResolventKernel, ResolventWarning, integrate_to, limit_kernel_rate,
                       resolvent_for, resolvent_total_integral)


class FamilyError(ValueError):
    pass


def _law_at(lifetime, n) -> LifeLengthLaw:
    return lifetime(n) if callable(lifetime) and not isinstance(lifetime, LifeLengthLaw) else lifetime


def _minimal_n(ok, start=1, stop=10**9) -> int:
    n = start
    while not ok(n):
        n *= 2
        if n > stop:
            return -1
    lo, hi = n // 2, n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def build_c1_family(limit: LimitParams, lifetime, n: int) -> ModelParams:
    """Model at scale n whose mechanisms converge to those of ``limit``.

    gamma_n = gamma_star n and lambda_n = (1 - b / gamma_n) / eta, so that
    gamma_n (1 - lambda_n eta) = b exactly.  Offspring: with no branching atoms
    every birth event has one child (the Feller family); a branching atom
    (u, w) becomes an offspring batch of size ceil(u n) with probability
    w / (n gamma_n), the remaining mass staying on one child, which forces
    m = -sum(w u).  Immigration: batches of one child at rate
    zeta a / gamma_star plus batches of ceil(u n) at rate zeta w / gamma_n,
    so that zeta_n psi_n converges to zeta psi.
    """
    law = _law_at(lifetime, n)
    eta, sigma = law.moments()
    if not callable(lifetime) or isinstance(lifetime, LifeLengthLaw):
        if abs(eta - limit.eta) > 1e-9 * eta or abs(sigma - limit.sigma) > 1e-9 * sigma:
            raise FamilyError(
                f"lifetime moments (eta={eta}, sigma={sigma}) differ from the limit's "
                f"(eta={limit.eta}, sigma={limit.sigma})")
    if not limit_gap_factor(limit) > 0:
        raise FamilyError(f"need b + m + beta sigma lambda > 0 (got b + m = {limit.b + limit.m:.6g}, "
                          f"beta = {limit.beta:.6g}); choose beta > "
                          f"{-(limit.b + limit.m) / (limit.sigma * limit.lambda_):.6g}")
    g1 = limit.gamma_star
    if not g1 > 0:
        raise FamilyError("the built-in recipes need gamma_star > 0")
    if limit.c != 0:
        raise FamilyError("the built-in recipes cannot produce a Gaussian branching part c > 0")
    atoms = limit.nu0_atoms
    m_atoms = -sum(u * w for u, w in atoms)
    if abs(limit.m - m_atoms) > 1e-12 * max(1.0, abs(m_atoms)):
        raise FamilyError(f"the atom recipe forces m = -sum(w u) = {m_atoms}, got m = {limit.m}")

    def offspring_ok(k):
        gk = g1 * k
        if limit.b >= gk:
            return False
        if sum(w / (k * gk) for _, w in atoms) > 1:
            return False
        return all(math.ceil(u * k) >= 2 for u, _ in atoms)

    if not offspring_ok(n):
        raise FamilyError(f"probabilities leave [0, 1] at n={n}; minimal valid n is "
                          f"{_minimal_n(offspring_ok)}")
    gamma_n = g1 * n
    lam = (1.0 - limit.b / gamma_n) / eta
    pmf: dict[int, float] = {}
    for u, w in atoms:
        K = math.ceil(u * n)
        pmf[K] = pmf.get(K, 0.0) + w / (n * gamma_n)
    pmf[1] = 1.0 - math.fsum(pmf.values())
    offspring = DiscreteLaw(pmf)

    zeta_n = 0.0
    immigration = DiscreteLaw({1: 1.0})
    if limit.zeta > 0:
        rates = {}
        if limit.a > 0:
            rates[1] = limit.zeta * limit.a / g1
        for u, w in limit.nu1_atoms:
            K = max(1, math.ceil(u * n))
            rates[K] = rates.get(K, 0.0) + limit.zeta * w / gamma_n
        zeta_n = math.fsum(rates.values())
        if zeta_n > 0:
            probs = {k: r / zeta_n for k, r in rates.items()}
            total = math.fsum(probs.values())
            k_max = max(probs)
            probs[k_max] += 1.0 - total
            immigration = DiscreteLaw(probs)
    return ModelParams(n, gamma_n, lam, zeta_n, law, offspring, immigration, limit.beta)


def criticality_gap(params: ModelParams) -> float:
    """gamma_n (1 - lambda m eta_beta); tends to b + m + beta sigma lambda."""
    return params.gamma_n * (1.0 - params.lambda_m * eta_beta(params.lifetime, params.beta,
                                                              params.gamma_n))


def empirical_laplace(samples, z: float) -> tuple[float, float]:
    """(mean, standard error) of exp(-z X) over the samples."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least two samples")
    e = np.exp(-z * x)
    return float(e.mean()), float(e.std(ddof=1) / math.sqrt(e.size))


def _rescaled_grid(T, h):
    n = int(round(T / h))
    if n < 1 or abs(n * h - T) > 1e-9 * T:
        raise ValueError(f"T={T} is not a multiple of h={h}")
    return h * np.arange(n + 1)


def _eps1_values(lives, params: ModelParams, t):
    """eps1 on the rescaled times t for each row of ancestor lifetimes."""
    lives = np.atleast_2d(np.asarray(lives, dtype=float))
    n, g, beta = params.n, params.gamma_n, params.beta
    sb = SizeBiasedLaw(params.lifetime, beta, g)
    expected = sb.tail(g * t)
    srt = np.sort(lives, axis=1)
    z0 = lives.shape[1]
    out = np.empty((lives.shape[0], t.size))
    for r in range(lives.shape[0]):
        alive = z0 - np.searchsorted(srt[r], g * t, side="right")
        out[r] = np.exp(-beta * t) * (alive - z0 * expected) / n
    return out


def error_eps1(ancestor_lifetimes, params: ModelParams, T: float, h: float) -> GridFunction:
    """(1/n) sum_i exp(-beta t) [1{e_i > gamma_n t} - P(S_beta > gamma_n t)]."""
    t = _rescaled_grid(T, h)
    if len(ancestor_lifetimes) == 0:
        return GridFunction(h, np.zeros(t.size))
    return GridFunction(h, _eps1_values(ancestor_lifetimes, params, t)[0])


def eps1_sup_norms(ancestor_matrix, params: ModelParams, T: float, h: float) -> np.ndarray:
    """sup over [0, T] of |eps1| for each row of ancestor lifetimes.

    The alive count jumps at e_i / gamma_n, so besides the grid both one-sided
    values at every jump inside [0, T] are examined.
    """
    lives = np.atleast_2d(np.asarray(ancestor_matrix, dtype=float))
    t = _rescaled_grid(T, h)
    g, beta, n = params.gamma_n, params.beta, params.n
    sb = SizeBiasedLaw(params.lifetime, beta, g)
    out = np.max(np.abs(_eps1_values(lives, params, t)), axis=1)
    z0 = lives.shape[1]
    for r in range(lives.shape[0]):
        srt = np.sort(lives[r])
        s = srt[srt <= g * t[-1]] / g
        if s.size == 0:
            continue
        base = z0 * sb.tail(g * s)
        damp = np.exp(-beta * s)
        right = z0 - np.searchsorted(srt, g * s, side="right")
        left = z0 - np.searchsorted(srt, g * s, side="left")
        v = max(np.max(np.abs(right - base) * damp), np.max(np.abs(left - base) * damp)) / n
        out[r] = max(out[r], v)
    return out


def limit_tail_integral(limit: LimitParams):
    """s -> int_s^inf of the rescaled limit kernel exp(-kappa u) / (sigma lambda)."""
    kappa = limit_kernel_rate(limit)
    scale = 1.0 / (limit.sigma * limit.lambda_ * kappa)
    return lambda s: scale * np.exp(-kappa * np.asarray(s, dtype=float))


def limit_gap_factor(limit: LimitParams) -> float:
    """b + m + beta sigma lambda, the limit of gamma_n (1 - lambda m eta_beta) / (lambda m eta_beta)."""
    return limit.b + limit.m + limit.beta * limit.sigma * limit.lambda_


def error_eps5(z0_over_n: float, R: ResolventKernel | None, limit: LimitParams, T: float,
               h: float, factor: float | None = None, tail=None) -> GridFunction:
    """(Z0/n) [F int_t^inf R_beta(gamma_n s) ds - exp(-kappa t)] on the rescaled grid.

    F = gamma_n (1 - lambda m eta_beta) / (lambda m eta_beta) unless ``factor`` is
    given, and kappa is the decay rate of the limit kernel.  ``tail`` may replace
    the numerical tail integral of R by an exact one (a function of rescaled t).
    """
    t = _rescaled_grid(T, h)
    if tail is not None:
        if factor is None:
            raise ValueError("an explicit tail needs an explicit factor")
        vals = factor * np.asarray(tail(t), dtype=float)
        return GridFunction(h, z0_over_n * (vals - np.exp(-limit_kernel_rate(limit) * t)))
    g = R.gamma_n
    if t[-1] * g > R.T * (1 + 1e-12):
        raise ValueError("resolvent horizon shorter than the requested grid")
    if factor is None:
        if R.law is None:
            raise ValueError("need the lifetime law or an explicit factor")
        x = R.lambda_m * eta_beta(R.law, R.beta, g)
        factor = g * (1.0 - x) / x
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolventWarning)
        total = resolvent_total_integral(R)
    Qt = integrate_to(R.base.values, R.left, R.h, g * t)
    tail_vals = (total - Qt) / g
    return GridFunction(h, z0_over_n * (factor * tail_vals - np.exp(-limit_kernel_rate(limit) * t)))


@dataclass
class ConvergenceConfig:
    n_sequence: list
    replicas: int = 1000
    eval_times: list = field(default_factory=lambda: [1.0])
    z_list: list = field(default_factory=lambda: [1.0])
    alpha: float = 1.5
    seed: int = 0
    z0: float = 1.0
    tolerances: list = field(default_factory=list)
    dt: float = 1e-3
    diag_h: float = 0.01
    resolvent_h: float = 0.05
    block_size: int = 250
    threads: int = 1
    max_events: int = 10**7

    def __post_init__(self):
        ns = list(self.n_sequence)
        if not ns or any(b <= a for a, b in zip(ns, ns[1:])):
            raise ValueError("n_sequence must be strictly increasing")
        if self.replicas < 100:
            raise ValueError("need at least 100 replicas")
        if not 1 < self.alpha < 2:
            raise ValueError("alpha must lie in (1, 2)")
        if not self.eval_times or min(self.eval_times) <= 0:
            raise ValueError("evaluation times must be positive")


@dataclass
class ConvergenceReport:
    rows: list
    per_n: list
    checks: list

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks)

    def gap(self, n, t, z) -> dict:
        for r in self.rows:
            if r["n"] == n and r["t"] == t and r["z"] == z:
                return r
        raise KeyError((n, t, z))

    def rows_csv(self) -> str:
        cols = ["n", "t", "z", "empirical", "stderr", "oracle", "gap"]
        return _csv(cols, self.rows)

    def per_n_csv(self) -> str:
        cols = ["n", "gamma_n", "lambda_n", "ancestors", "replicas", "eps1_sup", "eps5_sup",
                "first_moment_sup", "alpha_moment", "criticality_gap"]
        return _csv(cols, self.per_n)

    def summary(self) -> dict:
        return {"pass": self.passed, "checks": self.checks, "gaps": self.rows,
                "per_n": self.per_n}

    def summary_json(self) -> str:
        return json.dumps(_plain(self.summary()), indent=2, sort_keys=True) + "\n"


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(fmt(x))
    return x


def _csv(cols, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([fmt(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()


def run_convergence(config: ConvergenceConfig, limit: LimitParams, lifetime) -> ConvergenceReport:
    """Monte Carlo comparison of Z(gamma_n t)/n with the CBI Laplace transform."""
    times = sorted(float(t) for t in config.eval_times)
    t_max = times[-1]
    moment_t = np.linspace(0.0, t_max, 11)[1:]
    grid_t = np.union1d(times, moment_t)
    law0 = _law_at(lifetime, config.n_sequence[0])
    if abs(law0.moments()[0] - 1.0) > 1e-9:
        warnings.warn("limit coefficients are only cross-checked for unit-mean lifetimes",
                      UserWarning, stacklevel=2)
    rows, per_n = [], []
    for i, n in enumerate(config.n_sequence):
        params = build_c1_family(limit, lifetime, n)
        z0 = int(math.floor(n * config.z0))
        g = params.gamma_n
        ens = simulate_ensemble(params, z0, g * t_max, g * grid_t, config.replicas,
                                config.seed, block_size=config.block_size,
                                threads=config.threads, max_events=config.max_events,
                                keep_ancestors=True, stream_offset=i << 32)
        X = ens.counts / n
        x0 = z0 / n
        for t in times:
            k = int(np.searchsorted(grid_t, t))
            for z in config.z_list:
                emp, se = empirical_laplace(X[:, k], z)
                orc = laplace_cbi(x0, z, t, limit, config.dt)
                rows.append({"n": n, "t": t, "z": float(z), "empirical": emp, "stderr": se,
                             "oracle": orc, "gap": abs(emp - orc)})
        damp = np.exp(-params.beta * grid_t)
        Xd = X * damp
        first = float(np.max(Xd.mean(axis=0)))
        alpha_m = float(np.mean(Xd[:, -1] ** config.alpha))
        eps1 = float(np.mean(eps1_sup_norms(ens.ancestor_lifetimes, params, t_max,
                                            config.diag_h))) if z0 else 0.0
        horizon = config.resolvent_h * math.ceil(1.5 * g * t_max / config.resolvent_h)
        R = resolvent_for(params, horizon, config.resolvent_h)
        eps5 = error_eps5(x0, R, limit, t_max, config.diag_h).sup_norm()
        per_n.append({"n": n, "gamma_n": g, "lambda_n": params.lambda_n, "ancestors": z0,
                      "replicas": config.replicas, "eps1_sup": eps1, "eps5_sup": eps5,
                      "first_moment_sup": first, "alpha_moment": alpha_m,
                      "criticality_gap": float(criticality_gap(params))})
    report = ConvergenceReport(rows, per_n, [])
    report.checks = _evaluate(report, config)
    return report


def _evaluate(report: ConvergenceReport, config: ConvergenceConfig) -> list:
    checks = []
    for tol in config.tolerances:
        kind = tol.get("kind", "gap")
        if kind == "gap":
            r = report.gap(tol["n"], tol["t"], tol["z"])
            bound = tol.get("abs", 0.0) + tol.get("se_mult", 3.0) * r["stderr"]
            checks.append({"kind": "gap", "n": tol["n"], "t": tol["t"], "z": tol["z"],
                           "value": r["gap"], "bound": bound, "pass": r["gap"] < bound})
        elif kind == "decrease":
            small = report.gap(tol["n_small"], tol["t"], tol["z"])["gap"]
            large = report.gap(tol["n_large"], tol["t"], tol["z"])["gap"]
            checks.append({"kind": "decrease", "n_small": tol["n_small"],
                           "n_large": tol["n_large"], "t": tol["t"], "z": tol["z"],
                           "value": large, "bound": small, "pass": large < small})
        elif kind == "moment_ratio":
            key = tol.get("moment", "alpha_moment")
            vals = [p[key] for p in report.per_n]
            ratio = max(vals) / min(vals) if min(vals) > 0 else math.inf
            bound = tol.get("max_ratio", 5.0)
            checks.append({"kind": "moment_ratio", "moment": key, "value": ratio,
                           "bound": bound, "pass": ratio < bound})
        else:
            raise ValueError(f"unknown tolerance kind {kind!r}")
    return checks


def config_to_dict(config: ConvergenceConfig) -> dict:
    return asdict(config)

