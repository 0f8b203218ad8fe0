"""The continuous-state branching limit with immigration (CBI).

Limit dynamics, with k = eta / sigma:

    dZ = k (a zeta - (b + m) Z) dt
         + k sqrt(2 c + 2 gamma_star sigma lambda^2) sqrt(lambda Z) dB
         + jumps of size k u at rate lambda w Z (branching atoms, compensated)
         + jumps of size k u at rate zeta w    (immigration atoms).

The factor sqrt(lambda) in the Gaussian part comes from the white noise
driving the equation having intensity lambda dt du.  With it the generator
matches the Laplace exponent below whenever lambda eta = 1:

    E_x exp(-z Z_t) = exp(-x V_t(z) - zeta int_0^t psi(k V_s(z)) ds),
    dV/dt = -lambda phi_lambda(k V) - varphi(V),  V_0 = z.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .distributions import LevyTriple, _atoms, phi_lambda, psi_limit, varphi
from .grid import GridFunction


class CbiSimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LimitParams:
    b: float = 0.0
    m: float = 0.0
    c: float = 0.0
    a: float = 0.0
    nu0_atoms: tuple = ()
    nu1_atoms: tuple = ()
    lambda_: float = 1.0
    zeta: float = 0.0
    eta: float = 1.0
    sigma: float = 1.0
    gamma_star: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nu0_atoms", _atoms(self.nu0_atoms))
        object.__setattr__(self, "nu1_atoms", _atoms(self.nu1_atoms))
        if abs(self.lambda_ * self.eta - 1.0) > 1e-9:
            raise ValueError(f"need lambda * eta = 1, got {self.lambda_ * self.eta!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.gamma_star < 0 or self.zeta < 0 or self.beta < 0:
            raise ValueError("gamma_star, zeta and beta must be nonnegative")
        LevyTriple(self.m, self.c, self.a, self.nu0_atoms, self.nu1_atoms)

    @property
    def triple(self) -> LevyTriple:
        return LevyTriple(self.m, self.c, self.a, self.nu0_atoms, self.nu1_atoms)

    @property
    def k(self) -> float:
        return self.eta / self.sigma

    @property
    def noise_scale(self) -> float:
        """Coefficient of sqrt(Z) dB."""
        lam = self.lambda_
        return self.k * math.sqrt(2 * self.c + 2 * self.gamma_star * self.sigma * lam * lam) * math.sqrt(lam)

    def to_dict(self) -> dict:
        return {
            "b": self.b, "m": self.m, "c": self.c, "a": self.a,
            "nu0_atoms": [list(x) for x in self.nu0_atoms],
            "nu1_atoms": [list(x) for x in self.nu1_atoms],
            "lambda": self.lambda_, "zeta": self.zeta, "eta": self.eta,
            "sigma": self.sigma, "gamma_star": self.gamma_star, "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LimitParams":
        kw = dict(d)
        if "lambda" in kw:
            kw["lambda_"] = kw.pop("lambda")
        kw["nu0_atoms"] = tuple(tuple(x) for x in kw.get("nu0_atoms", ()))
        kw["nu1_atoms"] = tuple(tuple(x) for x in kw.get("nu1_atoms", ()))
        return cls(**kw)


@dataclass
class CbiPath:
    times: np.ndarray
    values: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray

    def to_grid(self) -> GridFunction:
        return GridFunction(self.times[1] - self.times[0], self.values)


def _steps(T, dt):
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * T:
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    return n


def simulate_cbi_ensemble(limit: LimitParams, z0: float, T: float, dt: float,
                          paths: int, rng: np.random.Generator, record: bool = False):
    """Euler scheme for ``paths`` independent copies, clamped at zero.

    Returns the (steps + 1, paths) array of states and, if ``record``, the
    list of (step, path, time, size) jumps.

    When immigration is present and 2 k a zeta < noise_scale**2 the diffusion
    reaches zero and leaves it again; clamping then converges slowly in dt
    (roughly like dt ** feller_index), and a warning is issued.
    """
    if z0 < 0:
        raise ValueError("z0 must be nonnegative")
    n = _steps(T, dt)
    k = limit.k
    lam, zeta = limit.lambda_, limit.zeta
    drift0 = k * limit.a * zeta
    drift1 = -k * (limit.b + limit.m) - lam * k * sum(u * w for u, w in limit.nu0_atoms)
    noise = limit.noise_scale
    immigrates = zeta > 0 and (limit.a > 0 or limit.nu1_atoms)
    if immigrates and noise > 0 and 2 * drift0 < noise * noise:
        warnings.warn(f"zero is accessible (Feller index {2 * drift0 / noise ** 2:.3g} < 1); "
                      "the clamped Euler scheme is biased at this dt", UserWarning, stacklevel=2)
    z = np.full(paths, float(z0))
    out = np.empty((n + 1, paths))
    out[0] = z
    jumps = []
    sq = math.sqrt(dt)
    for i in range(n):
        zi = z
        new = zi + (drift0 + drift1 * zi) * dt
        if noise > 0:
            new = new + noise * np.sqrt(zi) * sq * rng.standard_normal(paths)
        for u, w in limit.nu0_atoms:
            cnt = rng.poisson(lam * w * zi * dt)
            new = new + k * u * cnt
            if record:
                for j in np.flatnonzero(cnt):
                    for _ in range(cnt[j]):
                        jumps.append((i, j, (i + rng.random()) * dt, k * u))
        for u, w in limit.nu1_atoms:
            cnt = rng.poisson(zeta * w * dt, paths)
            new = new + k * u * cnt
            if record:
                for j in np.flatnonzero(cnt):
                    for _ in range(cnt[j]):
                        jumps.append((i, j, (i + rng.random()) * dt, k * u))
        if np.any(np.isnan(new)):
            raise CbiSimulationError(f"NaN state at step {i + 1}")
        z = np.maximum(new, 0.0)
        out[i + 1] = z
    return out, jumps


def simulate_cbi(limit: LimitParams, z0: float, T: float, dt: float,
                 rng: np.random.Generator) -> CbiPath:
    states, jumps = simulate_cbi_ensemble(limit, z0, T, dt, 1, rng, record=True)
    jt = np.array([j[2] for j in jumps])
    js = np.array([j[3] for j in jumps])
    order = np.argsort(jt, kind="stable")
    return CbiPath(dt * np.arange(states.shape[0]), states[:, 0], jt[order], js[order])


def _rhs(v, limit: LimitParams):
    return -limit.lambda_ * phi_lambda(limit.k * v, limit.triple, limit.lambda_) - varphi(v, limit)


def v_ode(z: float, T: float, dt: float | None, limit: LimitParams) -> GridFunction:
    """V_t(z) on [0, T] by classical RK4 (dt defaults to T / 1000)."""
    if z < 0:
        raise ValueError("z must be nonnegative")
    dt = T * 1e-3 if dt is None else dt
    n = _steps(T, dt)
    v = np.empty(n + 1)
    v[0] = z
    x = float(z)
    for i in range(n):
        k1 = _rhs(x, limit)
        k2 = _rhs(x + 0.5 * dt * k1, limit)
        k3 = _rhs(x + 0.5 * dt * k2, limit)
        k4 = _rhs(x + dt * k3, limit)
        x = float(x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        if x < -1e-9:
            raise ValueError(f"V became negative at step {i + 1}; reduce dt")
        v[i + 1] = x
    return GridFunction(dt, v)


def laplace_cbi(x: float, z: float, t: float, limit: LimitParams,
                dt: float | None = None) -> float:
    """E_x exp(-z Z_t) for the CBI started at x."""
    if t == 0:
        return math.exp(-x * z)
    V = v_ode(z, t, dt, limit)
    out = -x * V.values[-1]
    if limit.zeta > 0:
        g = psi_limit(limit.k * V.values, limit.triple)
        # Simpson when the step count is even, trapezoid otherwise
        if (len(g) - 1) % 2 == 0:
            integral = V.h / 3.0 * (g[0] + g[-1] + 4 * g[1:-1:2].sum() + 2 * g[2:-1:2].sum())
        else:
            integral = V.h * (g.sum() - 0.5 * (g[0] + g[-1]))
        out -= limit.zeta * integral
    return math.exp(out)


def mean_cbi(x: float, t: float, limit: LimitParams) -> float:
    """E_x Z_t, from the linear drift."""
    k = limit.k
    r = k * (limit.b + limit.m)
    inflow = k * limit.zeta * (limit.a + sum(u * w for u, w in limit.nu1_atoms))
    if abs(r) < 1e-14:
        return x + inflow * t
    e = math.exp(-r * t)
    return x * e + inflow / r * (1 - e)
