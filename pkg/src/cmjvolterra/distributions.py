"""Lifetime, offspring and immigration laws together with the branching mechanisms.

Convention: ``sigma`` (returned as ``sigma_half``) is HALF the second moment of
the lifetime, ``sigma = E[T^2] / 2``.  Every formula in this package uses that
convention, so the Feller variance coefficient reads ``2 / sigma`` and not
``1 / sigma``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TAIL_CUTOFF = 1e-12


_E1_SERIES = [(-1.0) ** k / math.factorial(k + 1) for k in range(10)]
_E2_SERIES = [(-1.0) ** k / (math.factorial(k) * (k + 2)) for k in range(10)]


def _series(x, coef):
    out = np.zeros_like(x)
    for a in reversed(coef):
        out = out * x + a
    return out


def _e1(x):
    """(1 - exp(-x)) / x, stable near zero; x may be complex."""
    x0 = np.asarray(x)
    x = np.atleast_1d(x0).astype(complex if np.iscomplexobj(x0) else float)
    small = np.abs(x) < 0.1
    out = _series(x, _E1_SERIES)
    xl = x[~small]
    out[~small] = (1.0 - np.exp(-xl)) / xl
    return out.reshape(x0.shape)


def _e2(x):
    """(1 - exp(-x) (1 + x)) / x**2 = int_0^1 s exp(-x s) ds; x may be complex."""
    x0 = np.asarray(x)
    x = np.atleast_1d(x0).astype(complex if np.iscomplexobj(x0) else float)
    small = np.abs(x) < 0.1
    out = _series(x, _E2_SERIES)
    xl = x[~small]
    out[~small] = (1.0 - np.exp(-xl) * (1.0 + xl)) / (xl * xl)
    return out.reshape(x0.shape)


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise ValueError("lifetime tail is only defined for t >= 0")
    return t


class LifeLengthLaw:
    """Base class for lifetime laws on [0, inf).

    Subclasses provide right-continuous ``tail(t) = P(T > t)``, its left limit
    ``tail_left(t) = P(T >= t)``, exact moments and a sampler.
    """

    kind = ""

    def tail(self, t):
        raise NotImplementedError

    def tail_left(self, t):
        raise NotImplementedError

    def tail_mid(self, t):
        """Average of left and right limits; equals the tail away from atoms."""
        return 0.5 * (self.tail(t) + self.tail_left(t))

    def breakpoints(self) -> np.ndarray:
        """Points where the tail jumps or has a kink."""
        return np.empty(0)

    @property
    def support_end(self) -> float:
        return math.inf

    def moments(self) -> tuple[float, float]:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError

    def damped_shift_integral(self, t, c):
        """int_0^inf exp(-c s) P(T > t + s) ds, vectorized over t >= 0.

        ``c`` may be complex with nonnegative real part, which gives Fourier
        transforms of the damped tail."""
        raise NotImplementedError

    def horizon(self, c: float = 0.0, cutoff: float = TAIL_CUTOFF) -> float:
        """A time after which exp(-c t) P(T > t) < cutoff."""
        if math.isfinite(self.support_end):
            return self.support_end
        t = max(self.moments()[0], 1.0)
        while math.exp(-c * t) * float(self.tail(t)) >= cutoff:
            t *= 2.0
        return t

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Exponential(LifeLengthLaw):
    rate: float
    kind = "exp"

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("exponential rate must be positive")

    def tail(self, t):
        return np.exp(-self.rate * _check_time(t))

    tail_left = tail

    def moments(self):
        return 1.0 / self.rate, 1.0 / self.rate**2

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)

    def damped_shift_integral(self, t, c):
        return self.tail(t) / (self.rate + c)

    def horizon(self, c=0.0, cutoff=TAIL_CUTOFF):
        return -math.log(cutoff) / (self.rate + c)

    def to_dict(self):
        return {"kind": "exp", "rate": self.rate}


@dataclass(frozen=True)
class PointMass(LifeLengthLaw):
    c: float
    kind = "point"

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("point-mass lifetime must be positive")

    def tail(self, t):
        return (_check_time(t) < self.c).astype(float)

    def tail_left(self, t):
        return (_check_time(t) <= self.c).astype(float)

    def breakpoints(self):
        return np.array([self.c])

    @property
    def support_end(self):
        return self.c

    def moments(self):
        return self.c, 0.5 * self.c**2

    def sample(self, rng, size=None):
        if size is None:
            return self.c
        return np.full(size, self.c)

    def damped_shift_integral(self, t, c):
        d = np.maximum(self.c - _check_time(t), 0.0)
        return d * _e1(c * d)

    def to_dict(self):
        return {"kind": "point", "c": self.c}


class _PiecewiseLinearTail(LifeLengthLaw):
    """Shared machinery for laws whose tail is piecewise linear between knots."""

    def _knots(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def tail(self, t):
        x, y = self._knots()
        t = _check_time(t)
        return np.interp(t, x, y, left=1.0, right=0.0)

    tail_left = tail

    def breakpoints(self):
        return self._knots()[0].copy()

    @property
    def support_end(self):
        return float(self._knots()[0][-1])

    def damped_shift_integral(self, t, c):
        x, y = self._knots()
        t = _check_time(t)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        dx = np.diff(x)
        slope = np.diff(y) / dx
        # cell k integral of exp(-c (s - x_k)) * tail(s) over [x_k, x_{k+1}]
        cell = y[:-1] * dx * _e1(c * dx) + slope * dx * dx * _e2(c * dx)
        decay = np.exp(-c * dx)
        # suffix[k] = int_{x_k}^inf exp(-c (s - x_k)) tail(s) ds
        suffix = np.zeros(x.size, dtype=cell.dtype)
        for k in range(x.size - 2, -1, -1):
            suffix[k] = cell[k] + decay[k] * suffix[k + 1]
        out = np.zeros(t.size, dtype=cell.dtype)
        below = t < x[0]
        # before the first knot the tail is 1
        d0 = x[0] - t[below]
        out[below] = d0 * _e1(c * d0) + np.exp(-c * d0) * suffix[0]
        inside = (~below) & (t < x[-1])
        ti = t[inside]
        k = np.clip(np.searchsorted(x, ti, side="right") - 1, 0, x.size - 2)
        d = x[k + 1] - ti
        y0 = y[k] + slope[k] * (ti - x[k])
        part = y0 * d * _e1(c * d) + slope[k] * d * d * _e2(c * d)
        out[inside] = part + np.exp(-c * d) * suffix[k + 1]
        return out[0] if scalar else out


@dataclass(frozen=True)
class Uniform(_PiecewiseLinearTail):
    lo: float
    hi: float
    kind = "uniform"

    def __post_init__(self):
        if not (0 <= self.lo < self.hi):
            raise ValueError("uniform lifetime needs 0 <= lo < hi")

    def _knots(self):
        return np.array([self.lo, self.hi]), np.array([1.0, 0.0])

    def moments(self):
        eta = 0.5 * (self.lo + self.hi)
        second = (self.lo**2 + self.lo * self.hi + self.hi**2) / 3.0
        return eta, 0.5 * second

    def sample(self, rng, size=None):
        return rng.uniform(self.lo, self.hi, size)

    def to_dict(self):
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True, eq=False)
class EmpiricalGrid(_PiecewiseLinearTail):
    """Lifetime law given by cdf values on the grid 0, h, 2h, ...; the cdf is
    interpolated linearly, i.e. the density is piecewise constant."""

    cdf: tuple
    h: float
    kind = "empirical"

    def __post_init__(self):
        cdf = np.asarray(self.cdf, dtype=float)
        if cdf.ndim != 1 or cdf.size < 2:
            raise ValueError("empirical cdf needs at least two grid values")
        if not self.h > 0:
            raise ValueError("grid step must be positive")
        if cdf[0] != 0.0:
            raise ValueError("empirical cdf must start at 0")
        if np.any(np.diff(cdf) < 0):
            raise ValueError("empirical cdf must be nondecreasing")
        if abs(cdf[-1] - 1.0) > 1e-12:
            raise ValueError(
                "empirical cdf must end at 1; a law with mass beyond the grid "
                "has no finite moments under this representation")
        cdf = cdf.copy()
        cdf[-1] = 1.0
        object.__setattr__(self, "cdf", tuple(cdf.tolist()))
        object.__setattr__(self, "_x", self.h * np.arange(cdf.size))
        object.__setattr__(self, "_y", 1.0 - cdf)

    def _knots(self):
        return self._x, self._y

    def moments(self):
        x = self._x[:-1]
        mass = np.diff(np.asarray(self.cdf))
        h = self.h
        eta = float(np.sum(mass * (x + 0.5 * h)))
        second = float(np.sum(mass * (x * x + x * h + h * h / 3.0)))
        return eta, 0.5 * second

    def sample(self, rng, size=None):
        u = 1.0 - rng.random(size)
        cdf = np.asarray(self.cdf)
        k = np.clip(np.searchsorted(cdf, u, side="left") - 1, 0, cdf.size - 2)
        frac = (u - cdf[k]) / (cdf[k + 1] - cdf[k])
        return self.h * (k + frac)

    def to_dict(self):
        return {"kind": "empirical", "h": self.h, "cdf": list(self.cdf)}


def law_from_dict(d: dict) -> LifeLengthLaw:
    kind = d.get("kind")
    if kind == "exp":
        return Exponential(float(d["rate"]))
    if kind == "uniform":
        return Uniform(float(d["lo"]), float(d["hi"]))
    if kind == "point":
        return PointMass(float(d["c"]))
    if kind == "empirical":
        return EmpiricalGrid(tuple(float(v) for v in d["cdf"]), float(d["h"]))
    raise ValueError(f"unknown lifetime kind {kind!r}")


def tail(law: LifeLengthLaw, t):
    """P(T > t)."""
    return law.tail(t)


def moments(law: LifeLengthLaw) -> tuple[float, float]:
    """(eta, sigma_half) = (E[T], E[T^2] / 2)."""
    return law.moments()


def tail_quadrature(law: LifeLengthLaw, c: float = 0.0, power: int = 0,
                    h: float = 1e-3) -> float:
    """Composite trapezoid for int_0^inf t**power exp(-c t) P(T > t) dt.

    The grid is the uniform h-grid merged with the law's breakpoints, and
    left limits are used at the right end of every cell, so jump points do
    not cost accuracy.  With power=0 this is eta_beta, with power=1 it is
    sigma_half when c=0.
    """
    end = law.horizon(c)
    x = np.union1d(np.arange(0.0, end, h), law.breakpoints())
    x = np.union1d(x[x <= end], [end])
    w = x**power * np.exp(-c * x)
    right = w * law.tail(x)
    left = w * law.tail_left(x)
    return float(np.sum(0.5 * (right[:-1] + left[1:]) * np.diff(x)))


def eta_beta(law: LifeLengthLaw, beta: float, gamma_n: float) -> float:
    """int_0^inf exp(-(beta/gamma_n) t) P(T > t) dt, integrated exactly."""
    if beta < 0 or gamma_n <= 0:
        raise ValueError("need beta >= 0 and gamma_n > 0")
    return float(law.damped_shift_integral(0.0, beta / gamma_n))


def size_biased_tail(law: LifeLengthLaw, beta: float, gamma_n: float, t):
    """Tail of the damped size-biased ancestor law.

    Its density is P_beta(T > t) / eta_beta with P_beta(T > t) =
    exp(-(beta/gamma_n) t) P(T > t) the damped tail; integrating gives
    tail(t) = exp(c t) int_t^inf exp(-c s) P(T > s) ds / eta_beta.
    """
    c = beta / gamma_n
    norm = float(law.damped_shift_integral(0.0, c))
    if norm <= 0:
        raise ValueError("eta_beta vanishes; size-biased law undefined")
    return law.damped_shift_integral(_check_time(t), c) / norm


class SizeBiasedLaw:
    """Sampler for the damped size-biased ancestor lifetime.

    Exponential lifetimes are memoryless, so the law is the lifetime law
    itself.  Otherwise the cdf is tabulated on a fine grid (plus breakpoints)
    and inverted by linear interpolation.
    """

    def __init__(self, law: LifeLengthLaw, beta: float = 0.0,
                 gamma_n: float = 1.0, nodes: int = 20001):
        self.law = law
        self.c = beta / gamma_n
        if isinstance(law, Exponential):
            self._x = None
            return
        end = law.horizon(self.c)
        x = np.union1d(np.linspace(0.0, end, nodes), law.breakpoints())
        x = x[x <= end]
        cdf = 1.0 - size_biased_tail(law, beta, gamma_n, x)
        cdf[0] = 0.0
        cdf[-1] = 1.0
        self._x = x
        self._cdf = np.maximum.accumulate(cdf)

    def tail(self, t):
        if self._x is None:
            return self.law.tail(t)
        return 1.0 - np.interp(t, self._x, self._cdf)

    def sample(self, rng: np.random.Generator, size=None):
        if self._x is None:
            return self.law.sample(rng, size)
        u = rng.random(size)
        return np.interp(u, self._cdf, self._x)


def sample_size_biased(law, beta, gamma_n, rng, size=None):
    return SizeBiasedLaw(law, beta, gamma_n).sample(rng, size)


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    """Finite law on {1, 2, ...}; used for offspring and immigration batch sizes."""

    pmf: dict

    def __post_init__(self):
        items = sorted((int(k), float(p)) for k, p in self.pmf.items())
        if not items:
            raise ValueError("empty pmf")
        for k, p in items:
            if k < 1:
                raise ValueError(f"support must be >= 1, got k={k}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of range at k={k}: {p}")
        total = math.fsum(p for _, p in items)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"pmf sums to {total!r}, not 1")
        items = [(k, p) for k, p in items if p > 0]
        object.__setattr__(self, "pmf", dict(items))
        object.__setattr__(self, "_k", np.array([k for k, _ in items], dtype=np.int64))
        object.__setattr__(self, "_p", np.array([p for _, p in items]))

    @property
    def support(self) -> np.ndarray:
        return self._k

    @property
    def probs(self) -> np.ndarray:
        return self._p

    @property
    def mean(self) -> float:
        return float(np.dot(self._k, self._p))

    def pgf(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(self._p * x[..., None] ** self._k, axis=-1)

    def sample(self, rng: np.random.Generator, size=None):
        if self._k.size == 1:
            if size is None:
                return int(self._k[0])
            return np.full(size, self._k[0], dtype=np.int64)
        cum = np.cumsum(self._p)
        cum[-1] = 1.0
        idx = np.searchsorted(cum, rng.random(size), side="right")
        return self._k[idx]

    def to_dict(self) -> dict:
        return {str(k): p for k, p in self.pmf.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteLaw":
        return cls({int(k): float(p) for k, p in d.items()})


@dataclass(frozen=True)
class ModelParams:
    """One member of the n-indexed family of CMJ models."""

    n: int
    gamma_n: float
    lambda_n: float
    zeta_n: float
    lifetime: LifeLengthLaw
    offspring: DiscreteLaw
    immigration: DiscreteLaw = field(default_factory=lambda: DiscreteLaw({1: 1.0}))
    beta: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.gamma_n > 0:
            raise ValueError("gamma_n must be positive")
        if self.lambda_n < 0:
            raise ValueError("lambda_n must be nonnegative")
        if self.zeta_n < 0:
            raise ValueError("zeta_n must be nonnegative")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")

    @property
    def lambda_m(self) -> float:
        return self.lambda_n * self.offspring.mean

    @property
    def criticality(self) -> float:
        """lambda * eta * m; below 1 is subcritical."""
        return self.lambda_m * self.lifetime.moments()[0]

    @property
    def classification(self) -> str:
        gap = 1.0 - self.criticality
        if abs(gap) < 1e-14:
            return "critical"
        return "subcritical" if gap > 0 else "supercritical"

    def to_dict(self) -> dict:
        return {
            "n": self.n, "gamma_n": self.gamma_n, "lambda_n": self.lambda_n,
            "zeta_n": self.zeta_n, "beta": self.beta,
            "lifetime": self.lifetime.to_dict(),
            "offspring": self.offspring.to_dict(),
            "immigration": self.immigration.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(
            n=int(d["n"]), gamma_n=float(d["gamma_n"]),
            lambda_n=float(d["lambda_n"]), zeta_n=float(d.get("zeta_n", 0.0)),
            lifetime=law_from_dict(d["lifetime"]),
            offspring=DiscreteLaw.from_dict(d["offspring"]),
            immigration=DiscreteLaw.from_dict(d.get("immigration", {"1": 1.0})),
            beta=float(d.get("beta", 0.0)),
        )


def _atoms(atoms) -> tuple:
    out = []
    for u, w in atoms:
        u, w = float(u), float(w)
        if not (u > 0 and w > 0):
            raise ValueError("Levy atoms need jump size u > 0 and mass w > 0")
        out.append((u, w))
    return tuple(out)


@dataclass(frozen=True)
class LevyTriple:
    """Coefficients of the limit branching and immigration mechanisms."""

    m: float = 0.0
    c: float = 0.0
    a: float = 0.0
    nu0_atoms: tuple = ()
    nu1_atoms: tuple = ()

    def __post_init__(self):
        if self.c < 0 or self.a < 0:
            raise ValueError("need c >= 0 and a >= 0")
        if self.m > 0:
            raise ValueError("branching drift m must be <= 0")
        object.__setattr__(self, "nu0_atoms", _atoms(self.nu0_atoms))
        object.__setattr__(self, "nu1_atoms", _atoms(self.nu1_atoms))
        if not math.isfinite(sum(w * min(u, u * u) for u, w in self.nu0_atoms)):
            raise ValueError("nu0 must integrate u ^ u^2")
        if not math.isfinite(sum(w * min(1.0, u) for u, w in self.nu1_atoms)):
            raise ValueError("nu1 must integrate 1 ^ u")


def _scaled_arg(z, n):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0) or np.any(z > n):
        raise ValueError(f"z must lie in [0, n] = [0, {n}]")
    with np.errstate(divide="ignore"):
        return np.log1p(-z / n)


def phi_n(z, params: ModelParams):
    """n gamma_n [g(1 - z/n) - (1 - z/n)] for the offspring pgf g."""
    n = params.n
    lx = _scaled_arg(z, n)
    law = params.offspring
    out = np.zeros_like(lx)
    x = np.exp(lx)
    for k, p in zip(law.support, law.probs):
        if k == 1:
            continue
        # x**k - x without cancelling the leading terms
        out = out + p * x * np.expm1((k - 1) * lx)
    return n * params.gamma_n * out


def psi_n(z, params: ModelParams):
    """gamma_n [1 - h(1 - z/n)] for the immigration pgf h."""
    lx = _scaled_arg(z, params.n)
    law = params.immigration
    out = np.zeros_like(lx)
    for k, p in zip(law.support, law.probs):
        out = out - p * np.expm1(k * lx)
    return params.gamma_n * out


def _nu0_part(z, atoms):
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    for u, w in atoms:
        zu = z * u
        out = out + w * (np.expm1(-zu) + zu)
    return out


def phi_limit(z, triple: LevyTriple):
    z = np.asarray(z, dtype=float)
    return triple.m * z + triple.c * z * z + _nu0_part(z, triple.nu0_atoms)


def phi_lambda(z, triple: LevyTriple, lam: float):
    if not lam > 0:
        raise ValueError("lambda must be positive")
    z = np.asarray(z, dtype=float)
    return triple.m / lam * z + triple.c * z * z + _nu0_part(z, triple.nu0_atoms)


def psi_limit(z, triple: LevyTriple):
    z = np.asarray(z, dtype=float)
    out = triple.a * z
    for u, w in triple.nu1_atoms:
        out = out - w * np.expm1(-z * u)
    return out


def varphi(z, limit):
    """(eta/sigma) b z + gamma_star / (sigma eta) z^2; ``limit`` needs
    attributes b, eta, sigma and gamma_star."""
    z = np.asarray(z, dtype=float)
    return (limit.eta / limit.sigma * limit.b * z
            + limit.gamma_star / (limit.sigma * limit.eta) * z * z)


def atoms_from_config(atoms: Sequence) -> tuple:
    return tuple((float(a[0]), float(a[1])) for a in atoms)
