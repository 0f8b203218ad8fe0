"""Renewal resolvents of the CMJ model and the identities they satisfy.

The resolvent solves R = f + f * R with forcing and kernel both equal to
f(t) = lambda m exp(-c t) P(T > t), c = beta / gamma_n.  The solver uses
product integration against a piecewise-linear interpolant of R, keeping
separate left and right values at nodes so that lifetime atoms on grid nodes
do not cost accuracy.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .distributions import LifeLengthLaw, ModelParams, eta_beta
from .grid import GridFunction


class StepSizeError(ValueError):
    pass


class DivergentIntegralError(ArithmeticError):
    pass


class SingularityError(ArithmeticError):
    pass


class ResolventWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class ResolventKernel:
    """R_beta on [0, T] plus the parameters it was built from.

    ``base`` holds right-continuous values and ``left`` the left limits; they
    differ only where the lifetime tail jumps."""

    base: GridFunction
    left: np.ndarray
    lambda_n: float
    m: float
    beta: float
    gamma_n: float
    law: LifeLengthLaw | None = None

    @property
    def h(self) -> float:
        return self.base.h

    @property
    def T(self) -> float:
        return self.base.T

    @property
    def lambda_m(self) -> float:
        return self.lambda_n * self.m

    @property
    def c(self) -> float:
        return self.beta / self.gamma_n

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.base.values + self.left)

    def cumulative(self) -> np.ndarray:
        """int_0^{t_k} R for every grid node."""
        right, left = self.base.values, self.left
        out = np.zeros(right.size)
        out[1:] = np.cumsum(0.5 * self.h * (right[:-1] + left[1:]))
        return out

    def to_csv(self, path=None) -> str:
        return self.base.to_csv(path)

    @classmethod
    def from_grid(cls, grid: GridFunction, lambda_n=1.0, m=1.0, beta=0.0,
                  gamma_n=1.0, law=None) -> "ResolventKernel":
        return cls(grid, np.array(grid.values), float(lambda_n), float(m),
                   float(beta), float(gamma_n), law)

    @classmethod
    def from_csv(cls, path, **kwargs) -> "ResolventKernel":
        return cls.from_grid(GridFunction.from_csv(path), **kwargs)


def _nodes(T: float, h: float) -> int:
    if not (h > 0 and T > 0):
        raise ValueError("need T > 0 and h > 0")
    n = int(round(T / h))
    if abs(n * h - T) > 1e-9 * T or n < 1:
        raise ValueError(f"T={T} is not a multiple of h={h}")
    return n + 1


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def _cell_moments(f, a, b):
    """int_a^b f(u) (u - a)/(b - a) du and int_a^b f(u) (b - u)/(b - a) du, vectorized."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = b - a
    u = a[:, None] + d[:, None] * _GL_X
    fu = f(u) * _GL_W
    up = d * (fu * _GL_X).sum(axis=1)
    down = d * (fu * (1.0 - _GL_X)).sum(axis=1)
    return up, down


def _kernel_weights(law, lambda_m, c, h, N):
    """Product-integration weights of f over the cells [t_q, t_{q+1}].

    alpha_q weights the value at the end of the cell nearest u = t_{q+1},
    beta_q the value nearest u = t_q, when R is interpolated linearly."""
    def f(u):
        return lambda_m * np.exp(-c * u) * law.tail(u)

    q = np.arange(N - 1)
    alpha, beta = _cell_moments(f, h * q, h * (q + 1))
    for p in np.asarray(law.breakpoints(), dtype=float):
        k = int(math.floor(p / h))
        if k >= N - 1 or abs(p - k * h) <= 1e-12 * max(1.0, p) or abs(p - (k + 1) * h) <= 1e-12 * max(1.0, p):
            continue
        a0, b0 = k * h, (k + 1) * h
        # split the cell at the breakpoint; the weights stay linear in u
        up1, dn1 = _cell_moments(f, np.array([a0]), np.array([p]))
        up2, dn2 = _cell_moments(f, np.array([p]), np.array([b0]))
        r1, r2 = (p - a0) / h, (b0 - p) / h
        # on [a0, p]: (u - a0)/h = r1 * (u - a0)/(p - a0)
        alpha[k] = r1 * up1[0] + (up2[0] * r2 + r1 * (up2[0] + dn2[0]))
        beta[k] = (dn1[0] * r1 + r2 * (up1[0] + dn1[0])) + r2 * dn2[0]
    return alpha, beta


def solve_resolvent(law: LifeLengthLaw, lambda_m: float, beta: float = 0.0,
                    gamma_n: float = 1.0, T: float = 10.0, h: float = 1e-3,
                    lambda_n: float | None = None) -> ResolventKernel:
    """Solve R = f + f * R on [0, T] for f = lambda_m exp(-(beta/gamma_n) t) P(T > t).

    Product integration: R is interpolated linearly between nodes (using left
    limits at the right end of each cell) and every cell integral of f against
    the interpolant is computed with 8-point Gauss-Legendre, cells being split
    at the lifetime's breakpoints.  The kernel mass is therefore reproduced
    almost exactly, which matters close to criticality where the decay rate
    of R is the small number 1 - lambda m eta_beta.

    ``lambda_n`` is only recorded (with m = lambda_m / lambda_n) for the marked
    resolvent; it defaults to lambda_m with m = 1.
    """
    if lambda_m < 0:
        raise ValueError("lambda_m must be nonnegative")
    N = _nodes(T, h)
    c = beta / gamma_n
    t = h * np.arange(N)
    damp = np.exp(-c * t)
    f_right = lambda_m * damp * law.tail(t)
    f_left = lambda_m * damp * law.tail_left(t)
    alpha, beta_w = _kernel_weights(law, lambda_m, c, h, N)
    denom = 1.0 - beta_w[0]
    if denom <= 0 or 0.5 * h * f_right[0] >= 1.0:
        raise StepSizeError(
            f"step h={h} too large for f(0)={f_right[0]:.3g}; use h < {2 / f_right[0]:.3g}")
    if lambda_m * eta_beta(law, beta, gamma_n) >= 1.0:
        warnings.warn("lambda m eta_beta >= 1: resolvent does not decay", ResolventWarning,
                      stacklevel=2)

    conv = np.zeros(N)
    right = np.empty(N)
    left = np.empty(N)
    right[0] = f_right[0]
    left[0] = f_left[0]
    a_rev = alpha[::-1].copy()   # a_rev[N-2-q] = alpha[q]
    b_rev = beta_w[::-1].copy()
    for i in range(1, N):
        # cells j = 0..i-1; right end value R_left[j+1] gets beta[i-1-j],
        # left end value R_right[j] gets alpha[i-1-j]
        s = np.dot(a_rev[N - 1 - i:N - 1], right[:i])
        if i > 1:
            s += np.dot(b_rev[N - 1 - i:N - 2], left[1:i])
        conv[i] = (s + beta_w[0] * f_left[i]) / denom
        right[i] = f_right[i] + conv[i]
        left[i] = f_left[i] + conv[i]

    if lambda_n is None:
        lambda_n, m = lambda_m, 1.0
    else:
        m = lambda_m / lambda_n if lambda_n > 0 else 0.0
    return ResolventKernel(GridFunction(h, right), left, float(lambda_n),
                           float(m), float(beta), float(gamma_n), law)


def resolvent_for(params: ModelParams, T: float, h: float, damped: bool = True) -> ResolventKernel:
    """Resolvent of a model in original (unscaled) time."""
    beta = params.beta if damped else 0.0
    return solve_resolvent(params.lifetime, params.lambda_m, beta, params.gamma_n, T, h,
                           lambda_n=params.lambda_n)


def integrate_to(right: np.ndarray, left: np.ndarray, h: float, x):
    """int_0^x of the function that is linear on every cell [t_k, t_{k+1}]
    from right[k] to left[k+1]; vectorized over x."""
    x = np.asarray(x, dtype=float)
    cum = np.zeros(right.size)
    cum[1:] = np.cumsum(0.5 * h * (right[:-1] + left[1:]))
    k = np.clip(np.floor(x / h).astype(np.int64), 0, right.size - 2)
    d = x - k * h
    vx = right[k] + (left[k + 1] - right[k]) * d / h
    return cum[k] + 0.5 * d * (right[k] + vx)


def resolvent_marked(R: ResolventKernel, y: float, t: float) -> float:
    """Mean intensity at time t of births descending from a newborn with lifetime y:
    lambda [exp(-c t) 1{y > t} + int_0^{t ^ y} R_beta(t - s) exp(-c s) ds]."""
    if t < 0 or y < 0:
        raise ValueError("need t >= 0 and y >= 0")
    if t > R.T * (1 + 1e-12):
        raise ValueError(f"t={t} beyond resolvent horizon {R.T}")
    c = R.c
    direct = math.exp(-c * t) if y > t else 0.0
    upper = min(t, y)
    if upper <= 0:
        return R.lambda_n * direct
    # substitute u = t - s: int_{t-upper}^{t} R(u) exp(-c (t - u)) du
    w = np.exp(-c * np.maximum(t - R.base.t, 0.0))
    wr, wl = R.base.values * w, R.left * w
    part = integrate_to(wr, wl, R.h, t) - integrate_to(wr, wl, R.h, t - upper)
    return R.lambda_n * (direct + float(part))


def _tail_fit(R: ResolventKernel) -> tuple[float, float]:
    """(value at T, decay rate) from a log-linear fit to the last tenth of the grid."""
    v = R.base.values
    k0 = max(0, min(int(0.9 * v.size), v.size - 10))
    seg = v[k0:]
    if seg[-1] == 0 and np.all(seg == 0):
        return 0.0, math.inf
    t = R.base.t[k0:]
    pos = seg > 0
    if pos.sum() < 2:
        raise DivergentIntegralError("cannot fit tail decay of the resolvent")
    slope = np.polyfit(t[pos], np.log(seg[pos]), 1)[0]
    return float(v[-1]), float(-slope)


def resolvent_total_integral(R: ResolventKernel) -> float:
    """int_0^inf R_beta: grid trapezoid plus an exponential tail fitted on the last tenth."""
    body = float(R.cumulative()[-1])
    end, rate = _tail_fit(R)
    if end == 0:
        return body
    if rate <= 1e-9 * max(1.0, 1.0 / R.T):
        raise DivergentIntegralError(
            "resolvent does not decay (critical or supercritical without damping); "
            "choose beta > 0")
    if end > 1e-8 * max(1.0, float(np.max(R.base.values))):
        warnings.warn(f"resolvent still {end:.3g} at the horizon; tail extrapolated",
                      ResolventWarning, stacklevel=2)
    return body + end / rate


def total_integral_exact(law: LifeLengthLaw, lambda_m: float, beta: float,
                         gamma_n: float) -> float:
    """lambda m eta_beta / (1 - lambda m eta_beta)."""
    x = lambda_m * eta_beta(law, beta, gamma_n)
    if x >= 1:
        raise DivergentIntegralError("lambda m eta_beta >= 1; choose beta > 0")
    return x / (1.0 - x)


def check_total_integral_identity(R: ResolventKernel, law: LifeLengthLaw, beta: float,
                                  gamma_n: float, lambda_m: float) -> float:
    return abs(resolvent_total_integral(R) - total_integral_exact(law, lambda_m, beta, gamma_n))


def fourier_resolvent(law: LifeLengthLaw, lambda_m: float, beta: float, gamma_n: float,
                      u: float) -> complex:
    """int_0^inf exp(i u t) R_beta(gamma_n t) dt.

    The transform of the damped tail is integrated exactly; the resolvent
    equation then gives lambda m A / (gamma_n (1 - lambda m A))."""
    A = complex(law.damped_shift_integral(0.0, beta / gamma_n - 1j * u / gamma_n))
    den = 1.0 - lambda_m * A
    if abs(den) < 1e-10:
        raise SingularityError(f"resolvent transform singular at u={u}")
    return lambda_m * A / (gamma_n * den)


def fourier_limit(limit, u: float) -> complex:
    """Transform of the exponential limit kernel:
    1 / (b + m + beta sigma lambda - i u sigma lambda)."""
    sl = limit.sigma * limit.lambda_
    return 1.0 / (limit.b + limit.m + limit.beta * sl - 1j * u * sl)


def limit_kernel_rate(limit) -> float:
    return (limit.b + limit.m) / (limit.sigma * limit.lambda_) + limit.beta


def exponential_limit_kernel(limit, gamma_n: float, T: float, h: float,
                             lambda_n: float = 1.0, m: float = 1.0) -> ResolventKernel:
    """The limit kernel expressed in original time, R(t) = g(t / gamma_n), where
    g(s) = exp(-kappa s) / (sigma lambda) is the rescaled limit."""
    N = _nodes(T, h)
    s = h * np.arange(N) / gamma_n
    v = np.exp(-limit_kernel_rate(limit) * s) / (limit.sigma * limit.lambda_)
    return ResolventKernel.from_grid(GridFunction(h, v), lambda_n, m, limit.beta, gamma_n)


def l2_distance_to_limit(R: ResolventKernel, limit) -> float:
    """L2 distance on [0, T / gamma_n] between R_beta(gamma_n s) and the limit kernel."""
    s = R.base.t / R.gamma_n
    target = np.exp(-limit_kernel_rate(limit) * s) / (limit.sigma * limit.lambda_)
    d2 = (R.mid - target) ** 2
    ds = R.h / R.gamma_n
    return float(math.sqrt(ds * (d2.sum() - 0.5 * (d2[0] + d2[-1]))))


def local_integral_identity(R: ResolventKernel, law: LifeLengthLaw | None = None,
                            beta: float | None = None, T: float = 1.0) -> tuple[float, float]:
    """Residuals of the two partial-integral identities of the resolvent at time T:

        int_0^T R = lm G(T) + lm int_0^T R(T - t) G(t) dt,
        (1 - lm eta_b) / lm * int_T^inf R = H(T) + int_0^T R(T - t) H(t) dt,

    with lm = lambda m, G(t) = int_0^t P_beta(T > s) ds and H = eta_b - G.
    """
    law = R.law if law is None else law
    beta = R.beta if beta is None else beta
    lm = R.lambda_m
    if lm == 0:
        return 0.0, 0.0
    h = R.h
    k = R.base.index(T)
    t = R.base.t[:k + 1]
    c = beta / R.gamma_n
    tail = np.exp(-c * t) * law.tail_mid(t)
    G = np.zeros(k + 1)
    G[1:] = np.cumsum(0.5 * h * (tail[1:] + tail[:-1]))
    eb = eta_beta(law, beta, R.gamma_n)
    H = eb - G

    def conv(F):
        prod = R.mid[k::-1] * F
        return h * (prod.sum() - 0.5 * (prod[0] + prod[-1]))

    Q = R.cumulative()
    lhs1 = Q[k]
    rhs1 = lm * G[k] + lm * conv(G)
    tail_int = resolvent_total_integral(R) - Q[k]
    lhs2 = (1.0 - lm * eb) / lm * tail_int
    rhs2 = H[k] + conv(H)
    return abs(lhs1 - rhs1), abs(lhs2 - rhs2)
