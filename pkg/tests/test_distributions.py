import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from cmjvolterra.distributions import (
    DiscreteLaw, EmpiricalGrid, Exponential, LevyTriple, ModelParams, PointMass, SizeBiasedLaw,
    Uniform, eta_beta, law_from_dict, moments, phi_lambda, phi_limit, phi_n, psi_limit, psi_n,
    sample_size_biased, size_biased_tail, tail, tail_quadrature, varphi)
from cmjvolterra.rng import stream

LAWS = [Exponential(1.0), Exponential(2.5), PointMass(1.0), PointMass(2.0), Uniform(0.0, 2.0),
        Uniform(0.5, 1.5), EmpiricalGrid((0.0, 0.1, 0.5, 0.5, 0.9, 1.0), 0.4)]


def _model(offspring, immigration=None, n=2, gamma_n=2.0):
    return ModelParams(n, gamma_n, 1.0, 0.0, Exponential(1.0), DiscreteLaw(offspring),
                       DiscreteLaw(immigration or {1: 1.0}))


def test_tail_examples():
    assert tail(Exponential(1.0), 0.0) == 1.0
    assert tail(PointMass(2.0), 1.0) == 1.0
    assert tail(PointMass(2.0), 3.0) == 0.0
    assert tail(Uniform(0.0, 2.0), 1.0) == pytest.approx(0.5, abs=1e-15)


def test_tail_rejects_negative_time():
    for law in LAWS:
        with pytest.raises(ValueError):
            law.tail(-0.1)


@pytest.mark.parametrize("law", LAWS, ids=repr)
def test_tail_shape(law):
    t = np.linspace(0.0, 20.0, 2001)
    v = law.tail(t)
    assert v[0] == 1.0
    assert np.all(np.diff(v) <= 1e-15)
    assert v[-1] < 1e-8
    assert np.all(law.tail_left(t) >= v)


def test_moment_examples():
    assert moments(Exponential(1.0)) == pytest.approx((1.0, 1.0))
    assert moments(PointMass(1.0)) == pytest.approx((1.0, 0.5))
    assert moments(Uniform(0.0, 2.0)) == pytest.approx((1.0, 2.0 / 3.0))


@pytest.mark.parametrize("mu", [0.5, 1.0, 2.0])
def test_sigma_half_exponential_by_quadrature(mu):
    # int t P(T > t) dt = E[T^2] / 2
    q = tail_quadrature(Exponential(mu), power=1, h=1e-3)
    assert abs(q - 1.0 / mu ** 2) / (1.0 / mu ** 2) < 1e-6
    assert moments(Exponential(mu))[1] == pytest.approx(1.0 / mu ** 2, rel=1e-15)


@pytest.mark.parametrize("law", LAWS, ids=repr)
def test_moments_match_sampling(law):
    x = law.sample(stream(11, 0), 200_000)
    eta, sig = law.moments()
    assert abs(x.mean() - eta) <= 5 * x.std() / math.sqrt(x.size) + 1e-12
    y = 0.5 * x ** 2
    assert abs(y.mean() - sig) <= 5 * y.std() / math.sqrt(x.size) + 1e-12


def test_empirical_grid_validation():
    with pytest.raises(ValueError):
        EmpiricalGrid((0.1, 1.0), 1.0)
    with pytest.raises(ValueError):
        EmpiricalGrid((0.0, 0.6, 0.5, 1.0), 1.0)
    with pytest.raises(ValueError):
        EmpiricalGrid((0.0, 0.5, 0.9), 1.0)


def test_empirical_grid_interpolates_linearly():
    law = EmpiricalGrid((0.0, 0.5, 1.0), 1.0)
    assert law.tail(0.5) == pytest.approx(0.75)
    assert law.tail(1.5) == pytest.approx(0.25)
    # density 1/2 on [0, 2] is Uniform(0, 2)
    assert law.moments() == pytest.approx(Uniform(0.0, 2.0).moments())


@pytest.mark.parametrize("law", LAWS, ids=repr)
def test_law_dict_round_trip(law):
    back = law_from_dict(law.to_dict())
    t = np.linspace(0, 5, 101)
    assert np.array_equal(back.tail(t), law.tail(t))


def test_phi_n_examples():
    assert phi_n(1.0, _model({1: 1.0}, n=5, gamma_n=5.0)) == 0.0
    assert phi_n(1.0, _model({2: 1.0})) == pytest.approx(-1.0, abs=1e-14)
    assert phi_n(0.0, _model({1: 0.3, 4: 0.7})) == 0.0


def test_psi_n_examples():
    assert psi_n(0.0, _model({1: 1.0}, {2: 1.0})) == 0.0
    m = _model({1: 1.0}, {1: 1.0}, n=10, gamma_n=10.0)
    assert psi_n(3.0, m) == pytest.approx(3.0, rel=1e-14)
    assert psi_n(1.0, _model({1: 1.0}, {2: 1.0})) == pytest.approx(1.5, rel=1e-14)


def test_scaled_mechanisms_reject_out_of_range():
    m = _model({2: 1.0})
    for z in (-0.1, 2.1):
        with pytest.raises(ValueError):
            phi_n(z, m)
        with pytest.raises(ValueError):
            psi_n(z, m)


pmfs = st.dictionaries(st.integers(1, 8), st.floats(0.01, 1.0), min_size=1, max_size=4).map(
    lambda d: {k: v / math.fsum(d.values()) for k, v in d.items()})


@settings(max_examples=60, deadline=None)
@given(pmfs, pmfs, st.integers(1, 500))
def test_generating_functions_at_one(p, q, n):
    p = DiscreteLaw({**p, min(p): p[min(p)] + 1.0 - math.fsum(p.values())})
    q = DiscreteLaw({**q, min(q): q[min(q)] + 1.0 - math.fsum(q.values())})
    assert p.pgf(1.0) == pytest.approx(1.0, abs=1e-12)
    params = ModelParams(n, float(n), 1.0, 0.0, Exponential(1.0), p, q)
    assert phi_n(0.0, params) == 0.0
    assert psi_n(0.0, params) == 0.0


@settings(max_examples=60, deadline=None)
@given(pmfs, st.floats(0.0, 1.0))
def test_phi_n_matches_direct_formula(p, frac):
    p = DiscreteLaw({**p, min(p): p[min(p)] + 1.0 - math.fsum(p.values())})
    n = 7
    params = ModelParams(n, 3.0, 1.0, 0.0, Exponential(1.0), p, p)
    z = frac * n
    x = 1.0 - z / n
    direct = n * 3.0 * (float(p.pgf(x)) - x)
    assert phi_n(z, params) == pytest.approx(direct, rel=1e-9, abs=1e-9)
    assert psi_n(z, params) == pytest.approx(3.0 * (1.0 - float(p.pgf(x))), rel=1e-9, abs=1e-12)


def test_limit_mechanism_examples():
    assert phi_limit(0.0, LevyTriple()) == 0.0
    assert phi_limit(2.0, LevyTriple(c=1.0)) == 4.0
    assert phi_limit(1.0, LevyTriple(nu0_atoms=((1.0, 1.0),))) == pytest.approx(math.exp(-1), rel=1e-15)
    tri = LevyTriple(m=-0.3, c=0.2, a=0.7, nu0_atoms=((0.5, 2.0),), nu1_atoms=((1.0, 1.0),))
    assert psi_limit(0.0, tri) == 0.0
    assert phi_lambda(0.0, tri, 2.0) == 0.0
    assert psi_limit(3.0, LevyTriple(a=1.0)) == 3.0


def test_varphi_example():
    class L:
        b, eta, sigma, gamma_star = 2.0, 1.0, 1.0, 1.0
    assert varphi(0.0, L) == 0.0
    assert varphi(1.0, L) == 3.0


def test_phi_lambda_rejects_nonpositive_lambda():
    for lam in (0.0, -1.0):
        with pytest.raises(ValueError):
            phi_lambda(1.0, LevyTriple(), lam)


def test_phi_lambda_reduces_to_phi_at_unit_lambda():
    tri = LevyTriple(m=-0.4, c=0.3, nu0_atoms=((0.5, 0.8), (2.0, 0.1)))
    z = np.linspace(0, 5, 21)
    assert np.allclose(phi_lambda(z, tri, 1.0), phi_limit(z, tri), rtol=1e-15)


def test_levy_triple_validation():
    with pytest.raises(ValueError):
        LevyTriple(m=0.1)
    with pytest.raises(ValueError):
        LevyTriple(c=-1.0)
    with pytest.raises(ValueError):
        LevyTriple(nu0_atoms=((0.0, 1.0),))


def test_binary_family_mechanism_is_exactly_zero():
    for n in (10, 100, 1000):
        params = ModelParams(n, float(n), 1.0, 0.0, Exponential(1.0), DiscreteLaw({1: 1.0}))
        assert np.all(phi_n(np.linspace(0, n, 11), params) == 0.0)


def test_eta_beta_examples():
    for law in LAWS:
        assert eta_beta(law, 0.0, 1.0) == pytest.approx(law.moments()[0], rel=1e-12)
    assert eta_beta(Exponential(1.0), 3.0, 3.0) == pytest.approx(0.5, rel=1e-15)
    assert eta_beta(PointMass(1.0), 0.0, 5.0) == pytest.approx(1.0, rel=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(LAWS), st.floats(0.0, 5.0))
def test_eta_beta_against_trapezoid_oracle(law, c):
    exact = eta_beta(law, c, 1.0)
    approx = tail_quadrature(law, c=c, h=2e-4)
    assert exact == pytest.approx(approx, rel=2e-6, abs=1e-9)


@pytest.mark.parametrize("law", LAWS, ids=repr)
@pytest.mark.parametrize("c", [0.0, 0.7, 0.3 - 2.0j])
def test_damped_shift_integral_against_quad(law, c):
    for t in (0.0, 0.3, 1.0, 1.7):
        def f(s, part):
            v = np.exp(-c * s) * float(law.tail(t + s))
            return v.real if part == 0 else v.imag
        end = law.horizon(0.0) + 1.0
        pts = [b - t for b in law.breakpoints() if 0 < b - t < end]
        re = integrate.quad(f, 0.0, end, args=(0,), points=pts or None, limit=400)[0]
        im = integrate.quad(f, 0.0, end, args=(1,), points=pts or None, limit=400)[0] if c != c.real else 0.0
        got = complex(law.damped_shift_integral(t, c))
        assert abs(got - complex(re, im)) < 1e-8


def test_size_biased_tail_examples():
    t = np.linspace(0, 4, 41)
    for law in LAWS:
        assert float(size_biased_tail(law, 0.3, 2.0, 0.0)) == pytest.approx(1.0, abs=1e-14)
    assert np.allclose(size_biased_tail(Exponential(1.0), 0.0, 1.0, t), np.exp(-t), atol=1e-14)
    c = 2.0
    assert np.allclose(size_biased_tail(PointMass(c), 0.0, 1.0, t), np.maximum(0, (c - t) / c),
                       atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(LAWS), st.floats(0.0, 3.0), st.floats(0.5, 50.0))
def test_size_biased_tail_monotone(law, beta, gamma_n):
    t = np.linspace(0, 6, 301)
    v = size_biased_tail(law, beta, gamma_n, t)
    assert v[0] == pytest.approx(1.0)
    assert np.all(np.diff(v) <= 1e-13)
    assert np.all(v >= -1e-15)


def test_size_biased_tail_against_quadrature():
    law, beta, g = Uniform(0.0, 2.0), 1.5, 1.0
    c = beta / g
    norm = integrate.quad(lambda s: math.exp(-c * s) * float(law.tail(s)), 0, 2)[0]
    for t in (0.2, 0.9, 1.6):
        num = integrate.quad(lambda s: math.exp(-c * (s - t)) * float(law.tail(s)), t, 2)[0]
        assert float(size_biased_tail(law, beta, g, t)) == pytest.approx(num / norm, rel=1e-9)


@pytest.mark.parametrize("law,beta", [(Exponential(1.0), 0.0), (PointMass(1.0), 0.0),
                                      (PointMass(1.0), 2.0), (Uniform(0.0, 2.0), 0.5),
                                      (LAWS[-1], 1.0)], ids=repr)
def test_size_biased_sampler_dkw(law, beta):
    N, alpha = 100_000, 1e-3
    x = np.sort(sample_size_biased(law, beta, 1.0, stream(5, 1), N))
    F = 1.0 - size_biased_tail(law, beta, 1.0, x)
    emp_hi = np.arange(1, N + 1) / N
    emp_lo = np.arange(N) / N
    d = max(np.max(np.abs(emp_hi - F)), np.max(np.abs(emp_lo - F)))
    assert d < math.sqrt(math.log(2 / alpha) / (2 * N))


def test_size_biased_exponential_is_memoryless():
    sb = SizeBiasedLaw(Exponential(2.0), 1.0, 3.0)
    t = np.linspace(0, 3, 7)
    assert np.allclose(sb.tail(t), np.exp(-2.0 * t))


def test_discrete_law_validation():
    with pytest.raises(ValueError):
        DiscreteLaw({0: 1.0})
    with pytest.raises(ValueError):
        DiscreteLaw({1: 0.5, 2: 0.4})
    with pytest.raises(ValueError):
        DiscreteLaw({1: 1.5, 2: -0.5})
    with pytest.raises(ValueError):
        DiscreteLaw({})


def test_discrete_law_sampling_and_mean():
    law = DiscreteLaw({1: 0.2, 3: 0.5, 7: 0.3})
    assert law.mean == pytest.approx(0.2 + 1.5 + 2.1)
    x = law.sample(stream(2, 0), 100_000)
    for k, p in law.pmf.items():
        assert abs(np.mean(x == k) - p) < 5 * math.sqrt(p * (1 - p) / x.size)
    assert DiscreteLaw.from_dict(law.to_dict()).pmf == law.pmf


def test_model_params_classification_and_round_trip():
    base = dict(n=3, gamma_n=3.0, zeta_n=0.2, lifetime=Uniform(0.0, 2.0),
                offspring=DiscreteLaw({1: 0.5, 2: 0.5}), immigration=DiscreteLaw({2: 1.0}))
    assert ModelParams(lambda_n=0.5, **base).classification == "subcritical"
    assert ModelParams(lambda_n=2.0 / 3.0, **base).classification == "critical"
    p = ModelParams(lambda_n=0.9, **base)
    assert p.classification == "supercritical"
    assert p.criticality == pytest.approx(0.9 * 1.0 * 1.5)
    q = ModelParams.from_dict(p.to_dict())
    assert q.to_dict() == p.to_dict()
    with pytest.raises(ValueError):
        ModelParams(lambda_n=-1.0, **base)
