import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from countcf.distributions import (CountFamily, count_kernel, count_logpmf, count_logpmf_grad,
                                   log_ndtr, logistic_cdf, mills_ratio, nb_zero_logprob,
                                   std_normal, tail_cutoff, ztnb_moments)
from countcf.errors import DomainError, ParameterError

mp.mp.dps = 40


def mp_nb2(mu, alpha, y):
    mu, a, y = mp.mpf(mu), mp.mpf(alpha), int(y)
    r = 1 / a
    return (mp.loggamma(y + r) - mp.loggamma(r) - mp.loggamma(y + 1)
            + r * mp.log(r / (r + mu)) + y * mp.log(mu / (r + mu)))


def mp_poisson(mu, y):
    mu = mp.mpf(mu)
    return -mu + y * mp.log(mu) - mp.loggamma(y + 1)


# -- point values ------------------------------------------------------------

def test_poisson_at_zero():
    assert count_logpmf(CountFamily("poisson", 1.0), 0) == pytest.approx(-1.0, abs=1e-15)


def test_poisson_matches_high_precision():
    assert count_logpmf(CountFamily("poisson", 2.0), 3) == pytest.approx(float(mp_poisson(2, 3)), abs=1e-13)
    assert count_logpmf(CountFamily("poisson", 2.0), 3) == pytest.approx(-1.712318, abs=1e-6)


def test_nb2_zero_mass():
    assert count_logpmf(CountFamily("nb2", 1.0, 1.0), 0) == pytest.approx(math.log(0.5), abs=1e-14)


def test_zinb_zero_mixture():
    fam = CountFamily("zinb", 1.0, 1.0, p=0.3)
    assert count_logpmf(fam, 0) == pytest.approx(math.log(0.65), abs=1e-14)
    # positive counts carry the (1 - p) factor only
    nb = count_logpmf(CountFamily("nb2", 1.0, 1.0), 2)
    assert count_logpmf(fam, 2) == pytest.approx(math.log(0.7) + nb, abs=1e-14)


def test_ztnb_one():
    assert count_logpmf(CountFamily("ztnb", 1.0, 1.0), 1) == pytest.approx(math.log(0.5), abs=1e-14)


@pytest.mark.parametrize("mu,alpha", [(0.3, 0.2), (1.0, 1.142), (7.5, 3.0), (40.0, 0.05)])
def test_nb2_against_mpmath(mu, alpha):
    ys = np.array([0, 1, 2, 5, 17, 120])
    got = count_logpmf(CountFamily("nb2", mu, alpha), ys)
    want = np.array([float(mp_nb2(mu, alpha, y)) for y in ys])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_large_counts_do_not_overflow():
    v = count_logpmf(CountFamily("nb2", 500.0, 0.5), 10000)
    assert np.isfinite(v)
    assert v == pytest.approx(float(mp_nb2(500.0, 0.5, 10000)), rel=1e-12)


# -- errors ------------------------------------------------------------------

def test_ztnb_zero_is_domain_error():
    with pytest.raises(DomainError):
        count_logpmf(CountFamily("ztnb", 1.0, 1.0), 0)


@pytest.mark.parametrize("kwargs", [dict(kind="nb2", mean=-1.0, alpha=1.0),
                                    dict(kind="nb2", mean=1.0, alpha=float("nan")),
                                    dict(kind="zinb", mean=1.0, alpha=1.0, p=1.0),
                                    dict(kind="zinb", mean=1.0, alpha=1.0),
                                    dict(kind="weibull", mean=1.0)])
def test_bad_parameters(kwargs):
    with pytest.raises(ParameterError):
        CountFamily(**kwargs)


def test_negative_count_is_domain_error():
    with pytest.raises(DomainError):
        count_logpmf(CountFamily("poisson", 1.0), -1)


# -- limits ------------------------------------------------------------------

@pytest.mark.parametrize("mu", [0.5, 1.0, 5.0])
def test_poisson_nesting(mu):
    ys = np.arange(51)
    nb = count_logpmf(CountFamily("nb2", mu, 1e-10), ys)
    po = count_logpmf(CountFamily("poisson", mu), ys)
    assert np.max(np.abs(nb - po)) < 1e-5


def test_alpha_zero_is_exact_poisson():
    ys = np.arange(30)
    np.testing.assert_allclose(count_logpmf(CountFamily("nb2", 2.5, 0.0), ys),
                               count_logpmf(CountFamily("poisson", 2.5), ys), rtol=0, atol=1e-13)


def test_zinb_tends_to_nb2():
    ys = np.arange(20)
    nb = count_logpmf(CountFamily("nb2", 2.0, 0.7), ys)
    zi = count_logpmf(CountFamily("zinb", 2.0, 0.7, p=1e-12), ys)
    np.testing.assert_allclose(zi, nb, atol=1e-10)


def test_nb2_score_limit():
    g_nb = count_logpmf_grad(CountFamily("nb2", 3.0, 1e-10), 5)[0]
    g_po = count_logpmf_grad(CountFamily("poisson", 3.0), 5)[0]
    assert abs(g_nb - g_po) < 1e-5


def test_poisson_score_zero_at_mean():
    assert count_logpmf_grad(CountFamily("poisson", 4.0), 4)[0] == pytest.approx(0.0, abs=1e-14)


# -- normalization and moments -------------------------------------------------

@pytest.mark.parametrize("fam", [CountFamily("poisson", 3.2), CountFamily("nb2", 2.0, 1.142),
                                 CountFamily("zinb", 1.5, 0.8, p=0.35),
                                 CountFamily("ztnb", 0.7, 2.5)])
def test_pmf_sums_to_one(fam):
    m = tail_cutoff(fam, 1e-12)
    start = 1 if fam.kind == "ztnb" else 0
    p = np.exp(count_logpmf(fam, np.arange(start, m + 1)))
    assert abs(math.fsum(p) - 1.0) < 1e-10


def test_tail_cutoff_bounds_the_tail():
    fam = CountFamily("nb2", 3.0, 2.0)
    m = tail_cutoff(fam, 1e-12)
    head = math.fsum(np.exp(count_logpmf(fam, np.arange(m))))
    assert 1.0 - head < 1e-12
    assert m > 10


def test_ztnb_mean_closed_forms():
    assert ztnb_moments(1.0, 1.0)[0] == pytest.approx(2.0, abs=1e-14)
    assert ztnb_moments(1.0, 0.0)[0] == pytest.approx(1.0 / (1.0 - math.exp(-1.0)), abs=1e-12)
    assert ztnb_moments(1.0, 0.0)[0] == pytest.approx(1.581977, abs=1e-6)


@pytest.mark.parametrize("mu,alpha", [(0.4, 0.3), (1.0, 1.0), (3.0, 1.142), (8.0, 0.1)])
def test_ztnb_moments_by_summation(mu, alpha):
    fam = CountFamily("ztnb", mu, alpha)
    ys = np.arange(1, tail_cutoff(fam, 1e-14) + 1)
    p = np.exp(count_logpmf(fam, ys))
    mean = math.fsum(ys * p)
    var = math.fsum((ys - mean) ** 2 * p)
    m, v = ztnb_moments(mu, alpha)
    assert m == pytest.approx(mean, rel=1e-10)
    assert v == pytest.approx(var, rel=1e-9)
    assert m > mu and v > 0


def test_nb2_variance_at_least_mean():
    assert CountFamily("nb2", 2.0, 0.0).variance() == 2.0
    assert CountFamily("nb2", 2.0, 0.5).variance() == pytest.approx(4.0)


# -- gradients ---------------------------------------------------------------

def _fd_family_grad(kind, mu, alpha, p, y, h=1e-6):
    def f(v):
        fam = CountFamily(kind, math.exp(v[0]), math.exp(v[1]) if kind != "poisson" else 0.0,
                          p=1.0 / (1.0 + math.exp(-v[2])) if kind == "zinb" else None)
        return count_logpmf(fam, y)

    v = np.array([math.log(mu), math.log(alpha) if alpha > 0 else 0.0,
                  math.log(p / (1 - p)) if p else 0.0])
    k = {"poisson": 1, "nb2": 2, "ztnb": 2, "zinb": 3}[kind]
    out = np.empty(k)
    for j in range(k):
        e = np.zeros(3)
        e[j] = h * (1 + abs(v[j]))
        out[j] = (f(v + e) - f(v - e)) / (2 * e[j])
    return out


@pytest.mark.parametrize("kind", ["poisson", "nb2", "zinb", "ztnb"])
def test_family_gradient_matches_differences(kind):
    rng = np.random.default_rng(3)
    for _ in range(20):
        mu = float(np.exp(rng.uniform(-1.5, 2.5)))
        alpha = float(np.exp(rng.uniform(-3, 1.5)))
        p = float(rng.uniform(0.05, 0.9))
        y = int(rng.integers(1 if kind == "ztnb" else 0, 15))
        fam = CountFamily(kind, mu, alpha if kind != "poisson" else 0.0,
                          p=p if kind == "zinb" else None)
        g = count_logpmf_grad(fam, y)
        num = _fd_family_grad(kind, mu, alpha, p if kind == "zinb" else None, y)
        assert np.max(np.abs(g - num) / np.maximum(1.0, np.abs(num))) < 1e-6


def test_kernel_small_alpha_gradient_is_finite():
    y = np.array([0, 3, 10])
    eta = np.log(np.array([1.0, 2.0, 4.0]))
    ll, de, da, _ = count_kernel("nb2", y, eta, np.log(1e-12))
    assert np.all(np.isfinite(ll)) and np.all(np.isfinite(da))
    assert np.max(np.abs(da)) < 1e-9  # d/dlog(alpha) vanishes like alpha


# -- normal and logistic -----------------------------------------------------

def test_std_normal_at_zero():
    pdf, cdf, lcdf = std_normal(0.0)
    assert pdf == pytest.approx(0.398942280401, abs=1e-12)
    assert cdf == 0.5
    assert lcdf == pytest.approx(math.log(0.5), abs=1e-15)
    assert logistic_cdf(0.0) == 0.5


@pytest.mark.parametrize("x", [-40.0, -25.0, -10.0, -8.5, -8.0, -7.9, -3.0, 0.5, 6.0])
def test_log_cdf_against_mpmath(x):
    want = float(mp.log(mp.ncdf(x)))
    assert float(log_ndtr(np.array([x]))[0]) == pytest.approx(want, rel=1e-10)


def test_mills_ratio_asymptote():
    # phi(x) / Phi(x) ~ -x - 1/x for large negative x
    r = float(mills_ratio(np.array([-10.0]))[0])
    want = float(mp.npdf(-10) / mp.ncdf(-10))
    assert r == pytest.approx(want, rel=1e-10)
    assert r == pytest.approx(10.098, abs=1e-3)


def test_cdf_clamped_inside_unit_interval():
    _, cdf, _ = std_normal(np.array([-60.0, 60.0]))
    assert 0.0 < cdf[0] and cdf[1] < 1.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30))
def test_residual_branches_have_opposite_signs(x):
    pos = float(mills_ratio(np.array([x]))[0])
    neg = -float(mills_ratio(np.array([-x]))[0])
    assert pos > 0 > neg


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30), st.floats(0.01, 5))
def test_log_cdf_increasing(x, d):
    a, b = log_ndtr(np.array([x, x + d]))
    assert b > a


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(0.01, 50), alpha=st.floats(0.0, 10), y=st.integers(0, 500))
def test_logpmf_is_a_log_probability(mu, alpha, y):
    v = count_logpmf(CountFamily("nb2", mu, alpha), y)
    assert np.isfinite(v) and v <= 1e-12


def test_nb_zero_logprob_matches_pmf():
    assert float(nb_zero_logprob(2.0, 0.5)) == pytest.approx(count_logpmf(CountFamily("nb2", 2.0, 0.5), 0))
