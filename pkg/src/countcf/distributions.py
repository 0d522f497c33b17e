"""Count-data and binary-link kernels.

All count families share the NB2 mean/dispersion parameterization

    E[Y] = mu,  Var[Y] = mu * (1 + alpha * mu)

with Poisson as the ``alpha == 0`` member.  Derivatives are taken with respect
to the unconstrained parameters used by the optimizer: the linear predictor
``eta = log(mu)``, ``log(alpha)`` and the inflation logit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize, special

from .errors import DomainError, ParameterError

__all__ = [
    "COUNT_KINDS",
    "CountFamily",
    "ParameterError",
    "DomainError",
    "count_logpmf",
    "count_logpmf_grad",
    "count_kernel",
    "ztnb_moments",
    "nb_zero_logprob",
    "std_normal",
    "log_ndtr",
    "mills_ratio",
    "logistic_cdf",
    "tail_cutoff",
]

COUNT_KINDS = ("poisson", "nb2", "zinb", "ztnb")

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_CDF_EPS = 1e-300


@dataclass(frozen=True)
class CountFamily:
    """Outcome process for a single observation (or a broadcastable batch).

    ``alpha`` is ignored for ``poisson``; ``p`` is the structural-zero
    probability and only used by ``zinb``.
    """

    kind: str
    mean: float
    alpha: float = 0.0
    p: Optional[float] = None

    def __post_init__(self):
        if self.kind not in COUNT_KINDS:
            raise ParameterError(f"unknown count family {self.kind!r}")
        mean = np.asarray(self.mean, dtype=float)
        if not np.all(np.isfinite(mean)) or np.any(mean <= 0):
            raise ParameterError("mean must be finite and positive")
        if self.kind != "poisson":
            if not np.isfinite(self.alpha) or self.alpha < 0:
                raise ParameterError("alpha must be finite and nonnegative")
        if self.kind == "zinb":
            if self.p is None or not np.isfinite(self.p) or not 0.0 < self.p < 1.0:
                raise ParameterError("zinb requires inflation probability p in (0, 1)")

    @property
    def dispersion(self) -> float:
        return 0.0 if self.kind == "poisson" else float(self.alpha)

    def variance(self):
        """Variance of the untruncated, uninflated NB2 component."""
        mu = np.asarray(self.mean, dtype=float)
        return mu * (1.0 + self.dispersion * mu)


# ---------------------------------------------------------------------------
# standard normal / logistic

def log_ndtr(x):
    """log Phi(x), accurate in both tails."""
    return special.log_ndtr(np.asarray(x, dtype=float))


def std_normal(x):
    """Return ``(pdf, cdf, log_cdf)`` of the standard normal at ``x``.

    The cdf is clamped to the open interval (0, 1).
    """
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    pdf = np.exp(-0.5 * x * x - _LOG_SQRT_2PI)
    cdf = np.clip(special.ndtr(x), _CDF_EPS, 1.0 - np.finfo(float).eps / 2)
    lcdf = log_ndtr(x)
    if scalar:
        return float(pdf[0]), float(cdf[0]), float(lcdf[0])
    return pdf, cdf, lcdf


def mills_ratio(x):
    """phi(x) / Phi(x), evaluated in log space."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - _LOG_SQRT_2PI - log_ndtr(x))


def logistic_cdf(x):
    return special.expit(x)


# ---------------------------------------------------------------------------
# NB2 building blocks

def _log1p_over_x(x):
    """log1p(x) / x with the removable singularity at 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x / 2.0 + x * x / 3.0 - x ** 3 / 4.0, np.log1p(safe) / safe)


def _g_over_x(x):
    """(log1p(x) - x / (1 + x)) / x, which vanishes like x / 2 near 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-3
    safe = np.where(small, 1.0, x)
    series = x / 2.0 - 2.0 * x ** 2 / 3.0 + 3.0 * x ** 3 / 4.0 - 4.0 * x ** 4 / 5.0
    return np.where(small, series, (np.log1p(safe) - safe / (1.0 + safe)) / safe)


def _rising_tables(alpha: float, ymax: int):
    """Cumulative sums over j < y of log1p(alpha*j) and alpha*j/(1+alpha*j)."""
    j = np.arange(ymax, dtype=float)
    aj = alpha * j
    lg = np.concatenate(([0.0], np.cumsum(np.log1p(aj))))
    dg = np.concatenate(([0.0], np.cumsum(aj / (1.0 + aj))))
    return lg, dg


def nb_zero_logprob(mu, alpha):
    """log P(Y = 0) under NB2, i.e. -(1/alpha) * log1p(alpha * mu)."""
    mu = np.asarray(mu, dtype=float)
    return -mu * _log1p_over_x(alpha * mu)


def _nb2_terms(y, eta, alpha, need_grad=True):
    """NB2 log-pmf and its derivatives w.r.t. eta and log(alpha).

    ``alpha`` must be a scalar; ``alpha == 0`` gives the Poisson limit.
    """
    y = np.asarray(y)
    mu = np.exp(eta)
    x = alpha * mu
    ymax = int(y.max()) if y.size else 0
    lg, dg = _rising_tables(alpha, ymax)
    yi = y.astype(np.int64)
    ll = (lg[yi] + y * eta - y * np.log1p(x) - mu * _log1p_over_x(x)
          - special.gammaln(y + 1.0))
    if not need_grad:
        return ll, None, None
    d_eta = (y - mu) / (1.0 + x)
    d_la = dg[yi] + mu * _g_over_x(x) - y * x / (1.0 + x)
    return ll, d_eta, d_la


def _log1mexp(a):
    """log(1 - exp(a)) for a < 0."""
    a = np.asarray(a, dtype=float)
    return np.where(a > -np.log(2.0), np.log(-np.expm1(a)), np.log1p(-np.exp(a)))


def count_kernel(kind, y, eta, log_alpha=None, eta_infl=None, need_grad=True):
    """Per-observation log-likelihood and scores for a count family.

    Returns ``(ll, d_eta, d_log_alpha, d_eta_infl)``; unused derivatives are
    ``None``.  ``log_alpha`` is a scalar.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if kind == "poisson":
        mu = np.exp(eta)
        ll = y * eta - mu - special.gammaln(y + 1.0)
        return ll, (y - mu) if need_grad else None, None, None

    alpha = float(np.exp(log_alpha))
    if kind == "nb2":
        ll, de, da = _nb2_terms(y, eta, alpha, need_grad)
        return ll, de, da, None

    if kind == "ztnb":
        if np.any(y < 1):
            raise DomainError("zero-truncated family requires all outcomes >= 1")
        ll, de, da = _nb2_terms(y, eta, alpha, need_grad)
        mu = np.exp(eta)
        x = alpha * mu
        lp0 = nb_zero_logprob(mu, alpha)
        ll = ll - _log1mexp(lp0)
        if not need_grad:
            return ll, None, None, None
        # d/dtheta[-log(1 - P0)] = P0 / (1 - P0) * dlogP0/dtheta
        odds0 = 1.0 / np.expm1(-lp0)
        de = de - odds0 * mu / (1.0 + x)
        da = da + odds0 * mu * _g_over_x(x)
        return ll, de, da, None

    if kind == "zinb":
        eta_infl = np.broadcast_to(np.asarray(eta_infl, dtype=float), y.shape)
        log_p = -np.logaddexp(0.0, -eta_infl)
        log_q = -np.logaddexp(0.0, eta_infl)
        ll_nb, de_nb, da_nb = _nb2_terms(y, eta, alpha, need_grad)
        zero = y == 0
        ll = log_q + ll_nb
        mix = np.logaddexp(log_p, log_q + ll_nb)
        ll = np.where(zero, mix, ll)
        if not need_grad:
            return ll, None, None, None
        p = np.exp(log_p)
        # posterior weight of the NB regime among observed zeros
        w = np.where(zero, np.exp(log_q + ll_nb - mix), 1.0)
        de = w * de_nb
        da = w * da_nb
        di = np.where(zero, (1.0 - w) * (1.0 - p) - w * p, -p)
        return ll, de, da, di

    raise ParameterError(f"unknown count family {kind!r}")


# ---------------------------------------------------------------------------
# family-level API

def _check_y(family: CountFamily, y):
    y = np.asarray(y)
    if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(np.floor(y) != y):
        raise DomainError("counts must be nonnegative integers")
    if family.kind == "ztnb" and np.any(y < 1):
        raise DomainError("zero-truncated family is undefined at y = 0")
    return y


def _family_args(family: CountFamily):
    eta = np.log(np.asarray(family.mean, dtype=float))
    if family.kind == "poisson":
        return eta, None, None
    if family.alpha == 0.0:
        # Poisson limit of the NB2-based kernels
        log_alpha = -np.inf
    else:
        log_alpha = np.log(family.alpha)
    eta_infl = None
    if family.kind == "zinb":
        eta_infl = special.logit(family.p)
    return eta, log_alpha, eta_infl


def count_logpmf(family: CountFamily, y):
    """Log probability mass of ``y`` under ``family``."""
    y = _check_y(family, y)
    eta, la, ei = _family_args(family)
    eta, yb = np.broadcast_arrays(eta, y)
    ll = count_kernel(family.kind, yb, eta, la, ei, need_grad=False)[0]
    return float(ll) if np.ndim(ll) == 0 else ll


def count_logpmf_grad(family: CountFamily, y):
    """Gradient of the log-pmf in the unconstrained parameterization.

    The last axis holds ``d/dlog(mean)``, then ``d/dlog(alpha)`` (all but
    poisson), then ``d/dlogit(p)`` (zinb only).
    """
    y = _check_y(family, y)
    eta, la, ei = _family_args(family)
    eta, yb = np.broadcast_arrays(eta, y)
    _, de, da, di = count_kernel(family.kind, yb, eta, la, ei)
    parts = [de] + [d for d in (da, di) if d is not None]
    return np.stack(np.broadcast_arrays(*parts), axis=-1)


def ztnb_moments(mu: float, alpha: float):
    """Mean and variance of the zero-truncated NB2 distribution.

    Uses the untruncated first two moments rescaled by 1 / (1 - P(Y=0)).
    """
    if not (np.isfinite(mu) and mu > 0) or not (np.isfinite(alpha) and alpha >= 0):
        raise ParameterError("need mu > 0 and alpha >= 0")
    keep = -np.expm1(float(nb_zero_logprob(mu, alpha)))
    mean = mu / keep
    second = (mu * (1.0 + alpha * mu) + mu * mu) / keep
    return float(mean), float(second - mean * mean)


def _log_tail_bound(kind, mu, alpha, m):
    """Chernoff bound on log P(Y >= m) for the NB2 component."""
    def neg_log_bound(s):
        if alpha == 0.0 or kind == "poisson":
            log_mgf = mu * np.expm1(s)
        else:
            inner = 1.0 - alpha * mu * np.expm1(s)
            if inner <= 0:
                return np.inf
            log_mgf = -np.log(inner) / alpha
        return log_mgf - s * m

    if alpha > 0 and kind != "poisson":
        s_max = np.log1p(1.0 / (alpha * mu)) * (1 - 1e-9)
    else:
        s_max = np.log(max(m / mu, 1.0)) + 1.0
    res = optimize.minimize_scalar(neg_log_bound, bounds=(0.0, s_max), method="bounded",
                                   options={"xatol": 1e-10})
    return min(0.0, float(res.fun))


def tail_cutoff(family: CountFamily, tol: float = 1e-12, cap: int = 10 ** 6) -> int:
    """Smallest ``m`` whose Chernoff tail bound P(Y >= m) is below ``tol``."""
    mu = float(np.max(family.mean))
    alpha = family.dispersion
    log_tol = np.log(tol)
    if family.kind == "ztnb":
        # truncation inflates the tail by 1 / (1 - P0)
        log_tol += _log1mexp(float(nb_zero_logprob(mu, alpha)))
    hi = max(1, int(np.ceil(mu)))
    while _log_tail_bound(family.kind, mu, alpha, hi) > log_tol:
        hi *= 2
        if hi >= cap:
            return cap
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _log_tail_bound(family.kind, mu, alpha, mid) > log_tol:
            lo = mid
        else:
            hi = mid
    return hi
