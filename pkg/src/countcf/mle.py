"""Maximum-likelihood fitting for binary and count models.

The optimizer is a damped Newton method on a log-likelihood; design columns
are rescaled to unit RMS internally so that step acceptance and the gradient
tolerance do not depend on covariate units.  Estimates and covariances are
mapped back to the original column scale before they are returned.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special, stats

from .data import DesignMatrix
from .distributions import COUNT_KINDS, count_kernel, log_ndtr, nb_zero_logprob
from .errors import DegenerateSampleError, DomainError, OptimizationError, SeparationError

log = logging.getLogger(__name__)

GRAD_TOL = 1e-8
MAX_ITER = 200
MAX_HALVINGS = 50
EIG_CLIP = -1e-8
SEPARATION_BOUND = 1e3
PINNED_INDEX = 5.0  # |index| beyond which Phi(-q) < 3e-7
BOUNDARY_LOGIT = -15.0
ROUNDOFF = 64 * np.finfo(float).eps


# ---------------------------------------------------------------------------
# objectives

class Objective:
    """Log-likelihood with analytic scores.

    Subclasses provide ``per_observation(theta) -> (ll_i, scores)``;
    the Hessian falls back to central differences of the gradient.
    """

    k: int

    def per_observation(self, theta):
        raise NotImplementedError

    def loglik(self, theta) -> float:
        ll = self.per_observation(np.asarray(theta, dtype=float))[0]
        return float(np.sum(ll))

    def per_observation_scores(self, theta) -> np.ndarray:
        return self.per_observation(np.asarray(theta, dtype=float))[1]

    def gradient(self, theta) -> np.ndarray:
        return self.per_observation_scores(theta).sum(axis=0)

    def hessian(self, theta) -> np.ndarray:
        return fd_hessian(self.gradient, np.asarray(theta, dtype=float))


class FunctionObjective(Objective):
    """Objective from plain callables (no per-observation structure)."""

    def __init__(self, loglik: Callable, gradient: Callable, hessian: Optional[Callable] = None):
        self._ll, self._g, self._h = loglik, gradient, hessian

    def loglik(self, theta):
        return float(self._ll(np.asarray(theta, dtype=float)))

    def gradient(self, theta):
        return np.atleast_1d(np.asarray(self._g(np.asarray(theta, dtype=float)), dtype=float))

    def per_observation_scores(self, theta):
        return self.gradient(theta)[None, :]

    def hessian(self, theta):
        if self._h is None:
            return fd_hessian(self.gradient, np.asarray(theta, dtype=float))
        return np.atleast_2d(np.asarray(self._h(np.asarray(theta, dtype=float)), dtype=float))


def fd_hessian(grad: Callable, theta: np.ndarray) -> np.ndarray:
    k = theta.size
    H = np.empty((k, k))
    for j in range(k):
        h = 1e-5 * (1.0 + abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        H[:, j] = (grad(up) - grad(dn)) / (2.0 * h)
    return 0.5 * (H + H.T)


class BinaryObjective(Objective):
    """Probit or logit log-likelihood for a 0/1 outcome."""

    def __init__(self, X: np.ndarray, y: np.ndarray, link: str = "probit"):
        if link not in ("probit", "logit"):
            raise ValueError(f"unsupported link {link!r}")
        self.X, self.y, self.link = X, np.asarray(y, dtype=float), link
        self.k = X.shape[1]
        self._sign = 2.0 * self.y - 1.0

    def _pieces(self, theta):
        q = self._sign * (self.X @ theta)
        if self.link == "probit":
            lcdf = log_ndtr(q)
            lam = np.exp(-0.5 * q * q - 0.5 * np.log(2 * np.pi) - lcdf)
            return lcdf, self._sign * lam, -lam * (lam + q)
        lcdf = -np.logaddexp(0.0, -q)
        p = special.expit(q)
        return lcdf, self._sign * (1.0 - p), -p * (1.0 - p)

    def per_observation(self, theta):
        ll, d, _ = self._pieces(theta)
        return ll, d[:, None] * self.X

    def hessian(self, theta):
        _, _, h = self._pieces(np.asarray(theta, dtype=float))
        return (self.X * h[:, None]).T @ self.X


class CountObjective(Objective):
    """Count log-likelihood; parameters are ``[beta, log_alpha, gamma]``."""

    def __init__(self, X: np.ndarray, y: np.ndarray, family: str, Z: Optional[np.ndarray] = None,
                 zero_dispersion: bool = False):
        if family not in COUNT_KINDS:
            raise ValueError(f"unknown count family {family!r}")
        self.X, self.y, self.family = X, np.asarray(y, dtype=float), family
        self.Z = Z if family == "zinb" else None
        # alpha pinned at 0 turns nb2/zinb/ztnb into poisson/zip/ztp
        self.free_alpha = family != "poisson" and not zero_dispersion
        self.kx = X.shape[1]
        self.kz = self.Z.shape[1] if self.Z is not None else 0
        self.k = self.kx + self.free_alpha + self.kz

    def split(self, theta):
        b = theta[: self.kx]
        if self.family == "poisson":
            la = None
        else:
            la = theta[self.kx] if self.free_alpha else -np.inf
        g = theta[self.kx + self.free_alpha:] if self.family == "zinb" else None
        return b, la, g

    def per_observation(self, theta):
        b, la, g = self.split(theta)
        eta = self.X @ b
        ei = self.Z @ g if g is not None else None
        ll, de, da, di = count_kernel(self.family, self.y, eta, la, ei)
        cols = [de[:, None] * self.X]
        if self.free_alpha:
            cols.append(da[:, None])
        if di is not None:
            cols.append(di[:, None] * self.Z)
        return ll, np.hstack(cols)

    def hessian(self, theta):
        if self.family == "poisson" or (self.family == "nb2" and not self.free_alpha):
            mu = np.exp(self.X @ theta)
            return -(self.X * mu[:, None]).T @ self.X
        return super().hessian(theta)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class Trace:
    logliks: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # "newton", "modified", "ascent"


def _line_search(obj, theta, ll, direction):
    t = 1.0
    any_finite = False
    for _ in range(MAX_HALVINGS + 1):
        cand = theta + t * direction
        with np.errstate(all="ignore"):
            val = obj.loglik(cand)
        if np.isfinite(val):
            any_finite = True
            if val >= ll:
                return cand, val, True
        t *= 0.5
    return theta, ll, any_finite


def maximize_loglik(obj: Objective, start, tol: float = GRAD_TOL, max_iter: int = MAX_ITER,
                    guard: Optional[Callable] = None):
    """Damped Newton ascent.

    Returns ``(theta, converged, iterations, trace)``.  ``guard(theta)`` is
    called after every accepted step and may raise to abort.
    """
    theta = np.array(start, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise OptimizationError("non-finite starting values")
    ll = obj.loglik(theta)
    trace = Trace([ll], [], [])
    if not np.isfinite(ll):
        raise OptimizationError("log-likelihood is not finite at the starting values", trace)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = obj.gradient(theta)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        trace.grad_norms.append(gnorm)
        if gnorm < tol:
            converged, it = True, it - 1
            break
        H = obj.hessian(theta)
        H = 0.5 * (H + H.T)
        w, V = np.linalg.eigh(H)
        candidates = []
        if np.all(w < 0):
            candidates.append(("newton", V @ ((V.T @ g) / -w)))
        else:
            wc = np.minimum(w, EIG_CLIP)
            candidates.append(("modified", V @ ((V.T @ g) / -wc)))
        candidates.append(("ascent", g / max(1.0, gnorm)))
        moved = False
        any_finite = False
        previous = ll
        for kind, direction in candidates:
            new_theta, new_ll, finite = _line_search(obj, theta, ll, direction)
            any_finite |= finite
            if new_ll >= ll and not np.array_equal(new_theta, theta):
                theta, ll = new_theta, new_ll
                trace.steps.append(kind)
                moved = True
                break
        slack = ROUNDOFF * (1.0 + abs(ll))
        if moved and ll - previous <= slack and _newton_decrement(g, H) <= slack:
            # the gradient sits at its rounding floor (it grows with n)
            trace.logliks.append(ll)
            converged = True
            break
        if not moved:
            if not any_finite:
                raise OptimizationError("log-likelihood not finite at any step size", trace)
            # no ascent possible in floating point: accept when the predicted
            # gain is below the rounding level of the log-likelihood
            converged = _newton_decrement(g, H) <= slack
            break
        trace.logliks.append(ll)
        if guard is not None:
            guard(theta)
    else:
        g = obj.gradient(theta)
        converged = float(np.max(np.abs(g))) < tol
    return theta, converged, it, trace


def _newton_decrement(g, H):
    w, V = np.linalg.eigh(-H)
    if w.min() <= 0:
        return np.inf
    c = V.T @ g
    return float(np.sum(c * c / w))


def check_gradient(obj: Objective, theta) -> float:
    """Worst coordinate error of the analytic gradient vs central differences.

    The error on each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    theta = np.asarray(theta, dtype=float)
    g = obj.gradient(theta)
    worst = 0.0
    for j in range(theta.size):
        h = 1e-6 * (1.0 + abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        num = (obj.loglik(up) - obj.loglik(dn)) / (2.0 * h)
        worst = max(worst, abs(g[j] - num) / max(1.0, abs(num)))
    return worst


# ---------------------------------------------------------------------------
# covariance

def clustered_sandwich_vcov(scores: np.ndarray, bread: np.ndarray, cluster) -> np.ndarray:
    """``bread @ (sum_g s_g s_g') @ bread`` with within-cluster score sums."""
    scores = np.atleast_2d(scores)
    cluster = np.asarray(cluster)
    if cluster.shape[0] != scores.shape[0]:
        raise ValueError("every row needs a cluster id")
    _, inv = np.unique(cluster, return_inverse=True)
    G = int(inv.max()) + 1 if inv.size else 0
    sums = np.empty((G, scores.shape[1]))
    for j in range(scores.shape[1]):
        sums[:, j] = np.bincount(inv, weights=scores[:, j], minlength=G)
    meat = sums.T @ sums
    V = bread @ meat @ bread
    return 0.5 * (V + V.T)


def _inverse_negative(H: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.minimum(w, EIG_CLIP)
    return (V / -w) @ V.T


# ---------------------------------------------------------------------------
# results

@dataclass
class FitResult:
    """Estimates from one likelihood fit, on the original column scale."""

    names: tuple
    coef: np.ndarray
    vcov: np.ndarray
    vcov_naive: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    n_obs: int
    n_clusters: int
    family: str
    design_names: tuple = ()
    design_terms: tuple = ()
    dropped_columns: tuple = ()
    rows: Optional[np.ndarray] = None
    linear_predictor: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)
    boundary: dict = field(default_factory=dict)
    trace: Optional[Trace] = None

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def z(self):
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, self.coef / se, np.nan)

    @property
    def pvalues(self):
        return 2.0 * stats.norm.sf(np.abs(self.z))

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no coefficient named {name!r}") from None

    def __getitem__(self, name):
        return float(self.coef[self.index(name)])

    def has(self, name) -> bool:
        return name in self.names

    def is_binary(self) -> bool:
        return self.family in ("probit", "logit")

    @property
    def beta(self):
        """Coefficients of the mean (or index) equation only."""
        return self.coef[: len(self.design_names)]

    def to_dict(self) -> dict:
        se, z = self.se, self.z
        return {
            "family": self.family,
            "coefficients": [
                {"name": n, "estimate": float(b), "se": float(s),
                 "z": None if not np.isfinite(zz) else float(zz)}
                for n, b, s, zz in zip(self.names, self.coef, se, z)
            ],
            "vcov": [[float(v) for v in row] for row in self.vcov],
            "loglik": float(self.loglik),
            "n_obs": int(self.n_obs),
            "n_clusters": int(self.n_clusters),
            "dropped_columns": [list(d) for d in self.dropped_columns],
            "convergence": {
                "converged": bool(self.converged),
                "iterations": int(self.iterations),
                "boundary": dict(self.boundary),
                "warnings": list(self.warnings),
            },
        }


def _scale_columns(X: np.ndarray):
    s = np.sqrt(np.mean(X * X, axis=0))
    s[s == 0] = 1.0
    return X / s, s


def _finish(obj, theta_s, scale, converged, iters, trace, names, design, cluster, family,
            extra_warnings=()):
    """Build a FitResult, converting from scaled to original coordinates."""
    H = obj.hessian(theta_s)
    bread = _inverse_negative(H)
    scores = obj.per_observation_scores(theta_s)
    V_s = clustered_sandwich_vcov(scores, bread, cluster)
    D = 1.0 / scale
    coef = theta_s * D
    V = V_s * np.outer(D, D)
    V_naive = bread * np.outer(D, D)
    n_clusters = int(np.unique(cluster).size)
    warnings = list(extra_warnings)
    if len(coef) > n_clusters:
        warnings.append(f"{len(coef)} parameters exceed {n_clusters} clusters")
    return FitResult(
        names=tuple(names), coef=coef, vcov=V, vcov_naive=V_naive,
        loglik=obj.loglik(theta_s), converged=bool(converged), iterations=int(iters),
        n_obs=int(obj.X.shape[0]), n_clusters=n_clusters, family=family,
        design_names=tuple(design.names), design_terms=tuple(design.terms),
        dropped_columns=tuple(design.dropped_columns), rows=np.asarray(design.rows),
        linear_predictor=design.values @ coef[: design.values.shape[1]],
        warnings=warnings, trace=trace,
    )


def fit_binary(design: DesignMatrix, y, link: str = "probit", cluster=None,
               tol: float = GRAD_TOL, max_iter: int = MAX_ITER) -> FitResult:
    """Probit/logit MLE with cluster-robust covariance."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] != design.values.shape[0]:
        raise ValueError("outcome length does not match design rows")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("binary outcome must be 0/1")
    if y.min() == y.max():
        raise DegenerateSampleError("binary outcome has a single class")
    cluster = np.arange(y.size) if cluster is None else np.asarray(cluster)
    Xs, scale = _scale_columns(design.values)
    obj = BinaryObjective(Xs, y, link)

    def guard(theta):
        b = theta / scale
        j = int(np.argmax(np.abs(b)))
        if abs(b[j]) > SEPARATION_BOUND:
            raise SeparationError(f"perfect separation: coefficient on {design.names[j]!r} "
                                  f"is unbounded", design.names[j])

    theta, conv, iters, trace = maximize_loglik(obj, np.zeros(obj.k), tol, max_iter, guard)
    # quasi-separation: fitted probabilities pinned at 0/1 and a flat likelihood direction.
    # The probit score vanishes like exp(-q^2/2), so the optimizer can stop near q = 7.
    q = (2 * y - 1) * (Xs @ theta)
    if np.any(q > PINNED_INDEX):
        if obj.loglik(2.0 * theta) >= obj.loglik(theta):
            # scaling the index up never hurts: complete separation
            j = int(np.argmax(np.abs(theta[1:]))) + 1 if theta.size > 1 else 0
            raise SeparationError(f"perfect separation by {design.names[j]!r}", design.names[j])
        H = obj.hessian(theta)
        w, V = np.linalg.eigh(-H)
        if w[0] < 1e-8 * max(w[-1], 1.0):
            j = int(np.argmax(np.abs(V[:, 0])))
            raise SeparationError(f"perfect separation involving {design.names[j]!r}",
                                  design.names[j])
    res = _finish(obj, theta, scale, conv, iters, trace, design.names, design, cluster, link)
    return res


def _zero_share_start(y, mu):
    observed = np.mean(y == 0)
    implied = np.mean(np.exp(nb_zero_logprob(mu, 1.0)))
    p = float(np.clip(observed - implied, 0.01, 0.99))
    return float(special.logit(p))


def fit_count(design: DesignMatrix, y, family: str = "nb2", cluster=None,
              inflation_design: Optional[DesignMatrix] = None, start=None,
              tol: float = GRAD_TOL, max_iter: int = MAX_ITER,
              zero_dispersion: bool = False) -> FitResult:
    """Count-model MLE (poisson, nb2, zinb, ztnb) with cluster-robust covariance.

    Starting values come from a Poisson fit; ``log_alpha`` starts at 0 and the
    zinb inflation intercept at the logit of the excess zero share.  With
    ``zero_dispersion`` alpha is pinned at 0, giving the Poisson-based member
    of the family (the null model of the dispersion LR test).
    """
    if family not in COUNT_KINDS:
        raise ValueError(f"unknown count family {family!r}")
    y = np.asarray(y, dtype=float)
    if y.shape[0] != design.values.shape[0]:
        raise ValueError("outcome length does not match design rows")
    if np.any(y < 0) or np.any(np.floor(y) != y):
        raise DomainError("counts must be nonnegative integers")
    if family == "ztnb" and np.any(y == 0):
        raise DomainError(f"zero-truncated family requires y >= 1; found {int(np.sum(y == 0))} zeros")
    cluster = np.arange(y.size) if cluster is None else np.asarray(cluster)
    Xs, scale = _scale_columns(design.values)
    names = list(design.names)
    Z = Zs = zscale = None
    if family == "zinb":
        inflation_design = inflation_design or design
        if inflation_design.values.shape[0] != y.size:
            raise ValueError("inflation design rows do not match")
        Zs, zscale = _scale_columns(inflation_design.values)
        Z = inflation_design

    obj = CountObjective(Xs, y, family, Zs, zero_dispersion)
    full_scale = np.concatenate([scale] + ([np.ones(1)] if obj.free_alpha else [])
                                + ([zscale] if family == "zinb" else []))
    if start is None:
        theta0 = _count_start(Xs, y, family, Zs, tol, max_iter)
        if not obj.free_alpha and family != "poisson":
            theta0 = np.delete(theta0, Xs.shape[1])
    else:
        theta0 = np.asarray(start, dtype=float) * full_scale
    theta, conv, iters, trace = maximize_loglik(obj, theta0, tol, max_iter)

    if obj.free_alpha:
        names.append("lnalpha")
    if family == "zinb":
        names += [f"inflate:{n}" for n in Z.names]
    label = family
    if zero_dispersion:
        label = {"nb2": "poisson", "zinb": "zip", "ztnb": "ztp"}.get(family, family)
    res = _finish(obj, theta, full_scale, conv, iters, trace, names, design, cluster, label)
    if obj.free_alpha and res["lnalpha"] < BOUNDARY_LOGIT:
        res.boundary["alpha"] = "log alpha -> -inf"
    if family == "zinb":
        gi = [i for i, n in enumerate(res.names) if n.startswith("inflate:")]
        if res.coef[gi[0]] < BOUNDARY_LOGIT:
            res.boundary["inflation"] = "inflation intercept -> -inf"
    if res.boundary:
        res.warnings.append("boundary fit: " + ", ".join(sorted(res.boundary.values())))
    if not res.converged:
        log.warning("%s fit did not converge after %d iterations", family, res.iterations)
    return res


def _count_start(Xs, y, family, Zs, tol, max_iter):
    """Warm start in scaled coordinates: Poisson betas, log alpha 0, zero-share logit."""
    b0 = np.zeros(Xs.shape[1])
    has_const = np.ptp(Xs[:, 0]) == 0.0
    if has_const:
        b0[0] = np.log(max(y.mean(), 1e-3)) / Xs[0, 0]
    try:
        b = maximize_loglik(CountObjective(Xs, y, "poisson"), b0, tol, max_iter)[0]
    except OptimizationError:
        b = b0
    if family == "poisson":
        return b
    start = [b, np.zeros(1)]
    if family == "zinb":
        g = np.zeros(Zs.shape[1])
        if np.ptp(Zs[:, 0]) == 0.0:
            g[0] = _zero_share_start(y, np.exp(Xs @ b)) / Zs[0, 0]
        start.append(g)
    return np.concatenate(start)


def names_index(names: Sequence[str], wanted: Sequence[str]):
    return [list(names).index(w) for w in wanted]
