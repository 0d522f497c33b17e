"""Propensity-score matching baseline.

Scores come from a probit (or logit) of treatment on the covariates.  Each
treated row is matched, with replacement, to the control row whose score is
closest; the effect is the mean within-pair outcome difference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .data import PanelDataset, _parse_term, build_design
from .distributions import logistic_cdf, std_normal
from .errors import DegenerateSampleError, SchemaError
from .mle import FitResult, fit_binary

DEFAULT_K = 5
_CHUNK = 2048  # treated rows per distance block


@dataclass
class MatchResult:
    """Matched pairs ``(treated row, control row, |score gap|)`` plus outcomes."""

    pairs: list
    y_treated: np.ndarray
    y_control: np.ndarray
    unmatched: list = field(default_factory=list)
    score_model: Optional[FitResult] = None
    ate: float = float("nan")
    p_value: float = float("nan")

    @property
    def differences(self) -> np.ndarray:
        return self.y_treated - self.y_control

    def to_dict(self, detail: bool = True) -> dict:
        out = {
            "kind": "psm",
            "ate": float(self.ate),
            "p_value": float(self.p_value),
            "n_pairs": len(self.pairs),
            "n_controls_used": len({c for _, c, _ in self.pairs}),
            "unmatched": [int(r) for r in self.unmatched],
            "score_model": self.score_model.to_dict() if self.score_model is not None else None,
        }
        if detail:
            out["pairs"] = [
                {"treated": int(t), "control": int(c), "gap": float(g),
                 "y_treated": float(yt), "y_control": float(yc)}
                for (t, c, g), yt, yc in zip(self.pairs, self.y_treated, self.y_control)
            ]
        return out


def _covariate_terms(data: PanelDataset, terms):
    return tuple(terms) if terms is not None else tuple(data.schema.covariates)


def estimate_propensity(data: PanelDataset, terms: Optional[Sequence[str]] = None,
                        link: str = "probit", rows=None):
    """Fitted treatment probabilities, NaN where covariates or treatment are missing.

    ``rows`` restricts the estimation sample (a boolean mask); scores are then
    predicted for every row whose covariates are complete.
    """
    terms = _covariate_terms(data, terms)
    T = data.treatment
    if not (np.any(T == 1) and np.any(T == 0)):
        raise DegenerateSampleError("propensity model needs both treated and control rows")
    mask = ~np.isnan(T)
    if rows is not None:
        mask &= np.asarray(rows, dtype=bool)
    design = build_design(data, terms, rows=mask)
    fit = fit_binary(design, T[design.rows], link, cluster=data.clusters[design.rows])
    names = {n for t in terms for n, _ in _parse_term(t)}
    full = build_design(data, terms, rows=data.complete(sorted(names)))
    cols = [full.names.index(n) for n in design.names]
    xb = full.values[:, cols] @ fit.beta
    score = std_normal(xb)[1] if link == "probit" else logistic_cdf(xb)
    out = np.full(len(data), np.nan)
    out[full.rows] = score
    return out, fit


def _standardized(data: PanelDataset, terms):
    names = []
    for t in terms:
        for n, _ in _parse_term(t):
            if n not in names:
                names.append(n)
    X = np.column_stack([data.values(n) for n in names]) if names else np.empty((len(data), 0))
    sd = np.nanstd(X, axis=0)
    sd[~(sd > 0)] = 1.0
    return (X - np.nanmean(X, axis=0)) / sd


def impute_propensity(scores, data: PanelDataset, k: int = DEFAULT_K,
                      terms: Optional[Sequence[str]] = None, rows=None) -> np.ndarray:
    """Fill missing scores with the mean score of the ``k`` nearest opposite-group rows.

    Distance is Euclidean on standardized covariates, averaged over the
    coordinates both rows observe.  Ties in distance go to the lower row index.
    ``rows`` limits both the gaps filled and the donor pool.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=float).copy()
    pool = np.ones(len(data), dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
    gaps = np.flatnonzero(np.isnan(scores) & pool)
    if gaps.size == 0:
        return scores
    T = data.treatment
    Z = _standardized(data, _covariate_terms(data, terms))
    for r in gaps:
        if np.isnan(T[r]):
            continue
        donors = np.flatnonzero((T == 1 - T[r]) & ~np.isnan(scores) & pool)
        if donors.size < k:
            raise DegenerateSampleError(
                f"row {r}: {donors.size} scored rows in the opposite group, need {k}")
        diff = Z[donors] - Z[r]
        seen = ~np.isnan(diff)
        used = seen.sum(axis=1)
        sq = np.where(seen, diff * diff, 0.0).sum(axis=1)
        dist = np.where(used > 0, sq / np.maximum(used, 1), np.inf)
        order = np.lexsort((donors, dist))[:k]
        scores[r] = float(np.mean(scores[donors[order]]))
    return scores


def match_nearest(scores, data: PanelDataset, rows=None) -> MatchResult:
    """Greedy 1-nearest-neighbor matching with replacement.

    Treated rows are visited in ascending row order; the closest control
    wins and equal gaps go to the lowest control row.  Only rows with a score
    and an observed outcome take part (optionally intersected with ``rows``).
    """
    scores = np.asarray(scores, dtype=float)
    y = data.outcome
    T = data.treatment
    usable = ~np.isnan(y) & ~np.isnan(T)
    if rows is not None:
        usable &= np.asarray(rows, dtype=bool)
    controls = np.flatnonzero(usable & (T == 0) & ~np.isnan(scores))
    if controls.size == 0:
        raise DegenerateSampleError("no control rows available for matching")
    treated = np.flatnonzero(usable & (T == 1))
    unmatched = [int(r) for r in treated if np.isnan(scores[r])]
    treated = treated[~np.isnan(scores[treated])]
    cs = scores[controls]
    pairs = []
    for lo in range(0, treated.size, _CHUNK):
        block = treated[lo:lo + _CHUNK]
        gap = np.abs(scores[block][:, None] - cs[None, :])
        j = np.argmin(gap, axis=1)  # first minimum = lowest control row
        pairs.extend((int(t), int(controls[c]), float(gap[i, c]))
                     for i, (t, c) in enumerate(zip(block, j)))
    yt = np.array([y[t] for t, _, _ in pairs], dtype=float)
    yc = np.array([y[c] for _, c, _ in pairs], dtype=float)
    return MatchResult(pairs, yt, yc, unmatched)


def estimate_ate(match: MatchResult):
    """Mean pair difference and its two-sided normal p-value."""
    d = match.differences
    if d.size < 2:
        raise DegenerateSampleError("need at least two matched pairs")
    ate = float(np.mean(d))
    se = float(np.std(d, ddof=1) / np.sqrt(d.size))
    if se == 0.0:
        p = 1.0 if ate == 0.0 else 0.0
    else:
        p = float(2.0 * stats.norm.sf(abs(ate) / se))
    match.ate, match.p_value = ate, p
    return ate, p


def run_psm(data: PanelDataset, terms: Optional[Sequence[str]] = None, link: str = "probit",
            k: int = DEFAULT_K) -> MatchResult:
    """Scores on the outcome sample, imputation of gaps, matching and the ATE."""
    if link not in ("probit", "logit"):
        raise SchemaError(f"unknown propensity link {link!r}")
    sample = (data.selection == 1) & ~np.isnan(data.outcome)
    scores, fit = estimate_propensity(data, terms, link, rows=sample)
    scores = np.where(sample, scores, np.nan)
    scores = impute_propensity(scores, data, k, terms, rows=sample)
    match = match_nearest(scores, data, rows=sample)
    match.score_model = fit
    estimate_ate(match)
    return match


def format_ate(ate: float, p_value: float, style: str = "cli") -> str:
    """``ATE -0.439 (p 0.508)`` for the CLI, ``-0.439 (0.508)`` for tables."""
    if style == "table":
        return f"{ate:.3f} ({p_value:.3f})"
    return f"ATE {ate:.3f} (p {p_value:.3f})"
