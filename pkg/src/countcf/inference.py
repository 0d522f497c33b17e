"""Post-estimation statistics on fitted models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .data import INTERCEPT, PanelDataset, _parse_term, evaluate_terms, term_name
from .distributions import std_normal
from .errors import FitError, SchemaError
from .mle import FitResult

SIGNIFICANCE = 0.05
IRR_TOLERANCE = 0.01  # |IRR - 1| below this per trend unit counts as "about one"


@dataclass(frozen=True)
class TestResult:
    """Outcome of a hypothesis test; ``dof`` may be a mixture tag."""

    __test__ = False  # not a pytest class

    statistic: float
    dof: Union[int, str]
    p_value: float
    restriction: tuple

    def to_dict(self) -> dict:
        return {"statistic": float(self.statistic), "dof": self.dof,
                "p_value": float(self.p_value), "restriction": list(self.restriction)}

    def rejects(self, level: float = SIGNIFICANCE) -> bool:
        return self.p_value < level


def incidence_rate_ratios(fit: FitResult, level: float = SIGNIFICANCE) -> dict:
    """``{name: (irr, z, significant)}`` for the mean-equation coefficients.

    The z statistic is the coefficient's; exponentiation leaves it unchanged.
    """
    crit = stats.norm.isf(level / 2.0)
    out = {}
    z = fit.z
    for i, name in enumerate(fit.design_names):
        zi = float(z[i])
        out[name] = (float(np.exp(fit.coef[i])), zi, bool(abs(zi) >= crit))
    return out


def irr_table(fit: FitResult) -> list:
    """Serializable IRR rows."""
    return [{"name": n, "irr": irr, "z": z, "significant": sig}
            for n, (irr, z, sig) in incidence_rate_ratios(fit).items()]


def wald_joint(fit: FitResult, restriction: Sequence[str]) -> TestResult:
    """Wald test that the named coefficients are jointly zero."""
    names = list(restriction)
    if not names:
        raise SchemaError("empty restriction")
    missing = [n for n in names if not fit.has(n)]
    if missing:
        raise SchemaError(f"coefficients not in the fit: {missing}")
    idx = [fit.index(n) for n in names]
    b = fit.coef[idx]
    V = fit.vcov[np.ix_(idx, idx)]
    if np.allclose(b, 0.0, atol=0.0):
        return TestResult(0.0, len(idx), 1.0, tuple(names))
    w = np.linalg.eigvalsh(V)
    if w.min() <= 1e-12 * max(w.max(), np.finfo(float).tiny):
        raise FitError("singular covariance submatrix in Wald test")
    stat = float(b @ np.linalg.solve(V, b))
    return TestResult(stat, len(idx), float(stats.chi2.sf(stat, len(idx))), tuple(names))


def lr_dispersion(fit_nb: FitResult, fit_pois: FitResult) -> TestResult:
    """LR test of alpha = 0 against the half-chi-square(0) / half-chi-square(1) mixture."""
    if fit_nb.n_obs != fit_pois.n_obs:
        raise FitError("dispersion LR test needs fits on the same observations")
    lr = 2.0 * (fit_nb.loglik - fit_pois.loglik)
    if lr < -1e-6:
        raise FitError(f"nesting violated: restricted model fits better by {-lr / 2:.3g}")
    lr = max(lr, 0.0)
    p = 0.5 * float(stats.chi2.sf(lr, 1)) if lr > 0 else 0.5
    return TestResult(lr, "0.5*chi2(0)+0.5*chi2(1)", p, ("lnalpha",))


def _binary(values) -> bool:
    v = values[~np.isnan(values)]
    return bool(np.isin(v, (0.0, 1.0)).all() and np.unique(v).size == 2)


def average_marginal_effects(fit: FitResult, data: PanelDataset,
                             linked_terms: Optional[Mapping[str, Sequence[str]]] = None,
                             extra: Optional[Mapping] = None) -> dict:
    """Probit AMEs keyed by base variable, plus raw rows for higher-order terms.

    Continuous variables chain through every term containing them (squares,
    interactions); 0/1 variables use the mean discrete difference.  Each
    entry is ``(ame, z)`` with ``z`` taken from the variable's own coefficient.
    """
    if fit.family != "probit":
        raise FitError("average marginal effects are implemented for probit fits")
    names = list(fit.design_names)
    for base, linked in (linked_terms or {}).items():
        for t in linked:
            if term_name(t) not in names:
                raise SchemaError(f"linked term {t!r} of {base!r} is not in the fit")
    rows = fit.rows
    X = evaluate_terms(data, names, rows, extra)
    b = fit.beta
    xb = X @ b
    pdf = std_normal(xb)[0]
    z = fit.z
    parsed = {n: dict(_parse_term(n)) for n in names if n != INTERCEPT}
    bases = []
    for n in names:
        if n == INTERCEPT:
            continue
        for var in parsed[n]:
            if var not in bases:
                bases.append(var)

    def lookup(var):
        if extra and var in extra:
            return np.asarray(extra[var], dtype=float)[rows]
        return evaluate_terms(data, [var], rows, extra)[:, 0]

    out = {}
    for var in bases:
        own = names.index(var) if var in names else None
        zv = float(z[own]) if own is not None else float("nan")
        v = lookup(var)
        using = [n for n in parsed if var in parsed[n]]
        if _binary(v):
            X1, X0 = X.copy(), X.copy()
            for n in using:
                j = names.index(n)
                rest = np.ones(rows.size)
                for other, p in parsed[n].items():
                    if other != var:
                        rest = rest * lookup(other) ** p
                X1[:, j] = rest
                X0[:, j] = 0.0
            ame = float(np.mean(std_normal(X1 @ b)[1] - std_normal(X0 @ b)[1]))
        else:
            deriv = np.zeros(rows.size)
            for n in using:
                j = names.index(n)
                d = np.full(rows.size, float(parsed[n][var]))
                for other, p in parsed[n].items():
                    if other == var:
                        d = d * v ** (p - 1)
                    else:
                        d = d * lookup(other) ** p
                deriv += b[j] * d
            ame = float(np.mean(pdf * deriv))
        out[var] = (ame, zv)
    # higher-order terms reported as if they were separate regressors
    for n in parsed:
        if n not in out and (len(parsed[n]) > 1 or any(p != 1 for p in parsed[n].values())):
            j = names.index(n)
            out[n] = (float(np.mean(pdf) * b[j]), float(z[j]))
    return out


def stability_interactions(data: PanelDataset, family: str = "nb2", strategy: str = "s5",
                           terms: Optional[Sequence[str]] = None, trend: str = "t1",
                           level: float = SIGNIFICANCE) -> dict:
    """Refit with every covariate and the treatment interacted with the trend.

    Returns the joint Wald test on the interactions, their IRRs, and
    ``stable``: the interactions are jointly insignificant or all IRRs lie
    within ``IRR_TOLERANCE`` of one.
    """
    from .control import (StrategySpec, control_columns, covariate_terms,
                          fit_reduced_form_treatment, fit_selection_model)
    from .data import build_design
    from .mle import fit_count

    spec = StrategySpec(strategy, family)
    base = list(covariate_terms(data, terms))
    tfit = fit_reduced_form_treatment(data, terms) if spec.needs_treatment_stage else None
    sfit = fit_selection_model(data, terms) if spec.needs_selection_stage else None
    controls = control_columns(data, tfit, sfit)
    inter = [term_name(f"{t}*{trend}") for t in base + [spec.treatment_term]]
    rhs = base + list(spec.derived_terms)
    if trend not in rhs:
        rhs.append(trend)
    design = build_design(data, rhs + inter, rows=data.selection == 1, extra=controls.as_extra())
    y = data.outcome[design.rows]
    fit = fit_count(design, y, family, data.clusters[design.rows])
    kept = [n for n in inter if n in design.names]
    test = wald_joint(fit, kept)
    irrs = {n: incidence_rate_ratios(fit, level)[n] for n in kept}
    stable = (not test.rejects(level)) or all(abs(v[0] - 1.0) <= IRR_TOLERANCE for v in irrs.values())
    return {"test": test, "irr": irrs, "stable": bool(stable), "fit": fit}
