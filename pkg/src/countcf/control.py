"""Two-stage residual inclusion for endogenous treatment and sample selection.

First stages are probits of treatment and of the selection indicator on the
covariates, instruments and the week trend.  Their generalized residuals are
added to the count model together with the treatment interaction, the
selection flag and the weeks-before-census trend.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import INTERCEPT, PanelDataset, _parse_term, build_design, evaluate_terms
from .distributions import log_ndtr, mills_ratio
from .errors import (CountCFError, DegenerateSampleError, FitError, SchemaError,
                     StageError)
from .mle import FitResult, fit_binary, fit_count

STRATEGIES = ("s1", "s2", "s3", "s4", "s5")

# derived-column names used in every main-equation design
TREAT = "T"
TREAT_HAT = "T_hat"
XI = "xi"
T_XI = "T*xi"
XI_S = "xi_s"
SEL = "I"
TREND1 = "t1"

_STRATEGY_TERMS = {
    "s1": (TREAT,),
    "s2": (TREAT_HAT, TREND1),
    "s3": (TREAT, TREND1, XI),
    "s4": (TREAT, TREND1, XI, T_XI),
    "s5": (TREAT, TREND1, XI, T_XI, XI_S, SEL),
}


@dataclass(frozen=True)
class StrategySpec:
    """One rung of the estimation ladder s1..s5 for a given count family."""

    id: str = "s5"
    family: str = "nb2"

    def __post_init__(self):
        if self.id not in STRATEGIES:
            raise SchemaError(f"unknown strategy {self.id!r}")

    @property
    def derived_terms(self):
        return _STRATEGY_TERMS[self.id]

    @property
    def needs_treatment_stage(self):
        return self.id != "s1"

    @property
    def needs_selection_stage(self):
        return self.id == "s5"

    @property
    def treatment_term(self):
        return TREAT_HAT if self.id == "s2" else TREAT


@dataclass(frozen=True)
class ControlColumns:
    """Full-length derived columns (NaN where a stage did not cover a row)."""

    xi: np.ndarray
    t_xi: np.ndarray
    xi_s: Optional[np.ndarray]
    i_flag: np.ndarray
    trend: np.ndarray
    trend1: np.ndarray
    t_hat: np.ndarray

    def as_extra(self) -> dict:
        out = {XI: self.xi, TREAT_HAT: self.t_hat}
        if self.xi_s is not None:
            out[XI_S] = self.xi_s
        return out


def covariate_terms(data: PanelDataset, terms: Optional[Sequence[str]] = None):
    return tuple(terms) if terms is not None else tuple(data.schema.covariates)


def _first_stage_rows(data: PanelDataset, terms, outcome_name):
    names = {n for t in terms for n, _ in _parse_term(t)}
    names |= set(data.schema.instruments) | {data.schema.time_trend}
    mask = data.complete(sorted(names))
    return mask & ~np.isnan(data.values(outcome_name))


def _probit(data: PanelDataset, outcome_name: str, terms, link="probit") -> FitResult:
    data.schema.require_instruments()
    rhs = list(terms) + list(data.schema.instruments) + [data.schema.time_trend]
    rows = _first_stage_rows(data, terms, outcome_name)
    design = build_design(data, rhs, rows=rows)
    y = data.values(outcome_name)[design.rows]
    if y.size == 0 or y.min() == y.max():
        raise DegenerateSampleError(f"{outcome_name} takes a single value on the first-stage sample")
    return fit_binary(design, y, link, cluster=data.clusters[design.rows])


def fit_reduced_form_treatment(data: PanelDataset, terms: Optional[Sequence[str]] = None) -> FitResult:
    """Probit of treatment on covariates, instruments and week, on all complete rows."""
    return _probit(data, data.schema.treatment, covariate_terms(data, terms))


def fit_selection_model(data: PanelDataset, terms: Optional[Sequence[str]] = None) -> FitResult:
    """Probit of the selection indicator on covariates, instruments and week."""
    return _probit(data, data.schema.selection_indicator, covariate_terms(data, terms))


def generalized_residuals(fit: FitResult, indicator) -> np.ndarray:
    """phi/Phi on indicator == 1 rows and -phi/(1 - Phi) on indicator == 0 rows."""
    if fit.family != "probit":
        raise FitError(f"generalized residuals need a probit fit, got {fit.family!r}")
    eta = np.asarray(fit.linear_predictor, dtype=float)
    ind = np.asarray(indicator, dtype=float)
    if ind.shape != eta.shape:
        raise ValueError("indicator is not aligned with the fit's linear predictor")
    return np.where(ind == 1, mills_ratio(eta), -mills_ratio(-eta))


def _full_length(n, rows, values):
    out = np.full(n, np.nan)
    out[rows] = values
    return out


def control_columns(data: PanelDataset, tfit: Optional[FitResult],
                    sfit: Optional[FitResult]) -> ControlColumns:
    n = len(data)
    T = data.treatment
    if tfit is not None:
        xi = _full_length(n, tfit.rows, generalized_residuals(tfit, T[tfit.rows]))
        t_hat = _full_length(n, tfit.rows, np.exp(log_ndtr(tfit.linear_predictor)))
    else:
        xi = np.full(n, np.nan)
        t_hat = np.full(n, np.nan)
    xi_s = None
    if sfit is not None:
        xi_s = _full_length(n, sfit.rows, generalized_residuals(sfit, data.selection[sfit.rows]))
    return ControlColumns(xi=xi, t_xi=T * xi, xi_s=xi_s, i_flag=data.selection,
                          trend=data.week, trend1=data.trend1(), t_hat=t_hat)


def assemble_strategy(data: PanelDataset, spec: StrategySpec, tfit: Optional[FitResult] = None,
                      sfit: Optional[FitResult] = None, terms: Optional[Sequence[str]] = None,
                      controls: Optional[ControlColumns] = None):
    """Design matrix and outcome for one strategy on the selected rows."""
    if spec.needs_treatment_stage and tfit is None:
        raise SchemaError(f"strategy {spec.id} needs the treatment first stage")
    if spec.needs_selection_stage and sfit is None:
        raise SchemaError(f"strategy {spec.id} needs the selection first stage")
    controls = controls or control_columns(data, tfit, sfit)
    rhs = list(covariate_terms(data, terms)) + list(spec.derived_terms)
    design = build_design(data, rhs, rows=data.selection == 1, extra=controls.as_extra())
    y = data.outcome[design.rows]
    return design, y


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class PipelineResult:
    strategy: str
    family: str
    main_fit: FitResult
    tfit: Optional[FitResult] = None
    sfit: Optional[FitResult] = None
    derived: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "kind": "pipeline",
            "strategy": self.strategy,
            "family": self.family,
            "main_fit": self.main_fit.to_dict(),
            "treatment_stage": self.tfit.to_dict() if self.tfit else None,
            "selection_stage": self.sfit.to_dict() if self.sfit else None,
            "derived_columns": self.derived,
            "n_persons": self.stats.get("n_persons"),
        }
        out.update({k: v for k, v in self.stats.items() if k != "n_persons"})
        return out


_PROVENANCE = {
    TREAT: "observed treatment",
    TREAT_HAT: "fitted treatment probability from the treatment probit",
    XI: "generalized residual of the treatment probit",
    T_XI: "treatment x treatment residual",
    XI_S: "generalized residual of the selection probit",
    SEL: "selection indicator (dropped when constant)",
    TREND1: "census week minus week",
}


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except CountCFError as exc:
        raise StageError(name, exc) from exc


def run_2sri_pipeline(data: PanelDataset, family: str = "nb2", strategy: str = "s5",
                      terms: Optional[Sequence[str]] = None,
                      inflation_terms: Optional[Sequence[str]] = None,
                      with_tests: bool = True) -> PipelineResult:
    """Treatment probit -> selection probit -> augmented count model.

    Errors from each stage are re-raised as ``StageError`` tagged with the
    stage name.  With ``with_tests`` the IRRs, joint Wald test and the
    dispersion LR test are attached to ``stats``.
    """
    from . import inference  # local: inference builds on this module's fits

    spec = StrategySpec(strategy, family)
    tfit = sfit = None
    if spec.needs_treatment_stage:
        tfit = _stage("treatment", fit_reduced_form_treatment, data, terms)
    if spec.needs_selection_stage:
        sfit = _stage("selection", fit_selection_model, data, terms)
    controls = control_columns(data, tfit, sfit)

    def main():
        design, y = assemble_strategy(data, spec, tfit, sfit, terms, controls)
        cluster = data.clusters[design.rows]
        infl = None
        if family == "zinb":
            iterms = inflation_terms if inflation_terms is not None else [
                t for t in design.names if t != INTERCEPT]
            infl = build_design(data, iterms, rows=data.selection == 1, extra=controls.as_extra())
            if not np.array_equal(infl.rows, design.rows):
                raise SchemaError("inflation design covers different rows than the count design")
        return design, y, cluster, infl, fit_count(design, y, family, cluster, infl)

    design, y, cluster, infl, fit = _stage("main", main)
    derived = {name: _PROVENANCE[name] for name in spec.derived_terms}
    for name, reason in design.dropped_columns:
        derived.setdefault(name, "")
        derived[name] += f" [omitted: {reason}]"
    result = PipelineResult(spec.id, family, fit, tfit, sfit, derived)
    pid = data.frame[data.schema.person_id].astype(str).to_numpy()
    result.stats["n_persons"] = int(np.unique(pid[design.rows]).size)

    if with_tests:
        def tests():
            stats = {"irr": inference.irr_table(fit)}
            slopes = [n for n in design.names if n != INTERCEPT]
            stats["wald_model"] = inference.wald_joint(fit, slopes).to_dict()
            if family != "poisson":
                null = fit_count(design, y, family, cluster, infl, zero_dispersion=True)
                stats["lr_dispersion"] = inference.lr_dispersion(fit, null).to_dict()
            if tfit is not None:
                stats["wald_instruments"] = inference.wald_joint(
                    tfit, list(data.schema.instruments)).to_dict()
            if sfit is not None:
                stats["wald_instruments_selection"] = inference.wald_joint(
                    sfit, list(data.schema.instruments)).to_dict()
            return stats
        result.stats.update(_stage("tests", tests))
    return result


def implied_effect(fit: FitResult, data: PanelDataset, controls: ControlColumns,
                   treatment_term: str = TREAT) -> float:
    """Average change in the fitted mean when treatment switches 0 -> 1.

    Averaged over the fit's estimation rows, holding every control column at
    its observed value; the interaction ``T*xi`` follows the treatment.
    """
    rows = fit.rows
    X1 = _evaluate_names(fit.design_names, data, controls, rows, treatment_term, 1.0)
    X0 = _evaluate_names(fit.design_names, data, controls, rows, treatment_term, 0.0)
    b = fit.beta
    mu1, mu0 = np.exp(X1 @ b), np.exp(X0 @ b)
    if fit.family in ("zinb", "zip"):
        gi = [i for i, n in enumerate(fit.names) if n.startswith("inflate:")]
        inames = [fit.names[i][len("inflate:"):] for i in gi]
        Z1 = _evaluate_names(inames, data, controls, rows, treatment_term, 1.0)
        Z0 = _evaluate_names(inames, data, controls, rows, treatment_term, 0.0)
        g = fit.coef[gi]
        mu1 = mu1 * (1.0 - expit(Z1 @ g))
        mu0 = mu0 * (1.0 - expit(Z0 @ g))
    return float(np.mean(mu1 - mu0))


def _evaluate_names(names, data, controls, rows, treatment_term, value):
    extra = controls.as_extra()
    extra[treatment_term] = np.full(len(data), value)
    return evaluate_terms(data, names, rows, extra)
