"""Replication harness: simulate, estimate every strategy, score against the oracle."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from scipy import stats

from .control import (STRATEGIES, XI, XI_S, T_XI, StrategySpec, assemble_strategy,
                      control_columns, fit_reduced_form_treatment, fit_selection_model,
                      implied_effect)
from .dgp import DGPConfig, oracle_effects, oracle_log_irr, simulate_panel
from .errors import CountCFError, SchemaError
from .inference import lr_dispersion, stability_interactions
from .matching import DEFAULT_K, run_psm
from .mle import fit_count

log = logging.getLogger(__name__)

LEVEL = 0.05
CONTROL_TERMS = (XI, T_XI, XI_S)


@dataclass(frozen=True)
class ExperimentSpec:
    """What to estimate in each replication."""

    family: str = "nb2"
    strategies: tuple = STRATEGIES
    psm: bool = True
    psm_link: str = "probit"
    impute_k: int = DEFAULT_K
    lr_test: bool = False
    stability: bool = False
    stability_strategy: str = "s1"

    @classmethod
    def from_mapping(cls, mapping: Optional[Mapping]) -> "ExperimentSpec":
        mapping = dict(mapping or {})
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise SchemaError(f"experiment.{unknown[0]}: unknown key")
        if "strategies" in mapping:
            bad = [s for s in mapping["strategies"] if s not in STRATEGIES]
            if bad:
                raise SchemaError(f"experiment.strategies: unknown strategy {bad[0]!r}")
            mapping["strategies"] = tuple(mapping["strategies"])
        return cls(**mapping)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


def load_experiment(path):
    """Read a config document: DGP keys at top level, optional ``experiment`` block."""
    import yaml

    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, Mapping):
        raise SchemaError("config: top level must be a mapping")
    doc = dict(doc)
    spec = ExperimentSpec.from_mapping(doc.pop("experiment", None))
    return DGPConfig.from_mapping(doc), spec


def _fail(record, key, exc):
    record["failures"][key] = f"{type(exc).__name__}: {exc}"


def run_replication(cfg: DGPConfig, spec: ExperimentSpec, rep: int) -> dict:
    """One replication; failures of individual steps are recorded, not raised."""
    record = {"rep": rep, "failures": {}, "strategies": {}}
    try:
        panel = simulate_panel(cfg, rep)
    except CountCFError as exc:
        _fail(record, "simulate", exc)
        return record
    data = panel.data
    record["oracle"] = oracle_effects(panel)
    target = oracle_log_irr(cfg)
    terms = cfg.model_terms
    crit = stats.norm.isf(LEVEL / 2)

    need_t = any(StrategySpec(s).needs_treatment_stage for s in spec.strategies)
    need_s = any(StrategySpec(s).needs_selection_stage for s in spec.strategies)
    tfit = sfit = None
    if need_t:
        try:
            tfit = fit_reduced_form_treatment(data, terms)
        except CountCFError as exc:
            _fail(record, "treatment_stage", exc)
    if need_s:
        try:
            sfit = fit_selection_model(data, terms)
        except CountCFError as exc:
            _fail(record, "selection_stage", exc)
    controls = control_columns(data, tfit, sfit)

    for sid in spec.strategies:
        s = StrategySpec(sid, spec.family)
        if (s.needs_treatment_stage and tfit is None) or (s.needs_selection_stage and sfit is None):
            record["failures"][sid] = "first stage unavailable"
            continue
        try:
            design, y = assemble_strategy(data, s, tfit, sfit, terms, controls)
            fit = fit_count(design, y, spec.family, data.clusters[design.rows])
            j = fit.index(s.treatment_term)
            est, se = float(fit.coef[j]), float(fit.se[j])
            out = {
                "estimate": est, "se": se, "error": est - target,
                "covered": bool(abs(est - target) <= crit * se),
                "converged": fit.converged,
                "implied": implied_effect(fit, data, controls, s.treatment_term),
                "z": {n: float(fit.z[fit.index(n)]) for n in CONTROL_TERMS if fit.has(n)},
            }
            out["implied_error"] = out["implied"] - record["oracle"]["ate_selected"]
            if spec.lr_test and sid == spec.strategies[0]:
                null = fit_count(design, y, spec.family, data.clusters[design.rows],
                                 zero_dispersion=True)
                record["lr_p"] = lr_dispersion(fit, null).p_value
            record["strategies"][sid] = out
        except CountCFError as exc:
            _fail(record, sid, exc)

    if spec.psm:
        try:
            m = run_psm(data, terms, spec.psm_link, spec.impute_k)
            record["psm"] = {"ate": m.ate, "p_value": m.p_value,
                             "error": m.ate - record["oracle"]["ate_selected"]}
        except CountCFError as exc:
            _fail(record, "psm", exc)
    if spec.stability:
        try:
            res = stability_interactions(data, spec.family, spec.stability_strategy, terms)
            record["stability_p"] = res["test"].p_value
            record["stable"] = res["stable"]
        except CountCFError as exc:
            _fail(record, "stability", exc)
    return record


def _rep_task(args):
    cfg_dict, spec, rep = args
    return run_replication(DGPConfig.from_mapping(cfg_dict), spec, rep)


def _rate(flags):
    flags = [bool(f) for f in flags]
    return sum(flags) / len(flags) if flags else None


def _mean(vals):
    vals = [float(v) for v in vals]
    return math.fsum(vals) / len(vals) if vals else None


def aggregate(records: Sequence[dict], cfg: DGPConfig, spec: ExperimentSpec, reps: int) -> dict:
    """Summary statistics; a pure function of the ordered replication records."""
    records = sorted(records, key=lambda r: r["rep"])
    target = oracle_log_irr(cfg)
    out = {"kind": "experiment", "replications": reps, "target_log_irr": target,
           "config": cfg.to_dict(), "experiment": spec.to_dict()}
    oracles = [r["oracle"] for r in records if "oracle" in r]
    out["oracle"] = {k: _mean(o[k] for o in oracles) for k in ("ate_overall", "ate_selected", "upsilon")}
    strat = {}
    for sid in spec.strategies:
        rs = [r["strategies"][sid] for r in records if sid in r["strategies"]]
        if not rs:
            strat[sid] = {"n": 0}
            continue
        errs = [x["error"] for x in rs]
        entry = {
            "n": len(rs),
            "mean_estimate": _mean(x["estimate"] for x in rs),
            "mean_bias": _mean(errs),
            "rmse": math.sqrt(_mean(e * e for e in errs)),
            "coverage": _rate(x["covered"] for x in rs),
            "mean_implied": _mean(x["implied"] for x in rs),
            "mean_implied_error": _mean(x["implied_error"] for x in rs),
            "rejection": {},
        }
        for name in CONTROL_TERMS:
            zs = [x["z"][name] for x in rs if name in x["z"]]
            if zs:
                entry["rejection"][name] = _rate(abs(z) >= stats.norm.isf(LEVEL / 2) for z in zs)
        strat[sid] = entry
    out["strategies"] = strat
    if spec.psm:
        ps = [r for r in records if "psm" in r]
        out["psm"] = {
            "n": len(ps),
            "mean_ate": _mean(r["psm"]["ate"] for r in ps),
            "mean_bias": _mean(r["psm"]["error"] for r in ps),
            "rmse": math.sqrt(_mean(r["psm"]["error"] ** 2 for r in ps)) if ps else None,
        }
        both = [r for r in ps if "s5" in r["strategies"]]
        if both:
            out["psm"]["worse_than_s5"] = _rate(
                abs(r["psm"]["error"]) > abs(r["strategies"]["s5"]["implied_error"]) for r in both)
    if spec.lr_test:
        out["lr_rejection"] = _rate(r["lr_p"] < LEVEL for r in records if "lr_p" in r)
    if spec.stability:
        out["stability_rejection"] = _rate(r["stability_p"] < LEVEL for r in records
                                           if "stability_p" in r)
        out["stable_share"] = _rate(r["stable"] for r in records if "stable" in r)
    failures = {}
    for r in records:
        for key in r["failures"]:
            failures[key] = failures.get(key, 0) + 1
    out["failures"] = dict(sorted(failures.items()))
    out["failed_replications"] = sum(1 for r in records if r["failures"])
    return out


@dataclass
class ExperimentReport:
    summary: dict
    records: list = field(default_factory=list)
    wall_time: float = 0.0

    def to_json(self, with_records: bool = False) -> str:
        doc = dict(self.summary)
        if with_records:
            doc["records"] = self.records
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def run_experiment(cfg: DGPConfig, reps: int, jobs: int = 1,
                   spec: Optional[ExperimentSpec] = None) -> ExperimentReport:
    """Run ``reps`` replications on ``jobs`` worker processes.

    Replication ``r`` always draws from the stream ``(cfg.seed, r)`` and the
    records are aggregated in replication order, so the summary does not
    depend on ``jobs``.  Wall time is kept out of the summary document.
    """
    if reps < 1:
        raise SchemaError("reps: must be >= 1")
    spec = spec or ExperimentSpec()
    start = time.perf_counter()
    tasks = [(cfg.to_dict(), spec, rep) for rep in range(reps)]
    if jobs <= 1:
        records = [_rep_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_rep_task, tasks, chunksize=max(1, reps // (4 * jobs))))
    wall = time.perf_counter() - start
    log.info("%d replications in %.1fs", reps, wall)
    return ExperimentReport(aggregate(records, cfg, spec, reps), records, wall)
