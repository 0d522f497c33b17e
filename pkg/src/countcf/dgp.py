"""Structural simulator with an unobserved endowment and oracle effects.

Every person draws an endowment ``mu``.  It shifts the treatment propensity,
the chance of being observed, the outcome level and the size of the
treatment effect.  Potential outcomes under both treatment states are kept
as hidden truth so estimators can be scored against the oracle.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import pandas as pd
import yaml
from scipy.special import ndtr

from .data import INTERCEPT, PanelDataset, Schema, emit_table, from_frame
from .errors import SchemaError

FAMILIES = ("nb2", "zinb", "ztnb")
ZERO_REGIMES = ("never_hospitalized", "unobserved")

# covariate draws; proportions follow the descriptive table of the source study
AGE_RANGE = (65, 95)
P_FEMALE = 0.65
P_RURAL = 0.09
CLIENT_GROUPS = ("dementia", "learning", "physical", "frail")  # frail is the reference
P_CLIENT = (0.06, 0.27, 0.17, 0.50)
P_COMORBID = 0.43

COVARIATES = ("age", "female", "rural", "dementia", "learning", "physical", "comorbid")
INSTRUMENTS = ("z_simd", "z_share")
MODEL_TERMS = ("age", "age^2", "female", "rural", "dementia", "learning", "physical", "comorbid")

SCHEMA = Schema(outcome="days", treatment="telecare", selection_indicator="hospital",
                cluster_id="person", time_trend="week", person_id="person",
                covariates=COVARIATES, instruments=INSTRUMENTS)

_DEFAULT_BETA = {INTERCEPT: -0.6, "age": 0.01, "female": -0.1, "rural": 0.1, "dementia": 0.2,
                 "learning": -0.2, "physical": 0.1, "comorbid": 0.3}
_DEFAULT_TREAT = {INTERCEPT: -2.9, "age": 0.03, "female": 0.2, "dementia": 0.3, "comorbid": 0.2}
_DEFAULT_SELECT = {INTERCEPT: 0.7, "comorbid": 0.3, "age": 0.0, "week": -0.05,
                   "z_simd": 0.4, "z_share": -0.3}


@dataclass
class DGPConfig:
    """Parameters of the structural simulator.

    ``selection_params`` is ``None`` for a world where every row is observed;
    it is filled with defaults whenever ``endow_loading_s`` is nonzero.
    ``omega_drift`` adds ``omega_drift * week`` to the treatment effect.
    """

    n_persons: int = 1000
    weeks: int = 5
    census_week: Optional[int] = None
    beta: dict = field(default_factory=lambda: dict(_DEFAULT_BETA))
    omega: float = math.log(0.568)
    omega_drift: float = 0.0
    hetero_scale: float = 0.3
    endowment_sd: float = 1.0
    endow_loading_t: float = 1.0
    endow_loading_s: float = 0.5
    endow_loading_y: float = 0.5
    instrument_strength: tuple = (1.0, 0.8)
    treatment_params: dict = field(default_factory=lambda: dict(_DEFAULT_TREAT))
    selection_params: Optional[dict] = None
    trend_effect: float = -0.02
    family: str = "nb2"
    alpha: float = 1.142
    p_inflate: float = 0.0
    zero_regime: str = "never_hospitalized"
    model_terms: tuple = MODEL_TERMS
    seed: int = 0

    def __post_init__(self):
        if self.census_week is None:
            self.census_week = self.weeks
        if self.selection_params is None and self.endow_loading_s != 0:
            self.selection_params = dict(_DEFAULT_SELECT)
        self.instrument_strength = tuple(float(g) for g in self.instrument_strength)
        self.model_terms = tuple(self.model_terms)
        self.validate()

    def validate(self):
        def fail(path, msg):
            raise SchemaError(f"{path}: {msg}")

        if not isinstance(self.n_persons, int) or self.n_persons < 1:
            fail("n_persons", "must be a positive integer")
        if not isinstance(self.weeks, int) or self.weeks < 1:
            fail("weeks", "must be an integer >= 1")
        if not 1 <= self.census_week <= self.weeks:
            fail("census_week", f"must lie in [1, {self.weeks}]")
        if not self.endowment_sd >= 0:
            fail("endowment_sd", "must be >= 0")
        if self.family not in FAMILIES:
            fail("family", f"must be one of {FAMILIES}")
        if not self.alpha >= 0:
            fail("alpha", "must be >= 0")
        if not 0 <= self.p_inflate < 1:
            fail("p_inflate", "must lie in [0, 1)")
        if self.p_inflate > 0 and self.family != "zinb":
            fail("p_inflate", "structural zeros need family zinb")
        if self.zero_regime not in ZERO_REGIMES:
            fail("zero_regime", f"must be one of {ZERO_REGIMES}")
        if len(self.instrument_strength) != len(INSTRUMENTS):
            fail("instrument_strength", f"needs {len(INSTRUMENTS)} entries")
        allowed = set(COVARIATES) | {INTERCEPT}
        for name, params in (("beta", self.beta), ("treatment_params", self.treatment_params)):
            for key, val in params.items():
                if key not in allowed:
                    fail(f"{name}.{key}", "unknown covariate")
                if not np.isfinite(val):
                    fail(f"{name}.{key}", "must be finite")
        if self.selection_params is not None:
            for key, val in self.selection_params.items():
                if key not in allowed | set(INSTRUMENTS) | {"week"}:
                    fail(f"selection_params.{key}", "unknown variable")
                if not np.isfinite(val):
                    fail(f"selection_params.{key}", "must be finite")

    @property
    def selection_free(self) -> bool:
        return self.selection_params is None

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "DGPConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise SchemaError(f"{unknown[0]}: unknown configuration key")
        kwargs = dict(mapping)
        for key in ("beta", "treatment_params", "selection_params"):
            if key in kwargs and kwargs[key] is not None:
                if not isinstance(kwargs[key], Mapping):
                    raise SchemaError(f"{key}: must be a mapping")
                kwargs[key] = {str(k): float(v) for k, v in kwargs[key].items()}
        for key, typ in (("n_persons", int), ("weeks", int), ("seed", int)):
            if key in kwargs and not isinstance(kwargs[key], int):
                raise SchemaError(f"{key}: must be an integer")
        for key in ("omega", "omega_drift", "hetero_scale", "endowment_sd", "endow_loading_t",
                    "endow_loading_s", "endow_loading_y", "trend_effect", "alpha", "p_inflate"):
            if key in kwargs:
                try:
                    kwargs[key] = float(kwargs[key])
                except (TypeError, ValueError):
                    raise SchemaError(f"{key}: must be a number") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "DGPConfig":
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        if doc is None:
            doc = {}
        if not isinstance(doc, Mapping):
            raise SchemaError("config: top level must be a mapping")
        return cls.from_mapping(doc)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else copy.deepcopy(val)
        return out

    def replace(self, **changes) -> "DGPConfig":
        doc = self.to_dict()
        if "weeks" in changes and "census_week" not in changes:
            doc["census_week"] = None
        doc.update(changes)
        return DGPConfig.from_mapping(doc)


def paper_like_config(**changes) -> DGPConfig:
    """Confounded world at the magnitudes of the source study's main model."""
    return DGPConfig().replace(**changes) if changes else DGPConfig()


def clean_config(**changes) -> DGPConfig:
    """Exogenous, selection-free world: no endowment and no selection."""
    base = dict(endowment_sd=0.0, endow_loading_t=0.0, endow_loading_s=0.0,
                endow_loading_y=0.0, hetero_scale=0.0, selection_params=None)
    base.update(changes)
    return DGPConfig().replace(**base)


@dataclass
class SimulatedPanel:
    """Observed panel plus hidden truth aligned row by row."""

    data: PanelDataset
    mu: np.ndarray          # per row (constant within person)
    y0: np.ndarray
    y1: np.ndarray
    p_treat: np.ndarray
    p_select: np.ndarray
    structural_zero: np.ndarray
    config: DGPConfig

    def truth_frame(self) -> pd.DataFrame:
        f = self.data.frame
        return pd.DataFrame({
            "person": f[self.data.schema.person_id].astype(str),
            "week": f[self.data.schema.time_trend].astype(int),
            "mu": self.mu, "y0": self.y0, "y1": self.y1,
            "p_treat": self.p_treat, "p_select": self.p_select,
            "structural_zero": self.structural_zero.astype(int),
        })

    def export(self, out_dir) -> dict:
        """Write ``panel.csv``, ``truth.csv`` and ``schema.json``; returns the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"panel": out / "panel.csv", "truth": out / "truth.csv", "schema": out / "schema.json"}
        emit_table(self.data, paths["panel"])
        tf = self.truth_frame()
        with open(paths["truth"], "w", newline="", encoding="utf-8") as fh:
            fh.write(",".join(tf.columns) + "\n")
            for row in tf.itertuples(index=False, name=None):
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
        meta = {"schema": self.data.schema.to_dict(), "weeks": self.data.weeks,
                "census_week": self.data.census_week, "model_terms": list(self.config.model_terms)}
        paths["schema"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return {k: str(v) for k, v in paths.items()}


def replication_rng(seed: int, rep: int = 0) -> np.random.Generator:
    """Independent stream for replication ``rep`` of experiment ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(rep,)))


def _linear(params: Mapping, cols: Mapping, n: int) -> np.ndarray:
    out = np.full(n, float(params.get(INTERCEPT, 0.0)))
    for name, coef in params.items():
        if name != INTERCEPT:
            out = out + coef * cols[name]
    return out


def _draw_counts(rng, lam, alpha, family, nu):
    """Poisson-gamma draws; ``nu`` is the mean-one gamma frailty."""
    y = rng.poisson(lam * nu)
    if family == "ztnb":
        zero = np.flatnonzero(y == 0)
        while zero.size:
            nu_new = rng.gamma(1.0 / alpha, alpha, zero.size) if alpha > 0 else np.ones(zero.size)
            y[zero] = rng.poisson(lam[zero] * nu_new)
            zero = zero[y[zero] == 0]
    return y


def simulate_panel(cfg: DGPConfig, rep: int = 0, rng: Optional[np.random.Generator] = None) -> SimulatedPanel:
    """Draw one panel of ``n_persons * weeks`` rows."""
    rng = rng if rng is not None else replication_rng(cfg.seed, rep)
    P, W = cfg.n_persons, cfg.weeks
    n = P * W

    # person level
    mu_p = rng.normal(0.0, 1.0, P) * cfg.endowment_sd
    age = rng.integers(AGE_RANGE[0], AGE_RANGE[1] + 1, P).astype(float)
    female = (rng.random(P) < P_FEMALE).astype(float)
    rural = (rng.random(P) < P_RURAL).astype(float)
    group = rng.choice(len(CLIENT_GROUPS), size=P, p=P_CLIENT)
    comorbid = (rng.random(P) < P_COMORBID).astype(float)
    z = rng.normal(size=(P, len(INSTRUMENTS)))

    person = np.repeat(np.arange(1, P + 1), W)
    week = np.tile(np.arange(1, W + 1), P).astype(float)
    cols = {"age": age, "female": female, "rural": rural, "comorbid": comorbid}
    for j, g in enumerate(CLIENT_GROUPS[:-1]):
        cols[g] = (group == j).astype(float)
    cols = {k: np.repeat(v, W) for k, v in cols.items()}
    for j, name in enumerate(INSTRUMENTS):
        cols[name] = np.repeat(z[:, j], W)
    cols["week"] = week
    mu = np.repeat(mu_p, W)

    # treatment: one take-up decision per person, held across weeks
    t_index = (_linear(cfg.treatment_params, cols, n)
               + sum(g * cols[name] for g, name in zip(cfg.instrument_strength, INSTRUMENTS))
               + cfg.endow_loading_t * mu)
    e_t = np.repeat(rng.normal(size=P), W)
    T = (t_index + e_t > 0).astype(int)
    t_scale = math.sqrt(1.0 + (cfg.endow_loading_t * cfg.endowment_sd) ** 2)
    # true propensity given observables, with mu integrated out
    p_treat = ndtr((t_index - cfg.endow_loading_t * mu) / t_scale)

    # selection
    if cfg.selection_free:
        sel = np.ones(n, dtype=int)
        p_select = np.ones(n)
    else:
        s_index = _linear(cfg.selection_params, cols, n) + cfg.endow_loading_s * mu
        sel = (s_index + rng.normal(size=n) > 0).astype(int)
        s_scale = math.sqrt(1.0 + (cfg.endow_loading_s * cfg.endowment_sd) ** 2)
        p_select = ndtr((s_index - cfg.endow_loading_s * mu) / s_scale)

    # potential outcomes share the gamma frailty
    trend1 = cfg.census_week - week
    base = _linear(cfg.beta, cols, n) + cfg.endow_loading_y * mu + cfg.trend_effect * trend1
    effect = cfg.omega + cfg.hetero_scale * mu + cfg.omega_drift * week
    if cfg.alpha > 0:
        nu = rng.gamma(1.0 / cfg.alpha, cfg.alpha, n)
    else:
        nu = np.ones(n)
    y0 = _draw_counts(rng, np.exp(base), cfg.alpha, cfg.family, nu)
    y1 = _draw_counts(rng, np.exp(base + effect), cfg.alpha, cfg.family, nu)
    structural = np.zeros(n, dtype=bool)
    if cfg.family == "zinb" and cfg.p_inflate > 0:
        structural = rng.random(n) < cfg.p_inflate
        y0 = np.where(structural, 0, y0)
        y1 = np.where(structural, 0, y1)
        if cfg.zero_regime == "unobserved":
            sel = np.where(structural, 0, sel)
    y = np.where(T == 1, y1, y0)

    frame = pd.DataFrame({
        "person": person.astype(str), "week": week.astype(int), "hospital": sel,
        "days": pd.array(np.where(sel == 1, y, 0), dtype="Int64"), "telecare": T,
    })
    frame.loc[sel == 0, "days"] = pd.NA
    for name in COVARIATES + INSTRUMENTS:
        frame[name] = cols[name]
    data = from_frame(frame, SCHEMA, weeks=W, census_week=cfg.census_week)
    return SimulatedPanel(data, mu, y0.astype(float), y1.astype(float), p_treat, p_select,
                          structural, cfg)


def oracle_effects(panel: SimulatedPanel) -> dict:
    """Sample ATEs from the hidden potential outcomes and the baseline gap ``upsilon``."""
    d = panel.y1 - panel.y0
    sel = panel.data.selection == 1
    T = panel.data.treatment
    y0 = panel.y0
    upsilon = float(np.mean(y0[T == 1]) - np.mean(y0[T == 0])) if 0 < T.sum() < T.size else float("nan")
    return {
        "ate_overall": float(np.mean(d)),
        "ate_selected": float(np.mean(d[sel])) if sel.any() else float("nan"),
        "upsilon": upsilon,
    }


def oracle_log_irr(cfg: DGPConfig) -> float:
    """Population log ratio of mean potential outcomes, log E[Y(1)] / E[Y(0)].

    With a normal endowment the multiplicative heterogeneity contributes
    ``h * sd^2 * (c_Y + h / 2)``; it reduces to ``omega`` when ``h = 0``.
    The drift term is averaged over the weeks.
    """
    s2 = cfg.endowment_sd ** 2
    drift = cfg.omega_drift * (cfg.weeks + 1) / 2.0
    return float(cfg.omega + cfg.hetero_scale * s2 * (cfg.endow_loading_y + cfg.hetero_scale / 2.0)
                 + drift)
