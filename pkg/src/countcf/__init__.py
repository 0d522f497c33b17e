"""Count-data treatment effects with control functions for endogeneity and selection.

Negative binomial family models (NB2, zero-inflated, zero-truncated) fitted by
maximum likelihood, a two-stage residual inclusion pipeline, a propensity
score matching baseline and a structural simulator for Monte Carlo checks.
"""

__version__ = "0.1.0"

from .control import PipelineResult, StrategySpec, run_2sri_pipeline
from .data import DesignMatrix, PanelDataset, Schema, build_design, emit_table, ingest_table
from .dgp import DGPConfig, SimulatedPanel, oracle_effects, simulate_panel
from .distributions import CountFamily, count_logpmf
from .errors import CountCFError
from .mle import FitResult, fit_binary, fit_count
from .matching import MatchResult, run_psm

__all__ = [
    "CountCFError", "CountFamily", "DGPConfig", "DesignMatrix", "FitResult", "MatchResult",
    "PanelDataset", "PipelineResult", "Schema", "SimulatedPanel", "StrategySpec",
    "build_design", "count_logpmf", "emit_table", "fit_binary", "fit_count", "ingest_table",
    "oracle_effects", "run_2sri_pipeline", "run_psm", "simulate_panel",
]
