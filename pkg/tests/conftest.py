import numpy as np
import pandas as pd
import pytest

from countcf.data import Schema, from_frame
from countcf.dgp import clean_config, paper_like_config, simulate_panel

SMALL_SCHEMA = Schema(outcome="y", treatment="T", selection_indicator="I", cluster_id="pid",
                      time_trend="week", person_id="pid", covariates=("age", "female"),
                      instruments=("z",))


def small_panel(rows, weeks=52, schema=SMALL_SCHEMA):
    """Build a panel from a list of dicts keyed by the small schema's columns."""
    frame = pd.DataFrame(rows)
    return from_frame(frame, schema, weeks=weeks)


def base_rows(n=3):
    return [dict(pid=f"p{i}", week=1, I=1, y=i, T=i % 2, age=70.0 + i, female=float(i % 2),
                 z=0.1 * i) for i in range(n)]


@pytest.fixture
def schema():
    return SMALL_SCHEMA


@pytest.fixture(scope="session")
def confounded_panel():
    return simulate_panel(paper_like_config(seed=7))


@pytest.fixture(scope="session")
def clean_panel():
    return simulate_panel(clean_config(seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -------------------------------------------------------

# (criterion, part) -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def record(criterion, part, ok, detail):
    ACCEPTANCE[(criterion, part)] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted({c for c, _ in ACCEPTANCE}):
        parts = [(p, *ACCEPTANCE[(c, p)]) for c, p in ACCEPTANCE if c == n]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{p}: {'ok' if ok else 'FAIL'} {d}" for p, ok, d in parts)
        terminalreporter.write_line(f"criterion {n:>2} {verdict}  {detail}")
