import copy
import json
import math
from pathlib import Path

import pytest

from countcf.errors import ReportError
from countcf.report import render, render_table4, render_table5

FIXTURES = Path(__file__).resolve().parent / "fixtures"
DOCS = FIXTURES / "documents"
GOLDEN = FIXTURES / "golden"


def load(name):
    return json.loads((DOCS / name).read_text())


@pytest.fixture(scope="module")
def families():
    return load("families.json")


@pytest.fixture(scope="module")
def ladder():
    return load("ladder.json")


@pytest.mark.parametrize("style,source", [
    ("table3", "nb2.json"), ("table4", "families.json"), ("table5", "ladder.json"),
])
def test_golden_files(style, source):
    docs = load(source)
    docs = docs if isinstance(docs, list) else [docs]
    assert render(docs, style) == (GOLDEN / f"{style}.txt").read_text()


def test_rendering_is_repeatable(families):
    assert render(families, "table4") == render(copy.deepcopy(families), "table4")


def test_table4_layout(families):
    text = render_table4(families)
    lines = text.splitlines()
    assert lines[1].split() == ["Variable", "(1)", "nb2", "(2)", "zinb", "(3)", "ztnb"]
    psm = next(line for line in lines if line.startswith("PSM technique"))
    assert psm.split()[-2:] == ["-0.439", "(0.508)"]
    for block in ("Wald test for weak instruments", "Wald chi-square test", "LR test for alpha=0"):
        assert sum(line.startswith(block) for line in lines) == 1
    # the truncated family reports dispersion on the log scale
    assert "log alpha=" in text


def test_table4_irr_cell_from_fixture():
    doc = {"kind": "pipeline", "family": "nb2", "n_persons": 10,
           "main_fit": {"n_obs": 30, "coefficients": []},
           "irr": [{"name": "T", "irr": 0.568, "z": -4.27, "significant": True}]}
    lines = render_table4([doc]).splitlines()
    i = next(k for k, line in enumerate(lines) if line.startswith("Treatment"))
    assert lines[i].split()[-1] == "0.568"
    assert lines[i + 1].split() == ["(4.27)"]


def test_table5_orders_strategies(ladder):
    assert [d["strategy"] for d in ladder] == ["s5", "s4", "s3", "s2", "s1"]
    header = render_table5(ladder).splitlines()[1]
    assert header.split()[1:] == ["(1)", "s1", "(2)", "s2", "(3)", "s3", "(4)", "s4", "(5)", "s5"]


def test_table5_rejects_duplicate_strategies(ladder):
    with pytest.raises(ReportError, match="duplicate"):
        render_table5(ladder + ladder[:1])


def test_control_rows_only_where_estimated(ladder):
    rows = {line.split("  ")[0]: line for line in render_table5(ladder).splitlines()}
    assert "Selection equation residuals" in rows
    # s5 is the only column carrying the selection residual, so the row has one number
    assert len(rows["Selection equation residuals"].split()) == 4


@pytest.mark.parametrize("style", ["table3", "table4", "table5", "montecarlo"])
def test_empty_input(style):
    with pytest.raises(ReportError, match="empty"):
        render([], style)


def test_style_and_document_mismatch(families):
    with pytest.raises(ReportError, match="experiment"):
        render(families[:1], "montecarlo")
    with pytest.raises(ReportError, match="pipeline"):
        render([load("psm.json"), {"kind": "experiment"}], "table4")
    with pytest.raises(ReportError, match="unknown style"):
        render(families, "table9")


def test_montecarlo_table():
    doc = json.loads((FIXTURES / "pilot_confounded.json").read_text())
    text = render([doc], "montecarlo")
    row = next(line for line in text.splitlines() if line.startswith("s5"))
    assert row.split()[1] == str(doc["strategies"]["s5"]["n"])
    target = next(line for line in text.splitlines() if line.startswith("target log IRR"))
    assert float(target.split()[-1]) == pytest.approx(doc["target_log_irr"], abs=5e-4)
    assert math.isfinite(doc["target_log_irr"])
