import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from countcf.data import (INTERCEPT, Schema, VariableRole, build_design, describe,
                          emit_table, evaluate_terms, from_frame, ingest_table)
from countcf.errors import ConsistencyError, DegenerateSampleError, SchemaError

from conftest import SMALL_SCHEMA, base_rows, small_panel

HEADER = "pid,week,I,y,T,age,female,z\n"


def test_three_row_ingestion():
    text = HEADER + "a,1,1,0,1,70,1,0.5\nb,1,1,3,0,80,0,0.1\nc,2,1,1,1,90,1,-0.2\n"
    data = ingest_table(io.StringIO(text), SMALL_SCHEMA)
    assert len(data) == 3 and data.rejected == ()
    np.testing.assert_array_equal(data.outcome, [0, 3, 1])
    assert data.n_persons == 3


def test_unselected_row_with_empty_outcome_is_missing():
    text = HEADER + "a,1,0,,1,70,1,0.5\n"
    data = ingest_table(io.StringIO(text), SMALL_SCHEMA)
    assert np.isnan(data.outcome[0])


def test_outcome_on_unselected_row_names_person_and_week():
    text = HEADER + "a,1,1,2,1,70,1,0.5\nb,7,0,5,0,80,0,0.1\n"
    with pytest.raises(ConsistencyError, match=r"person b, week 7"):
        ingest_table(io.StringIO(text), SMALL_SCHEMA)


def test_missing_column_is_named():
    text = "pid,week,I,y,T,age,female\na,1,1,0,1,70,1\n"
    with pytest.raises(SchemaError, match="'z'"):
        ingest_table(io.StringIO(text), SMALL_SCHEMA)


def test_unparseable_rows_are_reported():
    text = HEADER + "a,1,1,0,1,70,1,0.5\nb,x,1,3,0,80,0,0.1\nc,2,1,1.5,1,90,1,0.2\n"
    data = ingest_table(io.StringIO(text), SMALL_SCHEMA)
    assert len(data) == 1
    assert [line for line, _ in data.rejected] == [3, 4]


def test_quoted_fields_are_allowed():
    text = HEADER + '"a,1",1,1,0,1,70,1,0.5\n'
    data = ingest_table(io.StringIO(text), SMALL_SCHEMA)
    assert data.frame["pid"].iloc[0] == "a,1"


@pytest.mark.parametrize("mutate,err", [
    (lambda r: r.update(week=53), ConsistencyError),
    (lambda r: r.update(y=pd.NA), ConsistencyError),
    (lambda r: r.update(T=2), SchemaError),
    (lambda r: r.update(y=-1), SchemaError),
])
def test_row_invariants(mutate, err):
    rows = base_rows()
    mutate(rows[1])
    with pytest.raises(err):
        small_panel(rows)


def test_duplicate_person_week_rejected():
    rows = base_rows()
    rows[1]["pid"] = rows[0]["pid"]
    with pytest.raises(ConsistencyError, match="duplicate"):
        small_panel(rows)


def test_week_count_is_configurable():
    rows = base_rows()
    rows[0]["week"] = 5
    with pytest.raises(ConsistencyError):
        small_panel(rows, weeks=4)
    assert small_panel(rows, weeks=5).weeks == 5


def test_schema_mapping_requires_single_roles():
    good = SMALL_SCHEMA.to_dict()
    assert Schema.from_mapping(good) == SMALL_SCHEMA
    bad = dict(good)
    del bad["outcome"]
    with pytest.raises(SchemaError, match="outcome"):
        Schema.from_mapping(bad)
    with pytest.raises(SchemaError, match="unknown"):
        Schema.from_mapping({**good, "colour": "x"})
    assert VariableRole("selection_indicator") is VariableRole.SELECTION


def test_instruments_required_for_control_function():
    s = Schema.from_mapping({**SMALL_SCHEMA.to_dict(), "instrument": []})
    with pytest.raises(SchemaError):
        s.require_instruments()


def test_round_trip_is_exact():
    rows = base_rows(6)
    rows[2].update(I=0, y=pd.NA)
    rows[3].update(T=pd.NA)
    rows[4].update(age=1.0 / 3.0)
    data = small_panel(rows)
    back = ingest_table(io.StringIO(emit_table(data)), SMALL_SCHEMA)
    pd.testing.assert_frame_equal(back.frame, data.frame)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6, allow_nan=False), st.integers(0, 1000),
                          st.booleans()), min_size=1, max_size=15))
def test_round_trip_property(vals):
    rows = [dict(pid=f"p{i}", week=1, I=int(sel), y=cnt if sel else pd.NA, T=i % 2,
                 age=a, female=0.0, z=a / 7.0) for i, (a, cnt, sel) in enumerate(vals)]
    data = small_panel(rows)
    back = ingest_table(io.StringIO(emit_table(data)), SMALL_SCHEMA)
    pd.testing.assert_frame_equal(back.frame, data.frame)


# -- design ------------------------------------------------------------------

def test_squared_term():
    rows = base_rows(2)
    rows[0]["age"], rows[1]["age"] = 2.0, 3.0
    d = build_design(small_panel(rows), ["age", "age^2"])
    assert d.names == (INTERCEPT, "age", "age^2")
    np.testing.assert_array_equal(d.values, [[1, 2, 4], [1, 3, 9]])


def test_constant_selection_column_dropped():
    data = small_panel(base_rows(4))
    d = build_design(data, ["age", "I"], rows=data.selection == 1)
    assert "I" not in d.names
    assert ("I", "constant") in d.dropped_columns


def test_interaction_with_derived_column():
    rows = base_rows(2)
    rows[0]["T"], rows[1]["T"] = 1, 1
    data = small_panel(rows)
    xi = np.array([0.5, -0.2])
    d = build_design(data, ["age", "T*xi"], extra={"xi": xi})
    np.testing.assert_array_equal(d.column("T*xi"), [0.5, -0.2])


def test_collinear_column_dropped_right_to_left():
    rows = base_rows(5)
    for r in rows:
        r["z"] = 2.0 * r["age"] + 1.0
    d = build_design(small_panel(rows), ["age", "female", "z"])
    assert d.names == (INTERCEPT, "age", "female")
    assert ("z", "collinear") in d.dropped_columns


def test_design_is_idempotent():
    data = small_panel(base_rows(5))
    a = build_design(data, ["age", "age^2", "I", "female"])
    b = build_design(data, ["age", "age^2", "I", "female"])
    assert a.names == b.names and a.dropped_columns == b.dropped_columns
    np.testing.assert_array_equal(a.values, b.values)


def test_empty_design_is_degenerate():
    data = small_panel(base_rows(3))
    with pytest.raises(DegenerateSampleError):
        build_design(data, ["age"], rows=np.zeros(3, bool))


def test_missing_values_excluded_from_design():
    rows = base_rows(4)
    rows[1]["T"] = pd.NA
    d = build_design(small_panel(rows), ["age", "T"])
    np.testing.assert_array_equal(d.rows, [0, 2, 3])


def test_unknown_term_is_schema_error():
    with pytest.raises(SchemaError, match="bmi"):
        build_design(small_panel(base_rows(3)), ["bmi"])


def test_evaluate_terms_keeps_every_column():
    data = small_panel(base_rows(3))
    m = evaluate_terms(data, [INTERCEPT, "age^2", "I"], np.arange(3))
    np.testing.assert_array_equal(m[:, 2], 1.0)
    np.testing.assert_array_equal(m[:, 1], [4900.0, 71.0 ** 2, 72.0 ** 2])


def test_trend1_counts_weeks_before_census():
    rows = base_rows(3)
    for i, r in enumerate(rows):
        r["week"] = i + 1
    data = from_frame(pd.DataFrame(rows), SMALL_SCHEMA, weeks=10, census_week=8)
    np.testing.assert_array_equal(data.trend1(), [7, 6, 5])


# -- describe ----------------------------------------------------------------

def _stat(summary, name):
    return {r[0]: r for r in summary.rows}[name]


def test_describe_conventions():
    rows = base_rows(4)
    for r, t, y in zip(rows, [1, 0, 1, 1], [1, 2, 9, 0]):
        r["T"], r["y"] = t, y
    rows[3].update(I=0, y=pd.NA)
    s = describe(small_panel(rows))
    _, kind, n, m, ns, ms = _stat(s, "T")
    assert kind == "proportion" and m == 0.75 and n == 4
    assert _stat(s, "y")[1] == "median" and _stat(s, "y")[3] == 2.0
    assert _stat(s, "age")[1] == "mean"
    assert s.persons == (4, 3)


def test_describe_renders_both_blocks():
    text = describe(small_panel(base_rows(4))).render()
    assert "Study population" in text and "Study sample" in text
    assert text.splitlines()[-1].startswith("Number of persons")


def test_describe_commutes_with_filter():
    data = small_panel(base_rows(6))
    keep = np.array([1, 0, 1, 1, 0, 1], bool)
    sub = describe(data.subset(keep)).to_dict()
    rows = base_rows(6)
    for r, k in zip(rows, keep):
        if not k:
            r.update(I=0, y=pd.NA)
    masked = describe(small_panel(rows)).to_dict()
    for a, b in zip(sub["variables"], masked["variables"]):
        assert a["population"] == b["sample"]
