"""Panel schema, delimited-text ingestion and design matrices."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from .errors import ConsistencyError, DegenerateSampleError, SchemaError

log = logging.getLogger(__name__)

DEFAULT_WEEKS = 52
COLLINEARITY_TOL = 1e-10
INTERCEPT = "_cons"


class VariableRole(str, Enum):
    OUTCOME = "outcome"
    COVARIATE = "covariate"
    TREATMENT = "treatment"
    INSTRUMENT = "instrument"
    SELECTION = "selection_indicator"
    CLUSTER = "cluster_id"
    TIME_TREND = "time_trend"
    TIME_TREND_1 = "time_trend_1"
    PERSON = "person_id"


_SINGLE_ROLES = (VariableRole.OUTCOME, VariableRole.TREATMENT, VariableRole.SELECTION,
                 VariableRole.CLUSTER, VariableRole.TIME_TREND, VariableRole.PERSON)


@dataclass(frozen=True)
class Schema:
    """Role -> column-name mapping.

    ``covariates`` and ``instruments`` are ordered lists; ``time_trend_1`` is
    optional and derived as ``census_week - week`` when absent.
    """

    outcome: str
    treatment: str
    selection_indicator: str
    cluster_id: str
    time_trend: str
    person_id: str
    covariates: tuple = ()
    instruments: tuple = ()
    time_trend_1: Optional[str] = None

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "Schema":
        known = {r.value for r in VariableRole} | {"covariates", "instruments"}
        unknown = set(mapping) - known
        if unknown:
            raise SchemaError(f"unknown schema roles: {sorted(unknown)}")
        kwargs = {}
        for role in _SINGLE_ROLES:
            name = mapping.get(role.value)
            if not isinstance(name, str) or not name:
                raise SchemaError(f"schema must name exactly one {role.value!r} column")
            kwargs[role.value] = name

        def as_list(*keys):
            out = []
            for key in keys:
                val = mapping.get(key)
                if val is None:
                    continue
                out.extend([val] if isinstance(val, str) else list(val))
            return tuple(out)

        kwargs["covariates"] = as_list("covariate", "covariates")
        kwargs["instruments"] = as_list("instrument", "instruments")
        kwargs["time_trend_1"] = mapping.get(VariableRole.TIME_TREND_1.value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        out = {
            "outcome": self.outcome,
            "treatment": self.treatment,
            "selection_indicator": self.selection_indicator,
            "cluster_id": self.cluster_id,
            "time_trend": self.time_trend,
            "person_id": self.person_id,
            "covariate": list(self.covariates),
            "instrument": list(self.instruments),
        }
        if self.time_trend_1:
            out["time_trend_1"] = self.time_trend_1
        return out

    def columns(self) -> list:
        """Distinct column names in emission order."""
        names = [self.person_id, self.time_trend, self.cluster_id, self.selection_indicator,
                 self.outcome, self.treatment, *self.covariates, *self.instruments]
        if self.time_trend_1:
            names.append(self.time_trend_1)
        seen, out = set(), []
        for n in names:
            if n not in seen:
                seen.add(n)
                out.append(n)
        return out

    def require_instruments(self):
        if not self.instruments:
            raise SchemaError("a control-function pipeline needs at least one instrument")


@dataclass(frozen=True)
class PanelDataset:
    """Immutable person-week panel.

    Missing values are ``pd.NA`` in nullable columns; ``rejected`` lists rows
    that failed to parse as ``(line_number, reason)`` pairs.
    """

    frame: pd.DataFrame
    schema: Schema
    weeks: int = DEFAULT_WEEKS
    census_week: Optional[int] = None
    rejected: tuple = ()

    def __post_init__(self):
        if self.census_week is None:
            object.__setattr__(self, "census_week", self.weeks)
        if self.weeks < 1 or not 1 <= self.census_week <= self.weeks:
            raise SchemaError("need weeks >= 1 and census_week in [1, weeks]")
        _validate(self.frame, self.schema, self.weeks)

    def __len__(self):
        return len(self.frame)

    @property
    def n_persons(self) -> int:
        return int(self.frame[self.schema.person_id].nunique())

    def values(self, name: str) -> np.ndarray:
        """Float copy of a column; missing entries become NaN."""
        if name == "t1" or name == self.schema.time_trend_1 or name == VariableRole.TIME_TREND_1.value:
            return self.trend1()
        if name == "t":
            name = self.schema.time_trend
        if name not in self.frame.columns:
            raise SchemaError(f"unknown variable {name!r}")
        return self.frame[name].astype("Float64").to_numpy(dtype=float, na_value=np.nan)

    def trend1(self) -> np.ndarray:
        if self.schema.time_trend_1 and self.schema.time_trend_1 in self.frame.columns:
            col = self.frame[self.schema.time_trend_1]
            return col.astype("Float64").to_numpy(dtype=float, na_value=np.nan)
        return float(self.census_week) - self.values(self.schema.time_trend)

    @property
    def outcome(self):
        return self.values(self.schema.outcome)

    @property
    def treatment(self):
        return self.values(self.schema.treatment)

    @property
    def selection(self):
        return self.values(self.schema.selection_indicator)

    @property
    def week(self):
        return self.values(self.schema.time_trend)

    @property
    def clusters(self) -> np.ndarray:
        return self.frame[self.schema.cluster_id].astype(str).to_numpy()

    def has(self, name: str) -> bool:
        return name in self.frame.columns or name in ("t", "t1")

    def complete(self, names: Iterable[str]) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        for n in names:
            mask &= ~np.isnan(self.values(n))
        return mask

    def subset(self, mask) -> "PanelDataset":
        frame = self.frame.loc[np.asarray(mask, dtype=bool)].reset_index(drop=True)
        return PanelDataset(frame, self.schema, self.weeks, self.census_week)


def _validate(frame: pd.DataFrame, schema: Schema, weeks: int):
    for name in schema.columns():
        if name not in frame.columns:
            raise SchemaError(f"missing column {name!r}")
    pid, wk = frame[schema.person_id].astype(str), frame[schema.time_trend]
    if wk.isna().any():
        raise SchemaError("week index must be present on every row")
    bad = (wk < 1) | (wk > weeks)
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise ConsistencyError(f"week {wk.iloc[i]} outside [1, {weeks}] for person {pid.iloc[i]}")
    dup = pd.DataFrame({"p": pid, "w": wk}).duplicated()
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise ConsistencyError(f"duplicate (person, week) pair ({pid.iloc[i]}, {wk.iloc[i]})")
    sel = frame[schema.selection_indicator]
    if sel.isna().any() or not sel.isin([0, 1]).all():
        raise SchemaError("selection indicator must be 0/1 on every row")
    y = frame[schema.outcome]
    clash = (sel == 0) & y.notna()
    if clash.any():
        i = int(np.flatnonzero(clash.to_numpy())[0])
        raise ConsistencyError(
            f"outcome present on unselected row (person {pid.iloc[i]}, week {wk.iloc[i]})")
    gap = (sel == 1) & y.isna()
    if gap.any():
        i = int(np.flatnonzero(gap.to_numpy())[0])
        raise ConsistencyError(
            f"outcome missing on selected row (person {pid.iloc[i]}, week {wk.iloc[i]})")
    if (y.dropna() < 0).any():
        raise SchemaError("outcome counts must be nonnegative")
    t = frame[schema.treatment].dropna()
    if not t.isin([0, 1]).all():
        raise SchemaError("treatment must be 0/1 or missing")


# ---------------------------------------------------------------------------
# text I/O

def _parse_int(text):
    f = float(text)
    if not f.is_integer():
        raise ValueError(f"not an integer: {text!r}")
    return int(f)


def from_frame(frame: pd.DataFrame, schema: Schema, weeks: int = DEFAULT_WEEKS,
               census_week: Optional[int] = None) -> PanelDataset:
    """Coerce a DataFrame to the canonical nullable dtypes and validate it."""
    frame = frame.copy()
    for name in schema.columns():
        if name not in frame.columns:
            raise SchemaError(f"missing column {name!r}")
    for name in (schema.person_id, schema.cluster_id):
        frame[name] = frame[name].astype(str).astype("string")
    for name in (schema.time_trend, schema.selection_indicator):
        frame[name] = frame[name].astype("Int64")
    for name in (schema.outcome, schema.treatment):
        frame[name] = frame[name].astype("Int64")
    for name in (*schema.covariates, *schema.instruments):
        frame[name] = frame[name].astype("Float64")
    if schema.time_trend_1:
        frame[schema.time_trend_1] = frame[schema.time_trend_1].astype("Float64")
    return PanelDataset(frame[schema.columns()].reset_index(drop=True), schema, weeks, census_week)


def ingest_table(source, schema: Schema, weeks: int = DEFAULT_WEEKS,
                 census_week: Optional[int] = None) -> PanelDataset:
    """Read a comma-separated table into a validated panel.

    ``source`` is a path or a text stream.  Rows whose required fields do not
    parse are collected in ``PanelDataset.rejected`` instead of vanishing.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return ingest_table(fh, schema, weeks, census_week)
    reader = csv.DictReader(source)
    if not reader.fieldnames:
        raise SchemaError("missing header row")
    for name in schema.columns():
        if name not in reader.fieldnames:
            raise SchemaError(f"missing column {name!r}")

    int_required = (schema.time_trend, schema.selection_indicator)
    int_optional = (schema.outcome, schema.treatment)
    float_optional = (*schema.covariates, *schema.instruments) + (
        (schema.time_trend_1,) if schema.time_trend_1 else ())
    records, rejected = [], []
    for lineno, row in enumerate(reader, start=2):
        rec = {}
        try:
            for name in (schema.person_id, schema.cluster_id):
                val = (row[name] or "").strip()
                if not val:
                    raise ValueError(f"{name} is empty")
                rec[name] = val
            for name in int_required:
                rec[name] = _parse_int(row[name])
            for name in int_optional:
                val = (row[name] or "").strip()
                rec[name] = _parse_int(val) if val else pd.NA
            for name in float_optional:
                val = (row[name] or "").strip()
                rec[name] = float(val) if val else pd.NA
        except (ValueError, TypeError) as exc:
            rejected.append((lineno, str(exc)))
            continue
        records.append(rec)
    for lineno, reason in rejected:
        log.warning("rejected line %d: %s", lineno, reason)
    frame = pd.DataFrame.from_records(records, columns=schema.columns())
    data = from_frame(frame, schema, weeks, census_week)
    return PanelDataset(data.frame, schema, weeks, census_week, tuple(rejected))


def _fmt(val) -> str:
    if val is pd.NA or val is None:
        return ""
    if isinstance(val, (float, np.floating)):
        if np.isnan(val):
            return ""
        return repr(float(val))
    return str(val)


def emit_table(data: PanelDataset, dest=None) -> Optional[str]:
    """Write ``data`` as CSV; returns the text when ``dest`` is None."""
    if dest is None:
        buf = io.StringIO()
        emit_table(data, buf)
        return buf.getvalue()
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            emit_table(data, fh)
        return None
    cols = data.schema.columns()
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(cols)
    for row in data.frame[cols].itertuples(index=False, name=None):
        writer.writerow([_fmt(v) for v in row])
    return None


# ---------------------------------------------------------------------------
# design matrices

@dataclass(frozen=True)
class DesignMatrix:
    """Named columns aligned to ``rows`` (indices into the source dataset)."""

    names: tuple
    values: np.ndarray
    rows: np.ndarray
    dropped_columns: tuple = ()
    terms: tuple = ()

    def __post_init__(self):
        self.values.setflags(write=False)
        self.rows.setflags(write=False)

    @property
    def shape(self):
        return self.values.shape

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def index(self, name):
        return self.names.index(name)


def _parse_term(term: str):
    """'age^2' -> [('age', 2)]; 'T*xi' -> [('T', 1), ('xi', 1)]."""
    factors = []
    for part in term.replace(":", "*").split("*"):
        part = part.strip()
        if "^" in part:
            name, power = part.split("^")
            factors.append((name.strip(), int(power)))
        else:
            factors.append((part, 1))
    if not all(name for name, _ in factors):
        raise SchemaError(f"malformed term {term!r}")
    return factors


def _lookup(name, data: PanelDataset, extra: Mapping):
    if extra and name in extra:
        col = np.asarray(extra[name], dtype=float)
        if col.shape != (len(data),):
            raise SchemaError(f"derived column {name!r} has wrong length")
        return col
    if name == "T":
        return data.treatment
    if name == "I":
        return data.selection
    if not data.has(name):
        raise SchemaError(f"term references unknown variable {name!r}")
    return data.values(name)


def term_name(term: str) -> str:
    return "*".join(f"{n}^{p}" if p != 1 else n for n, p in _parse_term(term))


def build_design(data: PanelDataset, terms: Sequence[str], rows=None,
                 extra: Optional[Mapping] = None, intercept: bool = True) -> DesignMatrix:
    """Assemble an intercept-first design over the filtered, complete rows.

    ``rows`` is a boolean mask over ``data``; rows with any missing input are
    excluded afterwards.  Constant columns and columns linearly dependent on
    those to their left are moved to ``dropped_columns``.
    """
    mask = np.ones(len(data), dtype=bool) if rows is None else np.asarray(rows, dtype=bool).copy()
    cols = []
    for term in terms:
        col = np.ones(len(data))
        for name, power in _parse_term(term):
            col = col * _lookup(name, data, extra) ** power
        cols.append((term_name(term), col))
    for _, col in cols:
        mask &= ~np.isnan(col)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DegenerateSampleError("no rows retained for the design")

    names, mats, dropped = [], [], []
    if intercept:
        names.append(INTERCEPT)
        mats.append(np.ones(idx.size))
    for name, col in cols:
        v = col[idx]
        if name in names:
            dropped.append((name, "duplicate"))
            continue
        if np.ptp(v) == 0.0:
            dropped.append((name, "constant"))
            log.info("dropping constant column %s", name)
            continue
        names.append(name)
        mats.append(v)

    # left-to-right QR rank check on unit-norm columns: a column whose R
    # diagonal is negligible depends on those already kept
    keep_names, keep = [], []
    for name, v in zip(names, mats):
        trial = np.column_stack(keep + [v])
        trial = trial / np.linalg.norm(trial, axis=0)
        d = np.abs(np.diag(np.linalg.qr(trial, mode="r")))
        if d[-1] < COLLINEARITY_TOL * d.max():
            dropped.append((name, "collinear"))
            log.info("dropping collinear column %s", name)
            continue
        keep_names.append(name)
        keep.append(v)
    values = np.column_stack(keep) if keep else np.empty((idx.size, 0))
    return DesignMatrix(tuple(keep_names), np.ascontiguousarray(values), idx,
                        tuple(dropped), tuple(terms))


# ---------------------------------------------------------------------------
# descriptive statistics

@dataclass
class Summary:
    """Two-block descriptive table (all rows, selected rows)."""

    rows: list = field(default_factory=list)  # (variable, stat, n_all, m_all, n_sel, m_sel)
    persons: tuple = (0, 0)

    def to_dict(self) -> dict:
        return {
            "variables": [
                {"variable": v, "statistic": s,
                 "population": {"n": na, "m": ma}, "sample": {"n": ns, "m": ms}}
                for v, s, na, ma, ns, ms in self.rows
            ],
            "persons": {"population": self.persons[0], "sample": self.persons[1]},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render(self) -> str:
        def m(x):
            return "" if x is None else f"{x:.2f}"
        header = ("", "Study population", "", "Study sample", "")
        body = [("", "n", "m", "n", "m")]
        body += [(v, f"{na:,}", m(ma), f"{ns:,}", m(ms)) for v, _, na, ma, ns, ms in self.rows]
        body.append(("Number of persons", f"{self.persons[0]:,}", "", f"{self.persons[1]:,}", ""))
        table = [header] + body
        w = [max(len(r[i]) for r in table) for i in range(5)]
        lines = []
        for r in table:
            lines.append("  ".join([r[0].ljust(w[0])] + [c.rjust(w[i]) for i, c in enumerate(r) if i]))
        return "\n".join(line.rstrip() for line in lines) + "\n"


def _statistic(name: str, data: PanelDataset, kinds: Mapping) -> str:
    if name in kinds:
        return kinds[name]
    v = data.values(name)
    v = v[~np.isnan(v)]
    if v.size and np.isin(v, (0.0, 1.0)).all():
        return "proportion"
    s = data.schema
    if name in (s.outcome, s.time_trend, s.time_trend_1, "t1"):
        return "median"
    return "mean"  # ordinal covariates are declared through ``kinds``


def _describe_one(v: np.ndarray, stat: str):
    v = v[~np.isnan(v)]
    if v.size == 0:
        return 0, None
    if stat == "median":
        return int(v.size), float(np.median(v))
    return int(v.size), float(np.mean(v))


def describe(data: PanelDataset, kinds: Optional[Mapping] = None) -> Summary:
    """Per-variable n and m (mean, proportion or median) for all and selected rows."""
    kinds = dict(kinds or {})
    s = data.schema
    names = [*s.covariates, s.treatment, *s.instruments, s.outcome, s.time_trend, "t1"]
    sel = data.selection == 1
    out = Summary()
    for name in names:
        stat = _statistic(name, data, kinds)
        v = data.values(name)
        label = "time_trend_1" if name == "t1" else name
        na, ma = _describe_one(v, stat)
        ns, ms = _describe_one(v[sel], stat)
        out.rows.append((label, stat, na, ma, ns, ms))
    pid = data.frame[s.person_id].astype(str).to_numpy()
    out.persons = (int(np.unique(pid).size), int(np.unique(pid[sel]).size))
    return out


def evaluate_terms(data: PanelDataset, names: Sequence[str], rows,
                   extra: Optional[Mapping] = None) -> np.ndarray:
    """Evaluate named design terms on ``rows`` without any column dropping."""
    rows = np.asarray(rows)
    cols = []
    for name in names:
        if name == INTERCEPT:
            cols.append(np.ones(rows.size))
            continue
        col = np.ones(rows.size)
        for var, power in _parse_term(name):
            col = col * _lookup(var, data, extra)[rows] ** power
        cols.append(col)
    return np.column_stack(cols) if cols else np.empty((rows.size, 0))
