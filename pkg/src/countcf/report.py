"""Plain-text tables from serialized fit, matching and experiment documents."""
from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

from .control import STRATEGIES
from .data import INTERCEPT
from .errors import ReportError

STYLES = ("table3", "table4", "table5", "montecarlo")

LABELS = {
    "T": "Treatment",
    "T_hat": "Treatment (fitted probability)",
    "t1": "Time trend 1",
    "xi": "Treatment residuals",
    "xi_s": "Selection equation residuals",
    "T*xi": "Treatment interacted with residuals",
    "age^2": "Square of age",
}


def _label(name: str, labels: Mapping) -> str:
    return labels.get(name, LABELS.get(name, name))


def _table(header: Sequence[str], rows: Sequence[Sequence[str]], rules=()) -> str:
    """Left-aligned first column, right-aligned value columns, dashed rules."""
    ncol = len(header)
    widths = [len(h) for h in header]
    for r in rows:
        if r is None:
            continue
        for i, cell in enumerate(r):
            widths[i] = max(widths[i], len(cell))
    total = sum(widths) + 2 * (ncol - 1)
    rule = "-" * total

    def line(cells):
        parts = [cells[0].ljust(widths[0])]
        parts += [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    out = [rule, line(header), rule]
    for r in rows:
        out.append(rule if r is None else line(r))
    out.append(rule)
    return "\n".join(out) + "\n"


def _irr_rows(docs, labels, skip=(INTERCEPT,)):
    order = []
    for d in docs:
        for row in d.get("irr", []):
            if row["name"] not in order and row["name"] not in skip:
                order.append(row["name"])
    lookup = [{row["name"]: row for row in d.get("irr", [])} for d in docs]
    rows = []
    for name in order:
        vals, zs = [_label(name, labels)], [""]
        for lk in lookup:
            row = lk.get(name)
            if row is None:
                vals.append("")
                zs.append("")
            else:
                vals.append(f"{row['irr']:.3f}")
                zs.append("" if row["z"] is None else f"({abs(row['z']):.2f})")
        rows += [vals, zs]
    return rows


def _test_cell(test: Optional[Mapping], pfmt: str = ".2f") -> str:
    if not test:
        return ""
    return f"{test['statistic']:.2f} ({test['p_value']:{pfmt}})"


def _lnalpha(doc):
    for c in doc["main_fit"]["coefficients"]:
        if c["name"] == "lnalpha":
            return c["estimate"]
    return None


def _lr_cell(doc) -> str:
    test = doc.get("lr_dispersion")
    la = _lnalpha(doc)
    if not test or la is None:
        return ""
    if doc["family"] == "ztnb":
        return f"log alpha={la:.3f} ({test['p_value']:.2f})"
    return f"alpha={math.exp(la):.3f} ({test['p_value']:.2f})"


def _check(docs, kind):
    if not docs:
        raise ReportError("no documents to render (empty input)")
    for d in docs:
        if not isinstance(d, Mapping) or d.get("kind") != kind:
            got = d.get("kind") if isinstance(d, Mapping) else type(d).__name__
            raise ReportError(f"expected {kind!r} documents, got {got!r}")


def _split(docs):
    docs = list(docs)
    if not docs:
        raise ReportError("no documents to render (empty input)")
    psm = [d for d in docs if isinstance(d, Mapping) and d.get("kind") == "psm"]
    rest = [d for d in docs if not (isinstance(d, Mapping) and d.get("kind") == "psm")]
    return rest, psm


def render_table3(docs, labels: Optional[Mapping] = None) -> str:
    """Average marginal effects of the treatment and selection probits."""
    labels = labels or {}
    _check(docs, "pipeline")
    doc = docs[0]
    cols = [("Treatment model", doc.get("ame_treatment"), doc.get("wald_instruments"),
             doc.get("treatment_stage")),
            ("Selection model", doc.get("ame_selection"), doc.get("wald_instruments_selection"),
             doc.get("selection_stage"))]
    cols = [c for c in cols if c[1]]
    if not cols:
        raise ReportError("document carries no first-stage marginal effects")
    order = []
    for _, ames, _, _ in cols:
        for row in ames:
            if row["name"] not in order:
                order.append(row["name"])
    rows = []
    for name in order:
        vals, zs = [_label(name, labels)], [""]
        for _, ames, _, _ in cols:
            hit = {r["name"]: r for r in ames}.get(name)
            vals.append("" if hit is None else f"{hit['ame']:.3f}")
            zs.append("" if hit is None or hit["z"] is None else f"({abs(hit['z']):.2f})")
        rows += [vals, zs]
    rows.append(None)
    rows.append(["Wald test for instruments"] + [_test_cell(c[2]) for c in cols])
    rows.append(["Number of observations"] + [f"{c[3]['n_obs']:,}" if c[3] else "" for c in cols])
    header = ["Variable"] + [c[0] for c in cols]
    return _table(header, rows)


def render_table4(docs, labels: Optional[Mapping] = None) -> str:
    """IRR columns per count family with test blocks and the matching row."""
    labels = labels or {}
    fits, psm = _split(docs)
    _check(fits, "pipeline")
    rows = _irr_rows(fits, labels)
    rows.append(None)
    rows.append(["Wald test for weak instruments"] + [_test_cell(d.get("wald_instruments")) for d in fits])
    rows.append(["Wald chi-square test"] + [_test_cell(d.get("wald_model"), ".4f") for d in fits])
    rows.append(["LR test for alpha=0"] + [_lr_cell(d) for d in fits])
    psm_cells = [""] * len(fits)
    if psm:
        psm_cells[0] = f"{psm[0]['ate']:.3f} ({psm[0]['p_value']:.3f})"
    rows.append(["PSM technique ATE (p-value)"] + psm_cells)
    rows.append(None)
    rows.append(["Number of observations"] + [f"{d['main_fit']['n_obs']:,}" for d in fits])
    rows.append(["Number of persons"] + [f"{d['n_persons']:,}" for d in fits])
    header = ["Variable"] + [f"({i}) {d['family']}" for i, d in enumerate(fits, 1)]
    return _table(header, rows)


def render_table5(docs, labels: Optional[Mapping] = None) -> str:
    """IRR columns for the strategy ladder, always in s1..s5 order."""
    labels = labels or {}
    fits, _ = _split(docs)
    _check(fits, "pipeline")
    seen = [d["strategy"] for d in fits]
    if len(set(seen)) != len(seen):
        raise ReportError(f"duplicate strategies in input: {seen}")
    fits = sorted(fits, key=lambda d: STRATEGIES.index(d["strategy"]))
    rows = _irr_rows(fits, labels)
    rows.append(None)
    rows.append(["Number of observations"] + [f"{d['main_fit']['n_obs']:,}" for d in fits])
    rows.append(["Number of persons"] + [f"{d['n_persons']:,}" for d in fits])
    header = ["Variable"] + [f"({STRATEGIES.index(d['strategy']) + 1}) {d['strategy']}" for d in fits]
    return _table(header, rows)


def _num(v, fmt=".3f"):
    return "" if v is None else f"{v:{fmt}}"


def render_montecarlo(docs, labels: Optional[Mapping] = None) -> str:
    """Bias, RMSE, coverage and control-term rejection rates per strategy."""
    _check(docs, "experiment")
    doc = docs[0]
    header = ["Strategy", "n", "mean bias", "RMSE", "coverage", "implied err",
              "rej xi", "rej T*xi", "rej xi_s"]
    rows = []
    for sid, s in doc["strategies"].items():
        if not s.get("n"):
            rows.append([sid, "0"] + [""] * 7)
            continue
        rej = s.get("rejection", {})
        rows.append([sid, str(s["n"]), _num(s["mean_bias"]), _num(s["rmse"]), _num(s["coverage"]),
                     _num(s["mean_implied_error"]), _num(rej.get("xi")), _num(rej.get("T*xi")),
                     _num(rej.get("xi_s"))])
    if "psm" in doc:
        p = doc["psm"]
        rows.append(["psm", str(p["n"]), _num(p["mean_bias"]), _num(p["rmse"]), "", "", "", "", ""])
    rows.append(None)
    o = doc["oracle"]
    rows.append(["oracle ate_overall", _num(o["ate_overall"])] + [""] * 7)
    rows.append(["oracle ate_selected", _num(o["ate_selected"])] + [""] * 7)
    rows.append(["oracle upsilon", _num(o["upsilon"])] + [""] * 7)
    rows.append(["target log IRR", _num(doc["target_log_irr"])] + [""] * 7)
    rows.append(["replications", str(doc["replications"])] + [""] * 7)
    rows.append(["failed replications", str(doc["failed_replications"])] + [""] * 7)
    return _table(header, rows)


_RENDER = {"table3": render_table3, "table4": render_table4, "table5": render_table5,
           "montecarlo": render_montecarlo}


def render(docs, style: str, labels: Optional[Mapping] = None) -> str:
    if style not in _RENDER:
        raise ReportError(f"unknown style {style!r}; choose from {STYLES}")
    return _RENDER[style](list(docs), labels)
