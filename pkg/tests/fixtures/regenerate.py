"""Rebuild the report fixture documents and golden tables.

Run from the repository root after an intentional change to the document
shape or the table layout::

    python3 tests/fixtures/regenerate.py
"""
import json
from pathlib import Path

from countcf.cli import _ame_rows
from countcf.control import STRATEGIES, run_2sri_pipeline
from countcf.dgp import MODEL_TERMS, paper_like_config, simulate_panel
from countcf.report import render

HERE = Path(__file__).resolve().parent
DOCS = HERE / "documents"
GOLDEN = HERE / "golden"

# matching row as printed in the published table
PSM = {"kind": "psm", "ate": -0.4391, "p_value": 0.5081, "se": 0.663, "n_pairs": 412,
       "n_treated": 412, "n_control": 1210, "link": "probit", "imputed": 0, "unmatched": []}


def _dump(doc):
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def build():
    DOCS.mkdir(exist_ok=True)
    GOLDEN.mkdir(exist_ok=True)
    families = {}
    for family in ("nb2", "zinb", "ztnb"):
        cfg = paper_like_config(n_persons=400, weeks=4, seed=31, family=family,
                                p_inflate=0.2 if family == "zinb" else 0.0)
        data = simulate_panel(cfg).data
        res = run_2sri_pipeline(data, family, "s5", MODEL_TERMS)
        doc = res.to_dict()
        doc["ame_treatment"] = _ame_rows(res.tfit, data, MODEL_TERMS)
        doc["ame_selection"] = _ame_rows(res.sfit, data, MODEL_TERMS)
        families[family] = doc
    data = simulate_panel(paper_like_config(n_persons=400, weeks=4, seed=31)).data
    ladder = [run_2sri_pipeline(data, "nb2", sid, MODEL_TERMS).to_dict() for sid in STRATEGIES]

    (DOCS / "families.json").write_text(_dump([families[f] for f in ("nb2", "zinb", "ztnb")] + [PSM]))
    # stored out of order on purpose: rendering sorts the ladder
    (DOCS / "ladder.json").write_text(_dump(ladder[::-1]))
    (DOCS / "psm.json").write_text(_dump(PSM))
    (DOCS / "nb2.json").write_text(_dump(families["nb2"]))

    fams = json.loads((DOCS / "families.json").read_text())
    lad = json.loads((DOCS / "ladder.json").read_text())
    (GOLDEN / "table3.txt").write_text(render([json.loads((DOCS / "nb2.json").read_text())], "table3"))
    (GOLDEN / "table4.txt").write_text(render(fams, "table4"))
    (GOLDEN / "table5.txt").write_text(render(lad, "table5"))


if __name__ == "__main__":
    build()
