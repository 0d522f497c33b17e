"""Command-line entry point: simulate, fit, psm, montecarlo, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures.process import BrokenProcessPool
from pathlib import Path

import yaml

from . import __version__
from .control import STRATEGIES, run_2sri_pipeline
from .data import Schema, ingest_table, _parse_term
from .dgp import DGPConfig, simulate_panel
from .distributions import COUNT_KINDS
from .errors import (CountCFError, DegenerateSampleError, DomainError, FitError,
                     OrchestrationError, ReportError, SchemaError, StageError)
from .inference import average_marginal_effects
from .matching import DEFAULT_K, format_ate, run_psm
from .montecarlo import load_experiment, run_experiment
from .report import STYLES, render

log = logging.getLogger("countcf")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_FIT = 4
EXIT_ORCHESTRATION = 5
EXIT_REPORT = 6
EXIT_DOMAIN = 7


def _write(text: str, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _load_panel(args):
    """Data plus model terms; the schema defaults to ``schema.json`` beside the data."""
    schema_path = Path(args.schema) if args.schema else Path(args.data).with_name("schema.json")
    if not schema_path.exists():
        raise SchemaError(f"schema file not found: {schema_path}")
    with open(schema_path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    meta = doc if "schema" in doc else {"schema": doc}
    schema = Schema.from_mapping(meta["schema"])
    weeks = int(args.weeks or meta.get("weeks") or 52)
    census = args.census_week or meta.get("census_week")
    data = ingest_table(args.data, schema, weeks=weeks, census_week=census)
    if data.rejected:
        log.warning("%d unparseable rows skipped", len(data.rejected))
    if args.terms:
        terms = [t.strip() for t in args.terms.split(",") if t.strip()]
    else:
        terms = list(meta.get("model_terms") or schema.covariates)
    return data, terms


def _linked(terms):
    """Map each base variable to the higher-order terms that contain it."""
    out = {}
    for t in terms:
        factors = _parse_term(t)
        if len(factors) > 1 or factors[0][1] != 1:
            for name, _ in factors:
                out.setdefault(name, []).append(t)
    return out


def _ame_rows(fit, data, terms):
    ames = average_marginal_effects(fit, data, _linked(terms))
    return [{"name": n, "ame": a, "z": None if z != z else z} for n, (a, z) in ames.items()]


def cmd_simulate(args):
    cfg = DGPConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    panel = simulate_panel(cfg)
    paths = panel.export(args.out)
    if not args.quiet:
        for k in sorted(paths):
            print(f"{k}: {paths[k]}")
    return EXIT_OK


def cmd_fit(args):
    data, terms = _load_panel(args)
    res = run_2sri_pipeline(data, args.family, args.strategy, terms)
    doc = res.to_dict()
    if res.tfit is not None:
        doc["ame_treatment"] = _ame_rows(res.tfit, data, terms)
    if res.sfit is not None:
        doc["ame_selection"] = _ame_rows(res.sfit, data, terms)
    _write(_dump(doc), args.out)
    if not args.quiet and args.out not in (None, "-"):
        for row in doc["irr"]:
            print(f"{row['name']:<12} {row['irr']:>10.3f}  ({abs(row['z'] or 0):.2f})")
    return EXIT_OK


def cmd_psm(args):
    data, terms = _load_panel(args)
    match = run_psm(data, terms, args.psm_link, args.impute_k)
    doc = match.to_dict()
    doc["formatted"] = format_ate(match.ate, match.p_value)
    _write(_dump(doc), args.out)
    if not args.quiet:
        print(doc["formatted"], file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return EXIT_OK


def cmd_montecarlo(args):
    cfg, spec = load_experiment(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.reps < 1:
        raise SchemaError("reps: must be >= 1")
    try:
        report = run_experiment(cfg, args.reps, args.jobs, spec)
    except BrokenProcessPool as exc:
        raise OrchestrationError(f"worker pool failed: {exc}") from exc
    _write(report.to_json(with_records=args.records), args.out)
    if not args.quiet:
        print(f"{args.reps} replications, {report.summary['failed_replications']} with failures, "
              f"{report.wall_time:.1f}s", file=sys.stderr)
    if report.summary["failed_replications"] == args.reps:
        raise OrchestrationError("every replication failed")
    return EXIT_OK


def cmd_report(args):
    docs = []
    for path in args.documents:
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}: not a JSON document ({exc})") from None
        docs.extend(doc if isinstance(doc, list) else [doc])
    _write(render(docs, args.style), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="countcf", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="draw a synthetic panel")
    s.add_argument("config")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    def data_args(q):
        q.add_argument("data", help="panel CSV")
        q.add_argument("--schema", help="schema document (default: schema.json beside the data)")
        q.add_argument("--terms", help="comma-separated covariate terms, e.g. age,age^2,female")
        q.add_argument("--weeks", type=int)
        q.add_argument("--census-week", type=int)
        q.add_argument("--out", default=None, help="output file (default: stdout)")

    f = sub.add_parser("fit", parents=[common], help="two-stage residual inclusion fit")
    data_args(f)
    f.add_argument("--family", choices=COUNT_KINDS, default="nb2")
    f.add_argument("--strategy", choices=STRATEGIES, default="s5")
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("psm", parents=[common], help="propensity-score matching")
    data_args(m)
    m.add_argument("--psm-link", choices=("probit", "logit"), default="probit")
    m.add_argument("--impute-k", type=int, default=DEFAULT_K)
    m.set_defaults(func=cmd_psm)

    c = sub.add_parser("montecarlo", parents=[common], help="replication experiment")
    c.add_argument("config")
    c.add_argument("--reps", type=int, default=100)
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("--out", default=None)
    c.add_argument("--records", action="store_true", help="include per-replication records")
    c.set_defaults(func=cmd_montecarlo)

    r = sub.add_parser("report", parents=[common], help="render text tables")
    r.add_argument("documents", nargs="*")
    r.add_argument("--style", choices=STYLES, required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, StageError) and isinstance(exc.cause, CountCFError):
        exc = exc.cause
    if isinstance(exc, DomainError):
        return EXIT_DOMAIN
    if isinstance(exc, ReportError):
        return EXIT_REPORT
    if isinstance(exc, (SchemaError, DegenerateSampleError)):
        return EXIT_SCHEMA
    if isinstance(exc, FitError):
        return EXIT_FIT
    return EXIT_ORCHESTRATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CountCFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
