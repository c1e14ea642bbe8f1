"""Command-line front end: ``fit``, ``simulate`` and ``report``.

    metamob fit data.csv --method metamob-si --out tree.json
    metamob simulate null-grid --reps 500 --out null.csv
    metamob report null.csv fdr.csv --layout fig2 --out tables/
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import METHODS, DataError, IpdDataset, ModelSpec
from .glmmtree import fit as fit_glmm_tree
from .metrics import aggregate, default_workers, run_cell
from .mobtree import TreeControls
from .simgen import ScenarioConfig, expand_grid, load_grid, with_seed

log = logging.getLogger("metamob")

SIG_DIGITS = 10
DEFAULT_REPS = 500
STRING_FIELDS = {"scenario", "corr_target", "cell_id", "method"}
INT_FIELDS = {"K", "n_total", "seed", "splitter", "nonsplitter", "reps", "n_included",
              "n_excluded", "n_effect_corr"}
KEY_FIELDS = ("cell_id", "seed", "method")

LAYOUTS = {
    "fig2": {"metric": "discovery_rate", "filters": {"scenario": ("null",), "corr_target": ("b0_with_nonsplitter",)},
             "row": ("tau1",), "col": ("n_total", "K"), "x": "tau0"},
    "fig3": {"metric": "discovery_rate", "filters": {"scenario": ("null",), "corr_target": ("b1_with_nonsplitter",)},
             "row": ("tau0",), "col": ("n_total", "K"), "x": "tau1"},
    "fig4": {"metric": "accuracy", "filters": {"scenario": ("simA",)},
             "row": ("tau0",), "col": ("corr_target",), "x": "tau1"},
    "fig5": {"metric": "accuracy", "filters": {"scenario": ("simB",)},
             "row": ("tau_gamma",), "col": ("corr_target",), "x": "tau1"},
    "fig6": {"metric": "mean_effect_corr",
             "filters": {"scenario": ("simA",), "corr_target": ("none", "b1_with_splitter", "b1_with_nonsplitter")},
             "row": ("tau0",), "col": ("corr_target",), "x": "tau1"},
}


class CliError(Exception):
    """User-facing failure; reported as a JSON line on stderr."""


# -- formatting ---------------------------------------------------------------

def fmt_number(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), f".{SIG_DIGITS}g")


def clean(obj):
    """JSON-safe copy with floats rounded to 10 significant digits, NaN as null."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        return float(format(v, f".{SIG_DIGITS}g"))
    return obj


def dump_json(doc) -> str:
    return json.dumps(clean(doc), indent=2, sort_keys=False) + "\n"


def records_to_csv(records: Sequence[dict]) -> str:
    if not records:
        return ""
    columns = list(records[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([json.dumps(clean(r[c]), sort_keys=True) if isinstance(r[c], (dict, list, tuple))
                    else fmt_number(r[c]) if not isinstance(r[c], str) else r[c] for c in columns])
    return buf.getvalue()


def _parse_cell(name: str, text: str):
    if name in STRING_FIELDS:
        return text
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    if text[0] in "{[":
        return json.loads(text)
    v = float(text)
    return int(v) if name in INT_FIELDS else v


def read_records(path: Path) -> list:
    """Read a ``simulate`` output file (CSV or JSON) back into records."""
    text = path.read_text()
    if not text.strip():
        return []
    if text.lstrip()[0] in "[{":
        doc = json.loads(text)
        recs = doc["results"] if isinstance(doc, dict) else doc
        return [dict(r) for r in recs]
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0]
    return [{h: _parse_cell(h, v) for h, v in zip(header, row)} for row in rows[1:]]


def write_output(text: str, out: Optional[str]) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


# -- fit ----------------------------------------------------------------------

def _controls(args) -> TreeControls:
    try:
        return TreeControls(alpha=args.alpha, minsize=args.minsize)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def fit_document(dataset: IpdDataset, method: str, controls: TreeControls, abstol: float,
                 max_iter: int) -> dict:
    spec = ModelSpec.from_method(method)
    g = fit_glmm_tree(dataset, spec, controls, abstol, max_iter)
    terminals = []
    for nd in g.tree.terminals():
        gamma = list(nd.gamma) if isinstance(nd.gamma, tuple) else nd.gamma
        terminals.append({"node_id": nd.node_id, "n_obs": nd.n_obs, "gamma": gamma, "theta": nd.theta})
    vc = g.lmm.vc
    return {
        "method": method,
        "n": dataset.n,
        "K": dataset.K,
        "controls": {"alpha": controls.alpha, "minsize": controls.minsize, "abstol": abstol,
                     "max_iter": max_iter},
        "tree": g.tree.to_dict(),
        "terminals": terminals,
        "variance_components": {"tau0_sq": vc.tau0_sq, "tau1_sq": vc.tau1_sq, "sigma_sq": vc.sigma_sq},
        "random_effects": {"b0": g.lmm.re.b0, "b1": g.lmm.re.b1},
        "loglik": g.lmm.loglik,
        "n_iter": g.n_iter,
        "converged": g.converged,
        "warnings": list(g.warnings),
    }


def cmd_fit(args) -> int:
    if args.method not in METHODS:
        raise CliError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    controls = _controls(args)
    dataset = IpdDataset.from_csv(args.data)
    doc = fit_document(dataset, args.method, controls, args.abstol, args.max_iter)
    if args.format == "csv":
        write_output(records_to_csv(doc["terminals"]), args.out)
    else:
        write_output(dump_json(doc), args.out)
    return 0


# -- simulate -----------------------------------------------------------------

def bundled_grids() -> list:
    root = resources.files("metamob.data").joinpath("grids")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_grid(name: str) -> dict:
    path = Path(name)
    if path.exists():
        return load_grid(path)
    stem = name[:-5] if name.endswith(".json") else name
    if stem in bundled_grids():
        with resources.files("metamob.data").joinpath("grids", f"{stem}.json").open() as fh:
            return json.load(fh)
    raise CliError(f"no grid file {name!r} (bundled grids: {', '.join(bundled_grids())})")


def _methods(arg: Optional[Sequence[str]], grid: dict) -> list:
    names = []
    for item in (arg or grid.get("methods") or list(METHODS)):
        names.extend(s.strip() for s in item.split(",") if s.strip())
    for m in names:
        if m not in METHODS:
            raise CliError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    return names


def simulate_records(configs: Sequence[ScenarioConfig], methods: Sequence[str], reps: int, workers: int,
                     controls: TreeControls, abstol: float, max_iter: int) -> list:
    specs = [ModelSpec.from_method(m) for m in methods]
    records = []
    for i, cfg in enumerate(configs, 1):
        t0 = time.perf_counter()
        by_method = run_cell(cfg, specs, reps, workers, controls, abstol, max_iter)
        for m in methods:
            records.append(aggregate(by_method[m], cfg))
        log.info("cell %d/%d %s done in %.1fs", i, len(configs), cfg.cell_id, time.perf_counter() - t0)
    return records


def cmd_simulate(args) -> int:
    grid = resolve_grid(args.config)
    methods = _methods(args.method, grid)
    reps = args.reps if args.reps is not None else int(grid.get("reps", DEFAULT_REPS))
    if reps < 1:
        raise CliError("--reps must be at least 1")
    try:
        configs = expand_grid(grid, allow_custom=args.allow_custom)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid grid: {exc}") from exc
    if args.seed is not None:
        configs = [with_seed(c, args.seed) for c in configs]
    workers = args.workers if args.workers is not None else default_workers()
    records = simulate_records(configs, methods, reps, workers, _controls(args), args.abstol, args.max_iter)
    if args.format == "json":
        write_output(dump_json({"results": records}), args.out)
    else:
        write_output(records_to_csv(records), args.out)
    return 0


# -- report -------------------------------------------------------------------

def merge_records(groups: Sequence[Sequence[dict]]) -> list:
    """Union of result files keyed by (cell, seed, method).

    Identical duplicates collapse; conflicting duplicates and files with a
    different column set are rejected.
    """
    merged, columns = {}, None
    for recs in groups:
        for r in recs:
            cols = tuple(sorted(r))
            if columns is None:
                columns = cols
            elif cols != columns:
                raise CliError("schema mismatch between result files")
            key = tuple(r[k] for k in KEY_FIELDS)
            if key in merged and clean(merged[key]) != clean(r):
                raise CliError(f"conflicting results for {key}")
            merged.setdefault(key, r)
    return [merged[k] for k in sorted(merged, key=lambda k: tuple(str(v) for v in k))]


def _matches(rec: dict, filters: dict) -> bool:
    return all(rec.get(k) in allowed for k, allowed in filters.items())


def _sort_key(v):
    return (0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v))


def pivot(records: Sequence[dict], layout: str):
    """Reshape results into one figure layout.

    Returns ``(table_rows, series_doc)``: a row per (facet, x) with one column
    per method, and a series document with ``x``/``y`` arrays per facet and
    method.
    """
    spec = LAYOUTS[layout]
    metric, facet_keys = spec["metric"], spec["row"] + spec["col"]
    recs = [r for r in records if _matches(r, spec["filters"])]
    methods = [m for m in METHODS if any(r["method"] == m for r in recs)]
    cells = {}
    for r in recs:
        key = tuple(r[k] for k in facet_keys) + (r[spec["x"]],)
        cells.setdefault(key, {})[r["method"]] = r[metric]
    rows = []
    for key in sorted(cells, key=lambda k: tuple(_sort_key(v) for v in k)):
        row = dict(zip(facet_keys + (spec["x"],), key))
        row.update({m: cells[key].get(m) for m in methods})
        rows.append(row)
    series = []
    facets = sorted({k[:-1] for k in cells}, key=lambda k: tuple(_sort_key(v) for v in k))
    for facet in facets:
        xs = sorted((k[-1] for k in cells if k[:-1] == facet), key=_sort_key)
        for m in methods:
            series.append({"facet": dict(zip(facet_keys, facet)), "method": m, "x": xs,
                           "y": [cells[facet + (x,)].get(m) for x in xs]})
    doc = {"layout": layout, "metric": metric, "rows": list(spec["row"]), "columns": list(spec["col"]),
           "x": spec["x"], "series": series}
    return rows, doc


def cmd_report(args) -> int:
    if not args.results:
        log.warning("no result files given; writing empty tables")
    groups = []
    for p in args.results:
        path = Path(p)
        if not path.exists():
            raise CliError(f"{p}: no such file")
        groups.append(read_records(path))
    records = merge_records(groups)
    layouts = list(LAYOUTS) if args.layout == "all" else [args.layout]
    out = None if args.out in (None, "-") else Path(args.out)
    combined = {}
    for layout in layouts:
        rows, doc = pivot(records, layout)
        if out is None:
            combined[layout] = {"table": rows, "plot": doc}
            continue
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{layout}.csv").write_text(records_to_csv(rows))
        (out / f"{layout}.json").write_text(dump_json(doc))
    if out is None:
        write_output(dump_json(combined), None)
    else:
        (out / "merged.csv").write_text(records_to_csv(records))
    return 0


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha", type=float, default=0.05, help="significance level of the instability tests")
    common.add_argument("--minsize", type=int, default=20, help="minimum number of subjects per terminal node")
    common.add_argument("--abstol", type=float, default=0.001, help="log-likelihood tolerance of the iteration")
    common.add_argument("--max-iter", type=int, default=100, help="maximum number of tree/mixed-model iterations")
    common.add_argument("--seed", type=int, default=None, help="base seed (simulate); recorded by fit")
    common.add_argument("--out", default=None, help="output path (default: stdout)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="metamob", description="Subgroup trees for IPD meta-analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="grow a subgroup tree on a CSV dataset")
    p.add_argument("data", help="CSV with columns y, trt, trial and covariates")
    p.add_argument("--method", default="metamob-si", help=f"one of {', '.join(METHODS)}")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", parents=[common], help="run a simulation grid")
    p.add_argument("config", help="grid JSON file or bundled grid name")
    p.add_argument("--method", action="append", help="method(s) to run; repeat or comma-separate")
    p.add_argument("--reps", type=int, default=None, help=f"replications per cell (default {DEFAULT_REPS})")
    p.add_argument("--workers", type=int, default=None, help="worker processes (env METAMOB_WORKERS)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--allow-custom", action="store_true", help="accept grid values outside the standard design")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="pivot simulation results into figure layouts")
    p.add_argument("results", nargs="*", help="files written by simulate")
    p.add_argument("--layout", choices=tuple(LAYOUTS) + ("all",), default="all")
    p.add_argument("--out", default=None, help="output directory (default: JSON on stdout)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, DataError, ValueError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
