"""Command-line entry point: ``rotfda {gen,simulate,analyze,compare}``.

Exit codes: 0 success, 2 invalid config or inputs, 3 data problems,
4 instance too large for exact enumeration.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analytics
from .config import OUT_ENV, RunConfig, read_config
from .designs import FULL, validate_design
from .errors import CapacityError, ConfigError, DataError, RotationError, ValidationError
from .harness import (
    compare_designs,
    composite_optimum,
    format_alpha,
    planned_allocation,
    run_scenario,
    to_jsonable,
    write_comparison_csv,
)
from .population import save_population

def _load(cfg: RunConfig):
    return cfg.population.load()


def cmd_gen(cfg: RunConfig) -> list[Path]:
    if cfg.population.csv is not None:
        raise ConfigError("population.synthetic: gen needs a synthetic population spec")
    pop = _load(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.output_dir / "population.csv"
    save_population(pop, path)
    return [path]


def cmd_simulate(cfg: RunConfig, workers: int = 1) -> list[Path]:
    pop = _load(cfg)
    report = run_scenario(cfg.scenario, pop, workers=workers)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "report.csv"]
    report.write_json(paths[0])
    report.write_csv(paths[1])
    if cfg.scenario.estimator.composite:
        p = out / "composite_optimum.csv"
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "alpha_opt", "Q_opt", "mise"])
            for r in composite_optimum(report):
                w.writerow([repr(r["delta"]), format_alpha(to_jsonable(r["alpha_opt"])), repr(r["Q_opt"]), repr(r["mise"])])
        paths.append(p)
    return paths


def analyze_rows(cfg: RunConfig, pop):
    """Analytic summaries and kernels for every design row of the config."""
    sc = cfg.scenario
    if sc.allocation.kind == "adaptive":
        raise ConfigError("allocation.kind: analyze needs a deterministic allocation (proportional or neyman)")
    rows = []
    for i, alpha in enumerate(sc.design.alphas):
        spec = sc.design.spec(alpha, pop)
        trace, _ = planned_allocation(pop, spec, sc.allocation)
        design = validate_design(spec, trace, pop)
        cov = analytics.cov_kernel(pop, design)
        row = {"alpha": to_jsonable(alpha), "design": design.kind, "m": design.m,
               "mise": analytics.mise(cov), "var_ise_gaussian": analytics.gaussian_var_ise(cov)}
        if design.kind == FULL:
            row["var_ise_asym"] = analytics.var_ise_full_asym(pop, design) if design.m else None
        else:
            row["var_ise_asym"] = analytics.var_ise_partial_asym(pop, design)
            if cfg.corollary and np.all(design.sizes == design.sizes[0]):
                c = analytics.corollary_decay(design)
                row["var_ise_corollary"] = analytics.var_ise_corollary(pop, design.sizes[0], c, design.G_cumulative)
        if cfg.exact:
            row["var_ise_exact"] = analytics.var_ise_exact_small(pop, design)
        rows.append((row, cov))
    return rows


def cmd_analyze(cfg: RunConfig) -> list[Path]:
    pop = _load(cfg)
    rows = analyze_rows(cfg, pop)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (row, cov) in enumerate(rows):
        p = out / f"kernel_{i:02d}.csv"
        cov.to_csv(p)
        row["kernel_file"] = p.name
        paths.append(p)
    doc = {"scenario_id": cfg.scenario.scenario_id, "rows": [r for r, _ in rows]}
    p = out / "analytic.json"
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(p)
    p = out / "analytic.csv"
    with p.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "alpha", "metric", "value"])
        for r, _ in rows:
            for k in ("mise", "var_ise_asym", "var_ise_gaussian", "var_ise_corollary", "var_ise_exact"):
                if r.get(k) is not None:
                    w.writerow([cfg.scenario.scenario_id, format_alpha(r["alpha"]), k, repr(r[k])])
    paths.append(p)
    return paths


def cmd_compare(report_paths, out_dir: Path) -> list[Path]:
    reports = []
    for rp in report_paths:
        try:
            reports.append(json.loads(Path(rp).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise DataError(f"report not found: {rp}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{rp}: not a JSON report ({exc})") from None
    rows = compare_designs(reports)
    out_dir.mkdir(parents=True, exist_ok=True)
    p_csv, p_json = out_dir / "comparison.csv", out_dir / "comparison.json"
    write_comparison_csv(rows, p_csv)
    p_json.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [p_csv, p_json]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rotfda", description="Rotation sampling designs for curve data.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("gen", "write a synthetic population CSV"),
                           ("simulate", "run the Monte Carlo scenario grid"),
                           ("analyze", "write analytic kernels, MISE and Var(ISE)")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("compare", help="compare simulation reports against the first one")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    return ap


def _exit_code(exc: RotationError) -> int:
    if isinstance(exc, CapacityError):
        return 4
    if isinstance(exc, DataError):
        return 3
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            out = Path(args.out or os.environ.get(OUT_ENV) or ".")
            paths = cmd_compare(args.reports, out)
        else:
            if args.workers < 1:
                raise ValidationError("--workers must be >= 1")
            if args.seed is not None and not 0 <= args.seed < 2**64:
                raise ValidationError("--seed must be an unsigned 64-bit integer")
            cfg = read_config(args.config, seed=args.seed, out=args.out, env=os.environ)
            if args.command == "gen":
                paths = cmd_gen(cfg)
            elif args.command == "simulate":
                paths = cmd_simulate(cfg, args.workers)
            else:
                paths = cmd_analyze(cfg)
    except RotationError as exc:
        print(f"rotfda {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
