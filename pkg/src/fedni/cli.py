"""Command line entry point: ``fedni gen | run | ablate | verify``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .datagen import CohortSpec, generate_population, load_dataset, save_dataset
from .harness import (ConfigError, dumps_report, load_config, parse_kv, parse_matrix, report_rows,
                      run_ablation, run_experiment)

log = logging.getLogger("fedni")


def load_cohort_spec(path) -> CohortSpec:
    text = Path(path).read_text(encoding="utf-8")
    spec = parse_kv(text, CohortSpec)
    if not isinstance(spec.pheno_spec, list):
        raise ConfigError("pheno_spec cannot be set from a flat config file")
    spec.validate()
    return spec


def write_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


def cmd_gen(args) -> int:
    spec = load_cohort_spec(args.spec) if args.spec else CohortSpec()
    if os.environ.get("FEDNI_SEED"):
        spec.seed = int(os.environ["FEDNI_SEED"])
    G = generate_population(spec)
    save_dataset(G, args.out)
    log.info("wrote %d nodes x %d features to %s", G.n, G.X.shape[1], args.out)
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    G = load_dataset(args.data)
    report = run_experiment(cfg, G, quality_episodes=args.quality_episodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dumps_report(report), encoding="utf-8")
    write_csv(report_rows(report), out / "cells.csv")
    agg = report["aggregate"]
    print(" ".join(f"{k}={v['mean']:.4f}" for k, v in agg.items()))
    return 0


def cmd_ablate(args) -> int:
    matrix = parse_matrix(Path(args.matrix).read_text(encoding="utf-8"))
    G = load_dataset(args.data)
    res = run_ablation(matrix, G, quality_episodes=args.quality_episodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(dumps_report(res), encoding="utf-8")
    rows = [{"config": name, "metric": m, "mean": v["mean"], "std": v["std"], "count": v["count"]}
            for name, table in res["table"].items() for m, v in table.items()]
    write_csv(rows, out / "table.csv")
    write_csv(res["tests"], out / "ttests.csv")
    for r in rows:
        if r["metric"] == "accuracy":
            print(f"{r['config']}: accuracy {r['mean']:.4f} +- {r['std']:.4f}")
    return 0


def cmd_verify(args) -> int:
    import pytest

    tests = Path(args.tests) if args.tests else Path(__file__).resolve().parents[2] / "tests"
    if not tests.exists():
        print(f"test directory {tests} not found", file=sys.stderr)
        return 2
    extra = [] if args.acceptance else ["--ignore", str(tests / "test_acceptance.py")]
    return int(pytest.main([str(tests), "-q", *extra]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedni", description="Federated graph learning with network inpainting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic cohort file")
    g.add_argument("--spec", help="cohort spec (key = value); defaults to the desk-scale cohort")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="cross-validated run of one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--quality-episodes", type=int, default=0,
                   help="held-out masking episodes per client for inpainting quality")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("ablate", help="run a matrix of configurations with pairwise t-tests")
    a.add_argument("--matrix", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--quality-episodes", type=int, default=0)
    a.set_defaults(fn=cmd_ablate)

    v = sub.add_parser("verify", help="run the oracle and property test suites")
    v.add_argument("--tests", help="test directory (default: the source checkout's tests/)")
    v.add_argument("--acceptance", action="store_true", help="include the slow acceptance suite")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"fedni: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
