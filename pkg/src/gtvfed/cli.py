"""Command line front end.

Subcommands: gen-graph writes a seeded edge list, gen-data writes per-node
dataset CSVs, learn-graph fits edge weights to a discrepancy matrix, run
executes a config file and exports CSV/JSON reports, report prints a saved
report's summary. Exit codes: 0 success, 1 validation or I/O error, 2 a
bound check failed under --strict.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from gtvfed import __version__, seeds
from gtvfed import graph as graphmod
from gtvfed import graphlearn
from gtvfed.graph import GraphError
from gtvfed.harness import (
    ConfigError,
    export,
    gen_node_datasets,
    load_report_json,
    parse_config,
    run_experiment,
)
from gtvfed.localmodel import save_dataset_csv


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gtvfed",
        description="Networked federated learning over empirical graphs.",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    gg = sub.add_parser("gen-graph", help="write a seeded generated edge list")
    gg.add_argument(
        "--kind",
        required=True,
        choices=("erdos_renyi", "star", "chain", "two_cluster"),
    )
    gg.add_argument("--n", type=int, required=True, help="node count")
    gg.add_argument("--p", type=float, default=0.3, help="edge probability")
    gg.add_argument("--p-in", type=float, default=0.8)
    gg.add_argument("--p-out", type=float, default=0.05)
    gg.add_argument("--weight", type=float, default=1.0)
    gg.add_argument("--seed", type=int, default=0)
    gg.add_argument("--out", required=True, help="edge-list path")

    gd = sub.add_parser("gen-data", help="write per-node dataset CSVs")
    gd.add_argument("--n", type=int, required=True, help="node count")
    gd.add_argument("--d", type=int, required=True, help="feature dimension")
    gd.add_argument("--m-min", type=int, default=10)
    gd.add_argument("--m-max", type=int, default=10)
    gd.add_argument("--noise", type=float, default=0.1)
    gd.add_argument(
        "--model", choices=("shared", "clustered", "per_node"), default="shared"
    )
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--out", required=True, help="output directory")

    lg = sub.add_parser("learn-graph", help="fit edge weights to discrepancies")
    lg.add_argument("--discrepancies", required=True, help="discrepancy CSV path")
    lg.add_argument("--method", choices=("budget", "degree"), default="budget")
    lg.add_argument("--budget", type=float, help="ordered-pair weight budget")
    lg.add_argument("--d-max", type=float, help="target row sum")
    lg.add_argument("--seed", type=int, default=0)
    lg.add_argument("--out", required=True, help="edge-list path")

    rn = sub.add_parser("run", help="run a config file and export reports")
    rn.add_argument("--config", required=True, help="config file path")
    rn.add_argument("--out", required=True, help="output path prefix")
    rn.add_argument("--seed", type=int, default=None, help="override the config seed")
    rn.add_argument("--format", choices=("csv", "json", "both"), default="both")
    rn.add_argument(
        "--strict",
        action="store_true",
        help="exit with code 2 when any bound check fails",
    )

    rp = sub.add_parser("report", help="print the summary of a saved JSON report")
    rp.add_argument("--in", dest="path", required=True, help="report JSON path")
    rp.add_argument("--seed", type=int, default=None, help="accepted for symmetry")
    rp.add_argument("--out", default=None, help="also write the summary text here")
    rp.add_argument(
        "--strict",
        action="store_true",
        help="exit with code 2 when any bound check failed",
    )
    return ap


def _cmd_gen_graph(args) -> int:
    g = graphmod.generate(
        args.kind,
        args.n,
        weight=args.weight,
        seed=seeds.stream(args.seed, "graph"),
        p=args.p,
        p_in=args.p_in,
        p_out=args.p_out,
    )
    graphmod.save_edge_list(g, args.out)
    print(f"wrote {args.out} ({g.n} nodes, {g.num_edges} edges)")
    return 0


def _cmd_gen_data(args) -> int:
    datasets, _ = gen_node_datasets(
        args.n, args.d, args.m_min, args.m_max, args.noise, args.model, args.seed
    )
    os.makedirs(args.out, exist_ok=True)
    for i, ds in enumerate(datasets):
        save_dataset_csv(ds, os.path.join(args.out, f"node_{i}.csv"))
    print(f"wrote {args.n} dataset files under {args.out}")
    return 0


def _cmd_learn_graph(args) -> int:
    D = graphlearn.load_discrepancy_csv(args.discrepancies)
    if args.method == "budget":
        if args.budget is None:
            raise ConfigError(["--budget is required for --method budget"])
        g = graphlearn.learn_graph_budget(D, args.budget)
    else:
        if args.d_max is None:
            raise ConfigError(["--d-max is required for --method degree"])
        g = graphlearn.learn_graph_degree(
            D, args.d_max, seed=seeds.stream(args.seed, "graph")
        )
    graphmod.save_edge_list(g, args.out)
    print(f"wrote {args.out} ({g.n} nodes, {g.num_edges} edges)")
    return 0


def _summary_lines(summary: dict) -> list:
    lines = [
        f"algorithm: {summary.get('algorithm')}",
        f"nodes: {summary.get('n')}",
        f"events: {summary.get('events')}",
        f"terminal: {summary.get('terminal')}",
        f"converged: {summary.get('converged')}",
        f"final objective: {summary.get('final_objective')}",
        f"final dist to oracle: {summary.get('final_dist')}",
        f"final train err: {summary.get('final_train_err')}",
        f"final val err: {summary.get('final_val_err')}",
        f"overfit: {summary.get('overfit')}",
    ]
    if summary.get("baseline_err") is not None:
        lines.append(f"baseline err (noise^2): {summary['baseline_err']}")
    checks = summary.get("bound_checks") or []
    if not checks:
        lines.append("bound checks: none applicable")
    for c in checks:
        state = "ok" if c["holds"] else "FAILED"
        lines.append(
            f"check {c['name']}: {state} measured={c['measured']:.6e} "
            f"bound={c['bound']:.6e} margin={c['margin']:.6e}"
        )
    return lines


def _cmd_run(args) -> int:
    with open(args.config) as fh:
        text = fh.read()
    cfg = parse_config(text)
    if args.seed is not None:
        cfg.seed = int(args.seed)
        if cfg.dp is not None:
            cfg.dp = dataclasses.replace(cfg.dp, seed=cfg.seed)
    report = run_experiment(cfg)
    written = []
    if args.format in ("csv", "both"):
        written.append(export(report, "csv", args.out + ".csv"))
    if args.format in ("json", "both"):
        written.append(export(report, "json", args.out + ".json"))
    for line in _summary_lines(report.summary):
        print(line)
    for path in written:
        print(f"wrote {path}")
    if args.strict and any(not c["holds"] for c in report.summary["bound_checks"]):
        return 2
    return 0


def _cmd_report(args) -> int:
    data = load_report_json(args.path)
    summary = data.get("summary", {})
    lines = _summary_lines(summary)
    for line in lines:
        print(line)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    checks = summary.get("bound_checks") or []
    if args.strict and any(not c["holds"] for c in checks):
        return 2
    return 0


_COMMANDS = {
    "gen-graph": _cmd_gen_graph,
    "gen-data": _cmd_gen_data,
    "learn-graph": _cmd_learn_graph,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return 1
    except (GraphError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
