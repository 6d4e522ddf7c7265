"""Command-line entry points: run, summarize, test, synth.

Exit codes: 0 on success, 1 for configuration problems (bad arguments or
config file), 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .harness import (
    ConfigError,
    ExperimentMatrix,
    emit_series,
    paired_t_test,
    read_trace,
    run_matrix,
    summarize,
)
from .pool import SyntheticParams, synth_pool


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we reserve 2
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="mfsearch",
                     description="Multifidelity active search benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment matrix")
    p_run.add_argument("config", help="YAML/JSON matrix config file")
    p_run.add_argument("--output", help="override the output directory")
    p_run.add_argument("--workers", type=int, default=1,
                       help="parallel worker processes across cells/seeds")

    p_sum = sub.add_parser("summarize", help="aggregate traces and emit series")
    p_sum.add_argument("traces", nargs="+",
                       help="trace files, globs, or directories")
    p_sum.add_argument("--output", required=True, help="series output directory")

    p_test = sub.add_parser("test", help="paired comparison of two policies")
    p_test.add_argument("traces", nargs="+",
                        help="trace files, globs, or directories")
    p_test.add_argument("--policy-a", required=True)
    p_test.add_argument("--policy-b", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic pool CSV")
    p_synth.add_argument("--out", required=True, help="CSV path to write")
    p_synth.add_argument("--n", type=int, default=2000)
    p_synth.add_argument("--dims", type=int, default=10)
    p_synth.add_argument("--clusters", type=int, default=8)
    p_synth.add_argument("--prevalence", type=float, default=0.05)
    p_synth.add_argument("--tightness", type=float, default=0.35)
    p_synth.add_argument("--seed", type=int, default=0)
    return parser


def _expand_traces(items):
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("**/*.jsonl")))
        elif any(ch in item for ch in "*?["):
            root = Path(".")
            paths.extend(sorted(root.glob(item)))
        else:
            paths.append(p)
    if not paths:
        raise ConfigError("no trace files matched")
    return paths


def _cmd_run(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise ConfigError(f"config file not found: {cfg_path}")
    with open(cfg_path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    matrix = ExperimentMatrix.from_config(cfg, output=args.output)
    paths = run_matrix(matrix, workers=args.workers)
    print(f"{len(paths)} traces complete under {matrix.output}")
    return 0


def _cmd_summarize(args) -> int:
    paths = _expand_traces(args.traces)
    summary = summarize(paths)
    written = emit_series(summary, args.output)
    for row in summary.rows:
        se = f"{row.se:.2f}" if row.se is not None else "n/a"
        print(f"{row.dataset} {row.policy} theta={row.theta:g} k={row.k}: "
              f"{row.mean:.2f} ({se}) over {row.repeats} repeats")
    for cell, stats in summary.pruning.items():
        if stats is None:
            continue
        name = f"{cell[0]} {cell[1]} theta={cell[2]:g} k={cell[3]}"
        total = stats["total_pruned_pct"]
        partial = stats["partial_pruned_pct"]
        print(f"{name}: coverage {100 * stats['coverage_rate']:.1f}%"
              + (f", total pruned {total:.1f}%" if total is not None else "")
              + (f", partial pruned {partial:.1f}%" if partial is not None else ""))
    print(f"wrote {len(written)} files to {args.output}")
    return 0


def _cmd_test(args) -> int:
    paths = _expand_traces(args.traces)
    by_policy = {}
    for path in paths:
        tr = read_trace(path)
        by_policy.setdefault(tr.config["policy"], {})[tr.seed] = tr.final_utility
    for name in (args.policy_a, args.policy_b):
        if name not in by_policy:
            raise ConfigError(f"no traces for policy {name!r}")
    shared = sorted(set(by_policy[args.policy_a]) & set(by_policy[args.policy_b]))
    if len(shared) < 2:
        raise ConfigError("need at least two shared seeds for a paired test")
    a = [by_policy[args.policy_a][s] for s in shared]
    b = [by_policy[args.policy_b][s] for s in shared]
    tstat, p = paired_t_test(a, b)
    print(json.dumps({
        "policy_a": args.policy_a, "policy_b": args.policy_b,
        "pairs": len(shared), "mean_a": float(np.mean(a)),
        "mean_b": float(np.mean(b)), "t": tstat, "p": p,
    }, indent=2))
    return 0


def _cmd_synth(args) -> int:
    params = SyntheticParams(n=args.n, dims=args.dims, clusters=args.clusters,
                             prevalence=args.prevalence,
                             tightness=args.tightness, seed=args.seed)
    pool, labels = synth_pool(params, neighbors=min(10, args.n - 1))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(args.dims)] + ["label"])
        for row, label in zip(pool.features, labels):
            writer.writerow([f"{v:.8g}" for v in row] + [int(label)])
    print(f"wrote {pool.n} points ({int(labels.sum())} positives) to {out}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    handlers = {"run": _cmd_run, "summarize": _cmd_summarize,
                "test": _cmd_test, "synth": _cmd_synth}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - surface as runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
