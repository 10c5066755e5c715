"""`gitfarm-bench`: spin up a local cluster and run a named scenario.

Scenarios
  acquire-warm      session acquisition against pre-warmed pools
  acquire-cold      the same with pooling disabled (clone per session)
  readonly-scan     random read-only commands verified against an oracle
  compliance-audit  chained OWNERS inspection flow
  base-change       remote merge-base plus derived-ref push flow

Each run prints a summary table and can persist the full report (raw
samples included) as JSON via --out.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import tempfile
from pathlib import Path
from typing import List, Optional

from .bench import (
    bench_acquire,
    workload_base_change,
    workload_compliance_audit,
    workload_readonly_scan,
)
from .cluster import ClusterSpec, LocalCluster
from .fixtures import BranchSpec, FixtureSpec

SCENARIOS = ("acquire-warm", "acquire-cold", "readonly-scan",
             "compliance-audit", "base-change")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gitfarm-bench",
        description="Benchmark scenarios against a throwaway local cluster.",
    )
    parser.add_argument("scenario", choices=SCENARIOS)
    parser.add_argument("--trials", type=int, default=100,
                        help="trials for acquisition scenarios")
    parser.add_argument("--sessions", type=int, default=20,
                        help="sessions for workload scenarios")
    parser.add_argument("--rate", type=float, default=None,
                        help="target sessions per second (workload scenarios)")
    parser.add_argument("--duration", type=float, default=None,
                        help="target run length in seconds; with --rate the "
                             "session count becomes rate*duration")
    parser.add_argument("--parallelism", type=int, default=4)
    parser.add_argument("--commands", type=int, default=5,
                        help="commands per session (readonly-scan)")
    parser.add_argument("--nodes", type=int, default=1)
    parser.add_argument("--pool-size", type=int, default=4)
    parser.add_argument("--sandboxes", type=int, default=8)
    parser.add_argument("--file-count", type=int, default=500)
    parser.add_argument("--commit-count", type=int, default=50)
    parser.add_argument("--depth", type=int, default=3)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--no-verify", action="store_true",
                        help="skip oracle verification in readonly-scan")
    parser.add_argument("--root", help="work directory (default: temp dir)")
    parser.add_argument("--keep", action="store_true",
                        help="keep the work directory after the run")
    parser.add_argument("--out", help="write the full JSON report here")
    parser.add_argument("--verbose", action="store_true")
    return parser


def _cluster_spec(args: argparse.Namespace) -> ClusterSpec:
    branches = ()
    if args.scenario == "base-change":
        fork_at = max(1, args.commit_count // 2)
        branches = (BranchSpec(name="feature", fork_at=fork_at, commits=3),)
    fixture = FixtureSpec(
        repo_id="bench",
        file_count=args.file_count,
        directory_depth=args.depth,
        commit_count=args.commit_count,
        seed=args.seed,
        branches=branches,
    )
    return ClusterSpec(
        repos=(fixture,),
        nodes=args.nodes,
        checkout_pool_size=args.pool_size,
        sandbox_pool_size=args.sandboxes,
        pooling=args.scenario != "acquire-cold",
    )


def run_scenario(args: argparse.Namespace, cluster: LocalCluster):
    if args.scenario in ("acquire-warm", "acquire-cold"):
        return bench_acquire(cluster, trials=args.trials, scenario=args.scenario)
    if args.scenario == "readonly-scan":
        return workload_readonly_scan(
            cluster, sessions=args.sessions, commands_per_session=args.commands,
            parallelism=args.parallelism, seed=args.seed,
            verify=not args.no_verify, rate=args.rate, duration=args.duration)
    if args.scenario == "compliance-audit":
        return workload_compliance_audit(
            cluster, sessions=args.sessions, parallelism=args.parallelism,
            seed=args.seed, rate=args.rate, duration=args.duration)
    if args.scenario == "base-change":
        return workload_base_change(
            cluster, sessions=args.sessions, parallelism=args.parallelism,
            rate=args.rate, duration=args.duration)
    raise AssertionError("unreachable")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    root = Path(args.root) if args.root else Path(
        tempfile.mkdtemp(prefix="gitfarm-bench-"))
    cluster = LocalCluster(root=root, spec=_cluster_spec(args))
    try:
        print(f"building cluster in {root} ...", flush=True)
        cluster.start()
        print("running", args.scenario, "...", flush=True)
        report = run_scenario(args, cluster)
    finally:
        cluster.stop()
        if not args.keep and not args.root:
            shutil.rmtree(root, ignore_errors=True)
        elif args.keep:
            print(f"work directory kept at {root}")

    print(report.format_table())
    if args.out:
        report.save(args.out)
        print(f"report written to {args.out}")
    failures = report.counters.get("failures", 0) + \
        report.counters.get("mismatches", 0) + \
        report.counters.get("session_errors", 0)
    return 1 if failures else 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
