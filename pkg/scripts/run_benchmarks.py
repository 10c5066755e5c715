#!/usr/bin/env python3
"""Run the standard benchmark battery and collect JSON reports.

Covers the four numbers the design cares about:

  * warm acquisition latency (pre-warmed checkout + sandbox binding)
  * cold acquisition latency (pooling disabled, clone per session)
  * read-only scan throughput with oracle verification
  * the chained merge-base + push flow

By default everything runs against a 500-file fixture so the battery
finishes in about a minute.  ``--include-large`` adds a 50k-file tree to
the warm/cold comparison, which is where pooling actually pays off.

    python3 scripts/run_benchmarks.py --out-dir bench-results
"""
from __future__ import annotations

import argparse
import shutil
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from gitfarm.harness.bench import (
    bench_acquire,
    percentile,
    workload_base_change,
    workload_readonly_scan,
)
from gitfarm.harness.cluster import ClusterSpec, LocalCluster
from gitfarm.harness.fixtures import BranchSpec, FixtureSpec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Benchmark battery over throwaway local clusters.")
    parser.add_argument("--out-dir", default="bench-results",
                        help="directory for the JSON reports")
    parser.add_argument("--trials", type=int, default=200,
                        help="warm acquisition trials per fixture")
    parser.add_argument("--cold-trials", type=int, default=30)
    parser.add_argument("--sessions", type=int, default=20,
                        help="sessions for the workload scenarios")
    parser.add_argument("--include-large", action="store_true",
                        help="also measure a 50k-file fixture (slower)")
    parser.add_argument("--seed", type=int, default=7)
    return parser


def _fixture(label: str, file_count: int, seed: int) -> FixtureSpec:
    commits = 8 if file_count >= 10_000 else 30
    return FixtureSpec(
        repo_id=label,
        file_count=file_count,
        directory_depth=4 if file_count >= 10_000 else 3,
        commit_count=commits,
        seed=seed,
        branches=(BranchSpec(name="feature", fork_at=commits // 2, commits=3),),
    )


def _with_cluster(spec: ClusterSpec, fn):
    root = Path(tempfile.mkdtemp(prefix="gitfarm-bench-"))
    cluster = LocalCluster(root=root, spec=spec)
    try:
        cluster.start()
        return fn(cluster)
    finally:
        cluster.stop()
        shutil.rmtree(root, ignore_errors=True)


def run_battery(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fixtures = [_fixture("small", 500, args.seed)]
    if args.include_large:
        fixtures.append(_fixture("large", 50_000, args.seed))

    failures = 0
    summary_lines = []
    for fixture in fixtures:
        label = fixture.repo_id
        print(f"== fixture {label}: {fixture.file_count} files, "
              f"{fixture.commit_count} commits ==", flush=True)

        warm = _with_cluster(
            ClusterSpec(repos=(fixture,), checkout_pool_size=4,
                        sandbox_pool_size=8),
            lambda c: bench_acquire(c, trials=args.trials,
                                    scenario=f"acquire-warm-{label}",
                                    capacity_retry_limit=1_000_000))
        warm.save(out_dir / f"acquire-warm-{label}.json")
        print(warm.format_table(), flush=True)

        cold = _with_cluster(
            ClusterSpec(repos=(fixture,), checkout_pool_size=2,
                        sandbox_pool_size=4, pooling=False),
            lambda c: bench_acquire(c, trials=args.cold_trials,
                                    scenario=f"acquire-cold-{label}",
                                    capacity_retry_limit=1_000_000))
        cold.save(out_dir / f"acquire-cold-{label}.json")
        print(cold.format_table(), flush=True)

        warm_p = percentile(warm.samples["acquire_seconds"], 50)
        cold_p = percentile(cold.samples["acquire_seconds"], 50)
        summary_lines.append(
            f"{label}: warm p50 {warm_p * 1000:.2f}ms, cold p50 "
            f"{cold_p * 1000:.1f}ms, ratio {cold_p / max(warm_p, 1e-9):.0f}x")
        failures += warm.counters.get("failures", 0)
        failures += cold.counters.get("failures", 0)

    scan_fixture = fixtures[0]
    scan = _with_cluster(
        ClusterSpec(repos=(scan_fixture,), checkout_pool_size=4,
                    sandbox_pool_size=8),
        lambda c: workload_readonly_scan(c, sessions=args.sessions,
                                         parallelism=4, seed=args.seed))
    scan.save(out_dir / "readonly-scan.json")
    print(scan.format_table(), flush=True)
    failures += scan.counters.get("mismatches", 0)
    failures += scan.counters.get("session_errors", 0)

    base = _with_cluster(
        ClusterSpec(repos=(scan_fixture,), checkout_pool_size=4,
                    sandbox_pool_size=8),
        lambda c: workload_base_change(c, sessions=max(5, args.sessions // 2),
                                       parallelism=4))
    base.save(out_dir / "base-change.json")
    print(base.format_table(), flush=True)
    failures += base.counters.get("mismatches", 0)
    failures += base.counters.get("session_errors", 0)

    print()
    print("acquisition summary:")
    for line in summary_lines:
        print(f"  {line}")
    print(f"reports in {out_dir}/")
    if failures:
        print(f"FAILURES: {failures} (see reports)")
        return 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    rc = run_battery(args)
    print(f"total {time.perf_counter() - started:.1f}s")
    return rc


if __name__ == "__main__":
    sys.exit(main())
