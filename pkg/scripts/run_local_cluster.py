#!/usr/bin/env python3
"""Stand up a throwaway local cluster and keep it serving until Ctrl-C.

Prints the gateway endpoint, the issued tokens, and copy-pasteable
`gitfarm` invocations against the generated demo repository.  Handy for
poking at the wire protocol, the CLI, or the node side channels without
writing a test first.

    python3 scripts/run_local_cluster.py --nodes 2 --pool-size 4
"""
from __future__ import annotations

import argparse
import shutil
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from gitfarm.harness.cluster import ClusterSpec, LocalCluster
from gitfarm.harness.fixtures import BranchSpec, FixtureSpec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Run a self-contained cluster for interactive use.")
    parser.add_argument("--root", help="work directory (default: temp dir)")
    parser.add_argument("--nodes", type=int, default=1)
    parser.add_argument("--pool-size", type=int, default=4)
    parser.add_argument("--sandboxes", type=int, default=8)
    parser.add_argument("--file-count", type=int, default=300)
    parser.add_argument("--commit-count", type=int, default=20)
    parser.add_argument("--sync-interval", type=float, default=30.0,
                        help="periodic mirror sync interval in seconds")
    parser.add_argument("--allow-sh", action="store_true",
                        help="also allow `sh` inside sessions (default: git only)")
    parser.add_argument("--demo", action="store_true",
                        help="run one scripted session before serving")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    root = Path(args.root) if args.root else Path(
        tempfile.mkdtemp(prefix="gitfarm-local-"))

    fixture = FixtureSpec(
        repo_id="demo",
        file_count=args.file_count,
        directory_depth=3,
        commit_count=args.commit_count,
        seed=7,
        branches=(BranchSpec(name="feature",
                             fork_at=max(1, args.commit_count // 2),
                             commits=3),),
    )
    spec = ClusterSpec(
        repos=(fixture,),
        nodes=args.nodes,
        checkout_pool_size=args.pool_size,
        sandbox_pool_size=args.sandboxes,
        sync_interval=args.sync_interval,
        allowlist=("git", "sh") if args.allow_sh else ("git",),
    )

    cluster = LocalCluster(root=root, spec=spec)
    print(f"building cluster in {root} ...", flush=True)
    cluster.start()
    try:
        print()
        print(f"  gateway endpoint : {cluster.endpoint}")
        for entry in spec.tokens:
            print(f"  token            : {entry.token}  ({entry.client_id})")
        print(f"  repository       : {fixture.repo_id} "
              f"(tip {cluster.fixtures['demo'].tip[:10]})")
        for node in cluster.nodes:
            print(f"  node {node.config.node_id:<12}: sessions {node.session_address}"
                  f"  http http://{node.http_address}/metrics")
        print()
        print("try:")
        print(f"  gitfarm exec --endpoint {cluster.endpoint} "
              f"--token {spec.tokens[0].token} --repo demo -- rev-parse HEAD")
        print(f"  gitfarm exec --endpoint {cluster.endpoint} "
              f"--token {spec.tokens[0].token} --repo demo -- log -n 3 --oneline")
        print()

        if args.demo:
            with cluster.session("demo") as session:
                head = session.run_args("rev-parse", "HEAD")
                stat = session.run_args("show", "--stat", "--format=%H %s", "HEAD")
            print("demo session:")
            print(f"  rev-parse HEAD -> {head.stdout.decode().strip()}")
            print("  show --stat HEAD (first lines):")
            for line in stat.stdout.decode().splitlines()[:5]:
                print(f"    {line}")
            print()

        print("serving; Ctrl-C to tear down.")
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        print("\nshutting down ...")
    finally:
        cluster.stop()
        if not args.root:
            shutil.rmtree(root, ignore_errors=True)
        else:
            print(f"work directory kept at {root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
