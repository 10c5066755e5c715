"""Self-contained local cluster: upstream host, store, nodes, gateway.

Everything runs in one process on loopback sockets, with real git
subprocesses and the real wire protocol end to end.  Tests and benchmarks
get an honest cluster without any deployment machinery, and fault drills
can reach into the pieces (stop the upstream host, crash a node, stall the
store) exactly the way the named faults require.
"""

from __future__ import annotations

import json
import logging
import shutil
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from ..backend.node import BackendNode
from ..client import Session
from ..config import (
    BackendConfig,
    GatewayConfig,
    PolicyEntry,
    RepositoryConfig,
    TokenEntry,
)
from ..gateway import Gateway
from ..kvstore import KVServer
from .fixtures import FixtureInfo, FixtureSpec, GitHTTPServer, generate_fixture

log = logging.getLogger("gitfarm.harness.cluster")

DEFAULT_TOKENS = (
    TokenEntry(token="tok-alice", client_id="alice", display_name="Alice Dev"),
    TokenEntry(token="tok-bob", client_id="bob", display_name="Bob Ops"),
)


@dataclass
class ClusterSpec:
    """Knobs for a local cluster; defaults are tuned for fast tests."""

    repos: Tuple[FixtureSpec, ...] = (FixtureSpec(repo_id="demo"),)
    nodes: int = 1
    cluster_id: str = "local"
    checkout_pool_size: int = 4
    sandbox_pool_size: int = 8
    pooling: bool = True
    heartbeat_interval: float = 0.5
    staleness_threshold: float = 2.0
    lease_ttl: float = 15.0
    sweep_interval: float = 0.25
    session_cap: float = 60.0
    per_command_timeout: float = 30.0
    allowlist: Tuple[str, ...] = ("git",)
    sync_interval: float = 300.0
    sync_enabled: bool = True
    refresh_ready_on_sync: bool = True
    output_cap_bytes: int = 4 * 1024 * 1024
    shared_secret: str = "local-cluster-secret"
    tokens: Tuple[TokenEntry, ...] = DEFAULT_TOKENS
    # None = grant the first token's client every repo and the second none.
    policies: Optional[Tuple[PolicyEntry, ...]] = None
    deliver_webhooks: bool = True


@dataclass
class LocalCluster:
    """An assembled cluster; use as a context manager or call start/stop."""

    root: Path
    spec: ClusterSpec = field(default_factory=ClusterSpec)
    fixtures: Dict[str, FixtureInfo] = field(default_factory=dict)
    upstream: Optional[GitHTTPServer] = None
    kv_server: Optional[KVServer] = None
    nodes: List[BackendNode] = field(default_factory=list)
    gateway: Optional[Gateway] = None
    _started: bool = False

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "LocalCluster":
        if self._started:
            return self
        self._started = True
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

        upstream_root = self.root / "upstream"
        for repo_spec in self.spec.repos:
            self.fixtures[repo_spec.repo_id] = generate_fixture(repo_spec, upstream_root)
        self.upstream = GitHTTPServer(
            {rid: info.path for rid, info in self.fixtures.items()},
            on_push=self._deliver_push_webhooks if self.spec.deliver_webhooks else None,
        )
        self.upstream.start()

        self.kv_server = KVServer()
        self.kv_server.start()

        for i in range(self.spec.nodes):
            config = self._backend_config(i)
            node = BackendNode(config)
            node.start()
            self.nodes.append(node)

        gw_config = GatewayConfig(
            listen="127.0.0.1:0",
            statestore=self.kv_server.endpoint,
            shared_secret=self.spec.shared_secret,
            nodes=[node.registration() for node in self.nodes],
            tokens=list(self.spec.tokens),
            policies=list(self._policies()),
            staleness_threshold=self.spec.staleness_threshold,
            lease_ttl=self.spec.lease_ttl,
        )
        self.gateway = Gateway(gw_config)
        self.gateway.start(run_sweeper=False)
        assert self.gateway.store is not None
        self.gateway.store.start_sweeper(self.spec.sweep_interval)
        return self

    def stop(self) -> None:
        if not self._started:
            return
        self._started = False
        if self.gateway is not None:
            self.gateway.store.stop_sweeper()
            self.gateway.stop()
        for node in self.nodes:
            try:
                node.stop(drain_timeout=3.0)
            except Exception:  # pragma: no cover - teardown best effort
                log.exception("node %s stop failed", node.config.node_id)
        if self.kv_server is not None:
            self.kv_server.stop()
        if self.upstream is not None:
            self.upstream.stop()

    def destroy(self) -> None:
        self.stop()
        shutil.rmtree(self.root, ignore_errors=True)

    def __enter__(self) -> "LocalCluster":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    # -- wiring helpers ----------------------------------------------------

    def _backend_config(self, index: int) -> BackendConfig:
        assert self.upstream is not None and self.kv_server is not None
        node_id = f"node-{index + 1:02d}"
        return BackendConfig(
            node_id=node_id,
            cluster_id=self.spec.cluster_id,
            data_dir=str(self.root / node_id),
            repositories=[
                RepositoryConfig(
                    repo_id=spec.repo_id,
                    upstream_url=self.upstream.url_for(spec.repo_id),
                    checkout_pool_size=self.spec.checkout_pool_size,
                    sync_interval=self.spec.sync_interval,
                    pooling=self.spec.pooling,
                )
                for spec in self.spec.repos
            ],
            statestore=self.kv_server.endpoint,
            sandbox_pool_size=self.spec.sandbox_pool_size,
            allowlist=self.spec.allowlist,
            per_command_timeout=self.spec.per_command_timeout,
            session_cap=self.spec.session_cap,
            output_cap_bytes=self.spec.output_cap_bytes,
            heartbeat_interval=self.spec.heartbeat_interval,
            sync_enabled=self.spec.sync_enabled,
            refresh_ready_on_sync=self.spec.refresh_ready_on_sync,
            shared_secret=self.spec.shared_secret,
        )

    def _policies(self) -> Tuple[PolicyEntry, ...]:
        if self.spec.policies is not None:
            return self.spec.policies
        all_repos = tuple(spec.repo_id for spec in self.spec.repos)
        entries = []
        if self.spec.tokens:
            entries.append(PolicyEntry(
                client_id=self.spec.tokens[0].client_id,
                cluster_id=self.spec.cluster_id,
                allowed_repos=all_repos,
            ))
        # Any further tokens authenticate but may touch nothing, which is
        # exactly what permission-denial tests need out of the box.
        return tuple(entries)

    def _deliver_push_webhooks(self, repo_name: str) -> None:
        payload = json.dumps({"repo_id": repo_name}).encode("utf-8")
        for node in self.nodes:
            if node.crashed.is_set() or not node.http_address:
                continue
            url = f"http://{node.http_address}/events/push"
            request = urllib.request.Request(
                url, data=payload, headers={"Content-Type": "application/json"},
            )
            try:
                with urllib.request.urlopen(request, timeout=2.0):
                    pass
            except OSError:
                log.debug("webhook to %s failed", url)

    # -- conveniences -----------------------------------------------------------

    @property
    def endpoint(self) -> str:
        assert self.gateway is not None and self.gateway.address
        return self.gateway.address

    @property
    def token(self) -> str:
        return self.spec.tokens[0].token

    @property
    def store(self):
        assert self.gateway is not None
        return self.gateway.store

    def node(self, node_id: str) -> BackendNode:
        for node in self.nodes:
            if node.config.node_id == node_id:
                return node
        raise KeyError(node_id)

    def live_nodes(self) -> List[BackendNode]:
        return [n for n in self.nodes if not n.crashed.is_set()]

    def session(self, repo_id: Optional[str] = None, *,
                token: Optional[str] = None,
                timeout: Optional[float] = 60.0) -> Session:
        repo = repo_id or self.spec.repos[0].repo_id
        return Session(self.endpoint, token=token or self.token,
                       repo_id=repo, timeout=timeout)

    def commit_upstream(self, repo_id: str, branch: str = "main",
                        message: Optional[str] = None) -> str:
        """Advance an upstream branch by one commit (plumbing, no webhook)."""
        from ..gitutil import git_out

        bare = self.fixtures[repo_id].path
        tip = git_out(["rev-parse", "--verify", f"refs/heads/{branch}"], cwd=bare)
        tree = git_out(["rev-parse", f"{tip}^{{tree}}"], cwd=bare)
        message = message or f"upstream change {time.time():.3f}"
        new = git_out(
            ["commit-tree", tree, "-p", tip, "-m", message],
            cwd=bare,
            env_extra={
                "GIT_AUTHOR_NAME": "Upstream", "GIT_AUTHOR_EMAIL": "up@gitfarm.test",
                "GIT_COMMITTER_NAME": "Upstream", "GIT_COMMITTER_EMAIL": "up@gitfarm.test",
            },
        )
        git_out(["update-ref", f"refs/heads/{branch}", new], cwd=bare)
        return new

    def notify_webhook(self, repo_id: str) -> None:
        """Deliver the push webhook exactly as the hosting provider would."""
        self._deliver_push_webhooks(repo_id)

    # -- invariant checks ---------------------------------------------------------

    def conservation_report(self) -> Dict[str, object]:
        """Compare store-advertised capacity with node-local truth.

        Meant to be called at quiescence (no sessions in flight).  Crashed
        nodes are excluded from the local comparison; what matters for them
        is that no lease rows survive.
        """
        assert self.gateway is not None and self.gateway.store is not None
        store = self.gateway.store
        mismatches: List[str] = []
        leases = store.live_leases()
        view = store.snapshot(self.spec.cluster_id)
        for node in self.live_nodes():
            status = node.current_status()
            seen = view.get(node.config.node_id)
            if seen is None:
                mismatches.append(f"{node.config.node_id}: missing from store")
                continue
            if seen.free_sandboxes != status.free_sandboxes:
                mismatches.append(
                    f"{node.config.node_id}: sandboxes store={seen.free_sandboxes} "
                    f"local={status.free_sandboxes}")
            for rid, free in status.free_checkouts.items():
                got = seen.free_checkouts.get(rid)
                if got != free:
                    mismatches.append(
                        f"{node.config.node_id}/{rid}: checkouts store={got} local={free}")
        return {
            "mismatches": mismatches,
            "live_leases": [lease.lease_id for lease in leases],
            "ok": not mismatches and not leases,
        }

    def settle(self, timeout: float = 10.0) -> Dict[str, object]:
        """Wait for heartbeats/sweeps to reconcile, then report conservation."""
        deadline = time.time() + timeout
        report: Dict[str, object] = {}
        while time.time() < deadline:
            for node in self.live_nodes():
                node.emit_heartbeat()
            report = self.conservation_report()
            if report["ok"]:
                return report
            time.sleep(0.3)
        return report
