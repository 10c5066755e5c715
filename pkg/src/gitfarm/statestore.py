"""Availability registry: per-node free checkout/sandbox counts and leases.

The registry is written once against the CAS key-value contract, so the
in-process InMemoryKV and a shared KVServer behave identically. Key
layout:

    gf:{cluster}:{node}:{repo}:free -> integer
    gf:{cluster}:{node}:sb          -> integer
    gf:{cluster}:{node}:hb          -> timestamp (seconds)
    gf:lease:{lease_id}             -> serialized lease, TTL'd

Heartbeat timestamps come from the reporting node's clock and are only
ordered per node; staleness is judged against the reader's clock, which
is sound for same-host deployments and 5 s heartbeat granularity.
"""
from __future__ import annotations

import json
import logging
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .errors import NoCapacityError, StoreUnavailableError, UnknownNodeError
from .kvstore import KV

log = logging.getLogger(__name__)

DEFAULT_LEASE_TTL = 300.0  # seconds; equals the session cap
DEFAULT_STALENESS = 15.0
DEFAULT_HEARTBEAT_INTERVAL = 5.0
DEFAULT_SWEEP_INTERVAL = 1.0

_LEASE_PREFIX = "gf:lease:"
_ID_RE = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class NodeStatus:
    """One heartbeat payload: what a node can serve right now."""

    node_id: str
    cluster_id: str
    free_checkouts: dict[str, int]
    free_sandboxes: int
    heartbeat_time: float


@dataclass(frozen=True)
class Lease:
    """Gateway-side claim on one checkout, bounded by the session cap."""

    lease_id: str
    node_id: str
    repo_id: str
    acquired_at: float
    expires_at: float
    cluster_id: str

    def to_json(self) -> str:
        return json.dumps({
            "lease_id": self.lease_id,
            "node_id": self.node_id,
            "repo_id": self.repo_id,
            "acquired_at": self.acquired_at,
            "expires_at": self.expires_at,
            "cluster_id": self.cluster_id,
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, raw: str) -> "Lease":
        d = json.loads(raw)
        return cls(lease_id=d["lease_id"], node_id=d["node_id"], repo_id=d["repo_id"],
                   acquired_at=d["acquired_at"], expires_at=d["expires_at"],
                   cluster_id=d["cluster_id"])


@dataclass(frozen=True)
class NodeRegistration:
    """Deployment-config entry for one backend node."""

    node_id: str
    cluster_id: str
    address: str  # host:port of the node's session listener
    checkout_pools: dict[str, int] = field(default_factory=dict)
    sandbox_pool: int = 0

    def __post_init__(self):
        for name in (self.node_id, self.cluster_id):
            if not _ID_RE.match(name):
                raise ValueError(f"invalid id {name!r} (colons and spaces not allowed)")
        for repo in self.checkout_pools:
            if not _ID_RE.match(repo):
                raise ValueError(f"invalid repo id {repo!r}")


@dataclass(frozen=True)
class NodeView:
    """Read-only snapshot of one node in the registry."""

    node_id: str
    cluster_id: str
    free_checkouts: dict[str, int]
    free_sandboxes: int
    heartbeat_time: Optional[float]
    stale: bool


class StateStore:
    """Atomic occupy/release accounting over a CAS key-value store.

    Safe for concurrent callers: every mutation is a compare-and-swap
    on a single counter, retried on contention.
    """

    def __init__(self, kv: KV, registrations: Iterable[NodeRegistration], *,
                 lease_ttl: float = DEFAULT_LEASE_TTL,
                 staleness_threshold: float = DEFAULT_STALENESS):
        self.kv = kv
        self.lease_ttl = lease_ttl
        self.staleness_threshold = staleness_threshold
        self._nodes: dict[str, NodeRegistration] = {}
        for reg in registrations:
            if reg.node_id in self._nodes:
                raise ValueError(f"duplicate node registration: {reg.node_id}")
            self._nodes[reg.node_id] = reg
        self._sweeper: Optional[threading.Thread] = None
        self._sweeper_stop = threading.Event()

    # -- key layout ------------------------------------------------------

    @staticmethod
    def _free_key(cluster: str, node: str, repo: str) -> str:
        return f"gf:{cluster}:{node}:{repo}:free"

    @staticmethod
    def _sb_key(cluster: str, node: str) -> str:
        return f"gf:{cluster}:{node}:sb"

    @staticmethod
    def _hb_key(cluster: str, node: str) -> str:
        return f"gf:{cluster}:{node}:hb"

    @staticmethod
    def _lease_key(lease_id: str) -> str:
        return f"{_LEASE_PREFIX}{lease_id}"

    def registration(self, node_id: str) -> NodeRegistration:
        return self._nodes[node_id]

    @property
    def registrations(self) -> list[NodeRegistration]:
        return list(self._nodes.values())

    # -- status ingestion -------------------------------------------------

    def update_status(self, status: NodeStatus) -> bool:
        """Apply a heartbeat. Returns False when the status is older than
        what the registry already holds (never overwrites newer state)."""
        reg = self._nodes.get(status.node_id)
        if reg is None:
            raise UnknownNodeError(f"node {status.node_id!r} is not registered")
        if status.cluster_id != reg.cluster_id:
            raise UnknownNodeError(
                f"node {status.node_id!r} registered in cluster {reg.cluster_id!r}, "
                f"status claims {status.cluster_id!r}")
        for repo, count in status.free_checkouts.items():
            pool = reg.checkout_pools.get(repo)
            if pool is None:
                raise ValueError(f"status for unconfigured repo {repo!r} on {status.node_id}")
            if not 0 <= count <= pool:
                raise ValueError(f"free count {count} outside [0, {pool}] for {repo!r}")
        if not 0 <= status.free_sandboxes <= reg.sandbox_pool:
            raise ValueError(f"sandbox count {status.free_sandboxes} outside pool bounds")

        hb_key = self._hb_key(reg.cluster_id, reg.node_id)
        while True:
            current = self.kv.get(hb_key)
            if current is not None and float(current) >= status.heartbeat_time:
                return False
            if self.kv.cas(hb_key, current, repr(status.heartbeat_time)):
                break
        for repo in reg.checkout_pools:
            self.kv.set(self._free_key(reg.cluster_id, reg.node_id, repo),
                        str(status.free_checkouts.get(repo, 0)))
        self.kv.set(self._sb_key(reg.cluster_id, reg.node_id), str(status.free_sandboxes))
        return True

    # -- selection and accounting -----------------------------------------

    def _cluster_state(self, cluster_id: str) -> dict[str, str]:
        return self.kv.scan(f"gf:{cluster_id}:")

    def _eligible(self, reg: NodeRegistration, repo_id: str, state: dict[str, str],
                  now: float) -> Optional[tuple[int, int]]:
        hb = state.get(self._hb_key(reg.cluster_id, reg.node_id))
        if hb is None or now - float(hb) >= self.staleness_threshold:
            return None
        free = int(state.get(self._free_key(reg.cluster_id, reg.node_id, repo_id), 0))
        sandboxes = int(state.get(self._sb_key(reg.cluster_id, reg.node_id), 0))
        if free <= 0 or sandboxes <= 0:
            return None
        return free, sandboxes

    def _bump(self, key: str, delta: int, ceiling: int) -> bool:
        """CAS-retry a counter by delta within [0, ceiling]."""
        while True:
            raw = self.kv.get(key)
            current = int(raw) if raw is not None else 0
            desired = current + delta
            if desired < 0:
                return False
            desired = min(desired, ceiling)
            if self.kv.cas(key, raw, str(desired)):
                return True

    def select_and_occupy(self, repo_id: str, cluster_id: str, *,
                          exclude: frozenset[str] = frozenset(),
                          now: Optional[float] = None) -> Lease:
        """Grant a lease on the eligible node with the most free checkouts
        for repo_id (ties break to the lexicographically smallest node_id),
        atomically decrementing its checkout and sandbox counters.

        Raises NoCapacityError when every eligible node is out of
        checkouts or sandboxes; callers surface this as throttling.
        """
        now = time.time() if now is None else now
        candidates_exist = any(
            reg.cluster_id == cluster_id and repo_id in reg.checkout_pools
            for reg in self._nodes.values())
        if not candidates_exist:
            raise NoCapacityError(f"repo {repo_id!r} not configured in cluster {cluster_id!r}")

        for _ in range(32):
            state = self._cluster_state(cluster_id)
            ranked: list[tuple[int, str]] = []
            for reg in self._nodes.values():
                if reg.cluster_id != cluster_id or reg.node_id in exclude:
                    continue
                if repo_id not in reg.checkout_pools:
                    continue
                counts = self._eligible(reg, repo_id, state, now)
                if counts is not None:
                    ranked.append((counts[0], reg.node_id))
            if not ranked:
                raise NoCapacityError(f"no free capacity for {repo_id!r} in {cluster_id!r}")
            ranked.sort(key=lambda item: (-item[0], item[1]))
            free, node_id = ranked[0]
            reg = self._nodes[node_id]
            free_key = self._free_key(cluster_id, node_id, repo_id)
            if not self.kv.cas(free_key, str(free), str(free - 1)):
                continue  # lost the race on this counter; re-rank
            if not self._bump(self._sb_key(cluster_id, node_id), -1, reg.sandbox_pool):
                self._bump(free_key, +1, reg.checkout_pools[repo_id])
                continue
            lease = Lease(lease_id=uuid.uuid4().hex, node_id=node_id, repo_id=repo_id,
                          acquired_at=now, expires_at=now + self.lease_ttl,
                          cluster_id=cluster_id)
            self.kv.set(self._lease_key(lease.lease_id), lease.to_json(),
                        ttl=self.lease_ttl + 60.0)
            return lease
        raise NoCapacityError(f"capacity contention for {repo_id!r} in {cluster_id!r}")

    def release(self, lease: Union[Lease, str]) -> bool:
        """Return a lease's capacity. Idempotent: duplicate releases of one
        lease_id increment counters exactly once. Unknown leases warn and
        return False."""
        lease_id = lease.lease_id if isinstance(lease, Lease) else lease
        key = self._lease_key(lease_id)
        raw = self.kv.get(key)
        if raw is None:
            log.warning("release of unknown or already-released lease %s", lease_id)
            return False
        if not self.kv.cas(key, raw, None):  # atomic test-and-delete
            log.warning("lease %s released concurrently", lease_id)
            return False
        self._restore_counts(Lease.from_json(raw))
        return True

    def _restore_counts(self, lease: Lease) -> None:
        reg = self._nodes.get(lease.node_id)
        if reg is None:
            return
        self._bump(self._free_key(lease.cluster_id, lease.node_id, lease.repo_id),
                   +1, reg.checkout_pools.get(lease.repo_id, 0))
        self._bump(self._sb_key(lease.cluster_id, lease.node_id), +1, reg.sandbox_pool)

    def expire_leases(self, now: Optional[float] = None) -> list[Lease]:
        """Reclaim every lease with expires_at <= now, each exactly once."""
        now = time.time() if now is None else now
        reclaimed = []
        for key, raw in self.kv.scan(_LEASE_PREFIX).items():
            try:
                lease = Lease.from_json(raw)
            except (ValueError, KeyError):
                log.warning("dropping unparseable lease at %s", key)
                self.kv.delete(key)
                continue
            if lease.expires_at > now:
                continue
            if self.kv.cas(key, raw, None):
                self._restore_counts(lease)
                reclaimed.append(lease)
        return reclaimed

    # -- observation -------------------------------------------------------

    def live_leases(self) -> list[Lease]:
        out = []
        for raw in self.kv.scan(_LEASE_PREFIX).values():
            try:
                out.append(Lease.from_json(raw))
            except (ValueError, KeyError):
                continue
        return out

    def snapshot(self, cluster_id: Optional[str] = None,
                 now: Optional[float] = None) -> dict[str, NodeView]:
        now = time.time() if now is None else now
        views = {}
        for reg in self._nodes.values():
            if cluster_id is not None and reg.cluster_id != cluster_id:
                continue
            state = self.kv.scan(f"gf:{reg.cluster_id}:{reg.node_id}:")
            hb_raw = state.get(self._hb_key(reg.cluster_id, reg.node_id))
            hb = float(hb_raw) if hb_raw is not None else None
            views[reg.node_id] = NodeView(
                node_id=reg.node_id,
                cluster_id=reg.cluster_id,
                free_checkouts={
                    repo: int(state.get(self._free_key(reg.cluster_id, reg.node_id, repo), 0))
                    for repo in reg.checkout_pools},
                free_sandboxes=int(state.get(self._sb_key(reg.cluster_id, reg.node_id), 0)),
                heartbeat_time=hb,
                stale=hb is None or now - hb >= self.staleness_threshold,
            )
        return views

    # -- background expiry --------------------------------------------------

    def start_sweeper(self, interval: float = DEFAULT_SWEEP_INTERVAL) -> None:
        if self._sweeper is not None:
            return
        self._sweeper_stop.clear()

        def loop():
            while not self._sweeper_stop.wait(interval):
                try:
                    self.expire_leases()
                except StoreUnavailableError:
                    log.warning("lease sweep skipped: store unreachable")
                except Exception:
                    log.exception("lease sweep failed")

        self._sweeper = threading.Thread(target=loop, name="lease-sweeper", daemon=True)
        self._sweeper.start()

    def stop_sweeper(self) -> None:
        if self._sweeper is None:
            return
        self._sweeper_stop.set()
        self._sweeper.join(timeout=5)
        self._sweeper = None
