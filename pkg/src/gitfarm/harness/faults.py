"""Named fault injections against a local cluster.

Each fault models one real-world failure:

* ``KILL_BACKEND`` — a node dies without cleanup (leases must TTL out);
* ``STOP_UPSTREAM`` — the hosting provider becomes unreachable (syncs
  fail and back off; serving continues from the last mirror state);
* ``DROP_CLIENT`` — a client vanishes mid-session (running command must
  be killed, slots recycled);
* ``STALL_STATESTORE`` — the store stops answering for a while (new
  placements fail fast; active sessions are untouched).
"""

from __future__ import annotations

import random
from typing import Optional

from ..client import Session
from .cluster import LocalCluster

KILL_BACKEND = "KILL_BACKEND"
STOP_UPSTREAM = "STOP_UPSTREAM"
DROP_CLIENT = "DROP_CLIENT"
STALL_STATESTORE = "STALL_STATESTORE"

FAULT_KINDS = frozenset({KILL_BACKEND, STOP_UPSTREAM, DROP_CLIENT, STALL_STATESTORE})


def inject_fault(cluster: LocalCluster, kind: str, *,
                 node_id: Optional[str] = None,
                 session: Optional[Session] = None,
                 duration: float = 5.0,
                 rng: Optional[random.Random] = None) -> str:
    """Apply one fault; returns a short description of what was done."""
    if kind not in FAULT_KINDS:
        raise ValueError(f"unknown fault kind {kind!r} (choose from {sorted(FAULT_KINDS)})")

    if kind == KILL_BACKEND:
        victims = cluster.live_nodes()
        if not victims:
            raise RuntimeError("no live node left to kill")
        if node_id is not None:
            victim = cluster.node(node_id)
        else:
            victim = (rng or random).choice(victims)
        victim.crash()
        return f"killed {victim.config.node_id}"

    if kind == STOP_UPSTREAM:
        assert cluster.upstream is not None
        cluster.upstream.stop()
        return "upstream host stopped"

    if kind == DROP_CLIENT:
        if session is None:
            raise ValueError("DROP_CLIENT needs the session to drop")
        session.abort()
        return "client connection dropped"

    assert kind == STALL_STATESTORE
    assert cluster.kv_server is not None
    cluster.kv_server.stall(duration)
    return f"state store stalled for {duration:.1f}s"


def resume_upstream(cluster: LocalCluster) -> None:
    """Undo STOP_UPSTREAM; the host comes back on the same port."""
    assert cluster.upstream is not None
    cluster.upstream.start()
