"""Backend node process: listeners, pools, heartbeats, sync scheduler.

A node owns everything needed to serve sessions for its configured
repositories: bare mirrors, warm checkout pools, a sandbox pool, a session
listener, and an HTTP side-channel for push webhooks, health, and metrics.
It reports free capacity to the state store on a fixed heartbeat.

``crash()`` exists for fault drills: it drops every socket and kills every
child process without any cleanup, which is as close to ``kill -9`` as an
in-process simulation gets.  Leases held by a crashed node are reclaimed by
the store's TTL sweep, not by the node.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import socket
import statistics
import sys
import threading
import time
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Dict, Optional

from ..config import BackendConfig, load_backend_config
from ..kvstore import KV, RemoteKV
from ..protocol import FrameStream
from ..errors import StoreUnavailableError
from ..statestore import NodeRegistration, NodeStatus, StateStore
from .executor import CommandExecutor, SpawnHook
from .pools import CheckoutPool, SandboxPool
from .repos import BareRepoManager
from .session import SessionRunner, SessionTrace

log = logging.getLogger("gitfarm.backend.node")


class BackendNode:
    """One execution node in a cluster."""

    def __init__(self, config: BackendConfig, kv: Optional[KV] = None,
                 spawn_hook: Optional[SpawnHook] = None) -> None:
        self.config = config
        self._kv = kv
        self.crashed = threading.Event()
        self._stopping = threading.Event()
        self._started = False

        self.repos = BareRepoManager(config, on_tips_changed=self._tips_changed)
        self.pools: Dict[str, CheckoutPool] = {}
        self.sandboxes = SandboxPool(
            Path(config.data_dir) / "sandboxes", config.sandbox_pool_size
        )
        self.executor = CommandExecutor(
            per_command_timeout=config.per_command_timeout,
            output_cap=config.output_cap_bytes,
            spawn_hook=spawn_hook,
        )
        self.trace = SessionTrace()
        self.store: Optional[StateStore] = None
        self.runner: Optional[SessionRunner] = None

        self._acquire_samples: deque = deque(maxlen=10_000)
        self._listener: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._hb_thread: Optional[threading.Thread] = None
        self._http: Optional[ThreadingHTTPServer] = None
        self._http_thread: Optional[threading.Thread] = None
        self._conn_lock = threading.Lock()
        self._conns: set = set()
        self.session_address: Optional[str] = None
        self.http_address: Optional[str] = None

    # -- wiring ------------------------------------------------------------

    def registration(self) -> NodeRegistration:
        return NodeRegistration(
            node_id=self.config.node_id,
            cluster_id=self.config.cluster_id,
            address=self.session_address or self.config.session_listen,
            checkout_pools={r.repo_id: r.checkout_pool_size
                            for r in self.config.repositories},
            sandbox_pool=self.config.sandbox_pool_size,
        )

    def _tips_changed(self, repo_id: str, tips: Dict[str, str]) -> None:
        if not self.config.refresh_ready_on_sync:
            return
        pool = self.pools.get(repo_id)
        if pool is None:
            return
        threading.Thread(
            target=self._refresh_idle_safely, args=(pool,),
            name=f"refresh-{repo_id}", daemon=True,
        ).start()

    @staticmethod
    def _refresh_idle_safely(pool: CheckoutPool) -> None:
        try:
            pool.refresh_idle()
        except Exception:  # pragma: no cover - defensive
            log.exception("idle refresh pass failed")

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        """Clone mirrors, warm pools, bind listeners, start heartbeats."""
        if self._started:
            raise RuntimeError("node already started")
        self._started = True
        self.repos.ensure_all()
        for repo in self.config.repositories:
            pool = CheckoutPool(repo, self.repos, Path(self.config.data_dir) / "checkouts")
            pool.warm()
            self.pools[repo.repo_id] = pool

        self._listener = self._bind(self.config.session_listen)
        host, port = self._listener.getsockname()[:2]
        self.session_address = f"{host}:{port}"

        if self._kv is None:
            self._kv = RemoteKV(self.config.statestore)
        self.store = StateStore(
            self._kv, [self.registration()],
            staleness_threshold=self.config.heartbeat_interval * 3,
        )

        self.runner = SessionRunner(
            config=self.config,
            pools=self.pools,
            sandboxes=self.sandboxes,
            executor=self.executor,
            store=self.store,
            trace=self.trace,
            crashed=self.crashed,
            on_acquire=self._acquire_samples.append,
        )

        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"{self.config.node_id}-accept", daemon=True
        )
        self._accept_thread.start()

        self._start_http()
        self.emit_heartbeat()
        self._hb_thread = threading.Thread(
            target=self._heartbeat_loop, name=f"{self.config.node_id}-hb", daemon=True
        )
        self._hb_thread.start()
        if self.config.sync_enabled:
            self.repos.start_scheduler()
        log.info("node %s serving sessions on %s (http %s)",
                 self.config.node_id, self.session_address, self.http_address)

    @staticmethod
    def _bind(listen: str) -> socket.socket:
        host, _, port = listen.rpartition(":")
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host or "127.0.0.1", int(port)))
        sock.listen(128)
        return sock

    def stop(self, drain_timeout: float = 10.0) -> None:
        """Graceful shutdown: stop accepting, drain sessions, final beat."""
        if not self._started or self.crashed.is_set():
            return
        self._stopping.set()
        self._retire_listener()
        deadline = time.time() + drain_timeout
        while self.runner and self.runner.active_count() > 0 and time.time() < deadline:
            time.sleep(0.05)
        self.repos.stop_scheduler()
        self._stop_http()
        if self._hb_thread is not None:
            self._hb_thread.join(timeout=self.config.heartbeat_interval + 1)
            self._hb_thread = None
        try:
            self.emit_heartbeat()
        except Exception:
            pass

    def crash(self) -> None:
        """Abrupt death: no recycling, no lease release, no goodbye."""
        self.crashed.set()
        self._stopping.set()
        self._retire_listener()
        self._stop_http()
        with self._conn_lock:
            conns = list(self._conns)
        for stream in conns:
            try:
                stream.sock.close()
            except OSError:
                pass
        self.executor.kill_all()
        self.repos.stop_scheduler()
        log.info("node %s crashed (simulated)", self.config.node_id)

    def _retire_listener(self) -> None:
        """Unblock the accept thread and wait it out before freeing the fd.

        close() alone is not safe here: a close racing a concurrent accept()
        leaves the kernel socket accepting (so a stale node can be handed a
        brand-new session), or frees the fd number under the in-flight call.
        shutdown() wakes the acceptor without releasing the fd; only once the
        thread is gone does anyone close the socket.
        """
        listener = self._listener
        thread = self._accept_thread
        if listener is not None:
            try:
                listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if thread is not None and thread is not threading.current_thread():
            thread.join(timeout=2.0)
            if thread.is_alive() and self.session_address:
                # Pre-shutdown kernels ignore shutdown() on listeners; pop the
                # accept with a throwaway connection instead.
                host, _, port = self.session_address.rpartition(":")
                try:
                    socket.create_connection((host, int(port)), timeout=1.0).close()
                except OSError:
                    pass
                thread.join(timeout=2.0)
            if thread.is_alive():
                return  # leak the fd rather than yank it from under accept()
        self._accept_thread = None
        if listener is not None:
            try:
                listener.close()
            except OSError:
                pass
            self._listener = None

    # -- session listener -------------------------------------------------------

    def _accept_loop(self) -> None:
        assert self._listener is not None
        listener = self._listener
        while not self._stopping.is_set():
            try:
                conn, _ = listener.accept()
            except OSError:
                return
            if self._stopping.is_set():
                try:
                    conn.close()
                except OSError:
                    pass
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            stream = FrameStream(conn, max_payload=self.config.output_cap_bytes)
            with self._conn_lock:
                self._conns.add(stream)
            threading.Thread(
                target=self._serve_conn, args=(stream,),
                name=f"{self.config.node_id}-session", daemon=True,
            ).start()

    def _serve_conn(self, stream: FrameStream) -> None:
        try:
            assert self.runner is not None
            self.runner.handle(stream)
        finally:
            with self._conn_lock:
                self._conns.discard(stream)

    # -- heartbeats ----------------------------------------------------------------

    def current_status(self) -> NodeStatus:
        return NodeStatus(
            node_id=self.config.node_id,
            cluster_id=self.config.cluster_id,
            free_checkouts={rid: pool.ready_count() for rid, pool in self.pools.items()},
            free_sandboxes=self.sandboxes.idle_count(),
            heartbeat_time=time.time(),
        )

    def emit_heartbeat(self) -> bool:
        """Publish free-slot counts to the state store; False if skipped."""
        if self.store is None or self.crashed.is_set():
            return False
        try:
            return self.store.update_status(self.current_status())
        except StoreUnavailableError:
            log.warning("heartbeat skipped: state store unreachable")
            return False

    def _heartbeat_loop(self) -> None:
        while not self._stopping.wait(self.config.heartbeat_interval):
            if self.crashed.is_set():
                return
            try:
                self.emit_heartbeat()
            except Exception:  # pragma: no cover - defensive
                log.exception("heartbeat failed")

    # -- HTTP side channel ------------------------------------------------------------

    def _start_http(self) -> None:
        if not self.config.http_listen:
            return
        host, _, port = self.config.http_listen.rpartition(":")
        node = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # noqa: D102 - silence
                pass

            def _send(self, status: int, body: bytes,
                      ctype: str = "text/plain; charset=utf-8") -> None:
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path == "/health":
                    self._send(200, b"ok\n")
                elif self.path == "/metrics":
                    self._send(200, node.metrics_text().encode("utf-8"))
                else:
                    self._send(404, b"not found\n")

            def do_POST(self):
                if self.path != "/events/push":
                    self._send(404, b"not found\n")
                    return
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b"{}"
                try:
                    payload = json.loads(raw.decode("utf-8"))
                    repo_id = payload["repo_id"]
                except (ValueError, KeyError, UnicodeDecodeError):
                    self._send(400, b"bad request\n")
                    return
                if repo_id not in node.pools and repo_id not in {
                    r.repo_id for r in node.config.repositories
                }:
                    self._send(404, b"unknown repository\n")
                    return
                node.repos.notify_push(repo_id)
                self._send(202, b"accepted\n")

        self._http = ThreadingHTTPServer((host or "127.0.0.1", int(port)), Handler)
        self._http.daemon_threads = True
        addr = self._http.server_address
        self.http_address = f"{addr[0]}:{addr[1]}"
        self._http_thread = threading.Thread(
            target=self._http.serve_forever, kwargs={"poll_interval": 0.1},
            name=f"{self.config.node_id}-http", daemon=True,
        )
        self._http_thread.start()

    def _stop_http(self) -> None:
        if self._http is not None:
            self._http.shutdown()
            self._http.server_close()
            self._http = None
        if self._http_thread is not None:
            self._http_thread.join(timeout=2.0)
            self._http_thread = None

    # -- metrics -------------------------------------------------------------------------

    def metrics_text(self) -> str:
        lines = [
            f"node_id {self.config.node_id}",
            f"cluster_id {self.config.cluster_id}",
            f"active_sessions {self.runner.active_count() if self.runner else 0}",
            f"sandboxes_idle {self.sandboxes.idle_count()}",
            f"sandboxes_total {self.sandboxes.size()}",
            f"sessions_traced {len(self.trace.all())}",
        ]
        samples = sorted(self._acquire_samples)
        if samples:
            lines.append(f"acquire_count {len(samples)}")
            lines.append(f"acquire_p50_ms {1000 * _nearest_rank(samples, 50):.3f}")
            lines.append(f"acquire_p95_ms {1000 * _nearest_rank(samples, 95):.3f}")
            lines.append(f"acquire_mean_ms {1000 * statistics.fmean(samples):.3f}")
        for rid, pool in sorted(self.pools.items()):
            state = self.repos.state(rid)
            lines.append(f"repo_ready{{repo={rid}}} {pool.ready_count()}")
            lines.append(f"repo_degraded{{repo={rid}}} {int(state.degraded)}")
            lines.append(f"repo_sync_failures{{repo={rid}}} {state.consecutive_failures}")
            lines.append(f"repo_sync_lag_seconds{{repo={rid}}} {self.repos.sync_lag(rid):.1f}")
        return "\n".join(lines) + "\n"


def _nearest_rank(sorted_samples, pct: float) -> float:
    if not sorted_samples:
        return 0.0
    k = max(1, int(-(-pct * len(sorted_samples) // 100)))  # ceil without math import
    return sorted_samples[min(k, len(sorted_samples)) - 1]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gitfarm-backend", description="Run one execution node."
    )
    parser.add_argument("--config", required=True, help="backend config JSON")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    config = load_backend_config(args.config)
    node = BackendNode(config)
    node.start()
    print(f"gitfarm-backend {config.node_id} sessions={node.session_address} "
          f"http={node.http_address}", flush=True)

    stop = threading.Event()

    def _sig(_signo, _frame):
        stop.set()

    signal.signal(signal.SIGTERM, _sig)
    signal.signal(signal.SIGINT, _sig)
    try:
        while not stop.wait(0.5):
            pass
    finally:
        node.stop()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
