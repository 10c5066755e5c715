"""Stateless routing tier: authenticate, authorize, lease, splice.

The gateway is the only thing clients talk to.  It terminates the client's
hello, swaps the bearer token for signed identity metadata, picks a backend
node through the state store's occupancy protocol, and then gets out of the
way: after the enriched hello is delivered it just shuttles raw frames in
both directions without decoding them.

Being stateless, a gateway holds no session state worth recovering — the
lease it takes is handed to the backend along with the session, and from
that moment the backend (or, if the backend dies, the lease TTL) is
responsible for giving it back.
"""

from __future__ import annotations

import argparse
import hmac
import logging
import signal
import socket
import sys
import threading
from dataclasses import dataclass, replace
from typing import Optional, Set

from .config import GatewayConfig, PolicyEntry, load_gateway_config
from .errors import (
    DecodeError,
    ErrorCode,
    NoCapacityError,
    StoreUnavailableError,
)
from .kvstore import KV, RemoteKV
from .protocol import (
    ClientHello,
    FrameStream,
    SessionClose,
    SessionError,
    identity_tag,
)
from .statestore import Lease, StateStore

log = logging.getLogger("gitfarm.gateway")

_HELLO_TIMEOUT = 10.0


@dataclass(frozen=True)
class Identity:
    """An authenticated caller, as established from a bearer token."""

    client_id: str
    display_name: str = ""


class Gateway:
    """Routes client sessions onto backend nodes."""

    def __init__(self, config: GatewayConfig, kv: Optional[KV] = None) -> None:
        self.config = config
        self._kv = kv
        self.store: Optional[StateStore] = None
        self._listener: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._stopping = threading.Event()
        self.address: Optional[str] = None
        self._run_sweeper = True

    # -- lifecycle ---------------------------------------------------------

    def start(self, run_sweeper: bool = True) -> None:
        if self._kv is None:
            self._kv = RemoteKV(self.config.statestore)
        self.store = StateStore(
            self._kv,
            self.config.nodes,
            lease_ttl=self.config.lease_ttl,
            staleness_threshold=self.config.staleness_threshold,
        )
        self._run_sweeper = run_sweeper
        if run_sweeper:
            self.store.start_sweeper()
        host, _, port = self.config.listen.rpartition(":")
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host or "127.0.0.1", int(port)))
        sock.listen(128)
        self._listener = sock
        bound = sock.getsockname()
        self.address = f"{bound[0]}:{bound[1]}"
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="gateway-accept", daemon=True
        )
        self._accept_thread.start()
        log.info("gateway listening on %s", self.address)

    def stop(self) -> None:
        self._stopping.set()
        self._retire_listener()
        if self.store is not None and self._run_sweeper:
            self.store.stop_sweeper()

    def _retire_listener(self) -> None:
        """Unblock the accept thread and wait it out before freeing the fd.

        Closing the fd under a concurrent accept() either leaves the kernel
        socket live (a retired gateway keeps fielding hellos) or donates the
        fd number to whatever socket is created next.  shutdown() wakes the
        acceptor without either hazard; the fd is closed only once no accept
        can be in flight.
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
            if thread.is_alive() and self.address:
                host, _, port = self.address.rpartition(":")
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

    def _accept_loop(self) -> None:
        listener = self._listener
        assert listener is not None
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
            threading.Thread(
                target=self._serve, args=(conn,), name="gateway-session", daemon=True
            ).start()

    # -- identity ------------------------------------------------------------

    def authenticate(self, token: str) -> Optional[Identity]:
        """Map a bearer token to an identity, in constant time per entry."""
        if not token:
            return None
        found: Optional[Identity] = None
        for entry in self.config.tokens:
            # Compare every entry so timing does not reveal table position.
            if hmac.compare_digest(entry.token.encode(), token.encode()):
                found = Identity(client_id=entry.client_id,
                                 display_name=entry.display_name)
        return found

    def authorize(self, identity: Identity, repo_id: str) -> Optional[PolicyEntry]:
        """Return the placement policy when access is allowed, else None.

        Unknown repositories and forbidden repositories are indistinguishable
        to the caller: both come back as a denial.
        """
        for policy in self.config.policies:
            if policy.client_id == identity.client_id and repo_id in policy.allowed_repos:
                return policy
        return None

    # -- session routing ---------------------------------------------------------

    def _serve(self, conn: socket.socket) -> None:
        client = FrameStream(conn)
        try:
            self._route(client)
        except Exception:  # pragma: no cover - last-resort guard
            log.exception("session routing crashed")
        finally:
            client.close()

    def _deny(self, client: FrameStream, code: str, message: str) -> None:
        try:
            client.send_message(SessionError(code=code, message=message))
            client.send_message(SessionClose(reason="rejected"))
        except OSError:
            pass

    def _read_hello(self, client: FrameStream) -> Optional[ClientHello]:
        client.sock.settimeout(_HELLO_TIMEOUT)
        try:
            msg = client.recv_message()
        except DecodeError as exc:
            self._deny(client, ErrorCode.INVALID_ARGUMENT, f"malformed hello: {exc}")
            return None
        except OSError:
            return None
        finally:
            try:
                client.sock.settimeout(None)
            except OSError:
                return None
        if msg is None:
            return None
        if not isinstance(msg, ClientHello):
            self._deny(client, ErrorCode.INVALID_ARGUMENT,
                       "first message must be client_hello")
            return None
        return msg

    def _route(self, client: FrameStream) -> None:
        hello = self._read_hello(client)
        if hello is None:
            return
        identity = self.authenticate(hello.identity_token)
        if identity is None:
            self._deny(client, ErrorCode.UNAUTHENTICATED, "invalid or missing token")
            return
        policy = self.authorize(identity, hello.repo_id)
        if policy is None:
            self._deny(client, ErrorCode.PERMISSION_DENIED, "access denied")
            return

        assert self.store is not None
        cluster_nodes = [n for n in self.config.nodes
                         if n.cluster_id == policy.cluster_id]
        tried: Set[str] = set()
        for _ in range(max(1, len(cluster_nodes))):
            try:
                lease = self.store.select_and_occupy(
                    hello.repo_id, policy.cluster_id, exclude=tried
                )
            except NoCapacityError:
                self._deny(client, ErrorCode.RESOURCE_EXHAUSTED,
                           "no capacity for repository")
                return
            except StoreUnavailableError:
                self._deny(client, ErrorCode.UNAVAILABLE, "placement state unavailable")
                return

            backend = self._dial(lease)
            if backend is None:
                tried.add(lease.node_id)
                self._safe_release(lease)
                continue

            enriched = replace(
                hello,
                identity_token="",
                client_id=identity.client_id,
                display_name=identity.display_name,
                lease_id=lease.lease_id,
                auth_tag=identity_tag(
                    self.config.shared_secret,
                    client_id=identity.client_id,
                    display_name=identity.display_name,
                    repo_id=hello.repo_id,
                    lease_id=lease.lease_id,
                    workspace_type=hello.workspace_type,
                ),
            )
            try:
                backend.send_message(enriched)
            except OSError:
                backend.close()
                tried.add(lease.node_id)
                self._safe_release(lease)
                continue
            # From here the backend owns the lease (it releases on recycle;
            # TTL covers a backend that dies holding it).
            self._splice(client, backend)
            return
        self._deny(client, ErrorCode.UNAVAILABLE, "no reachable node in cluster")

    def _dial(self, lease: Lease) -> Optional[FrameStream]:
        reg = next((n for n in self.config.nodes if n.node_id == lease.node_id), None)
        if reg is None:
            return None
        host, _, port = reg.address.rpartition(":")
        try:
            sock = socket.create_connection(
                (host, int(port)), timeout=self.config.connect_timeout
            )
        except OSError:
            log.warning("node %s unreachable at %s", lease.node_id, reg.address)
            return None
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return FrameStream(sock)

    def _safe_release(self, lease: Lease) -> None:
        try:
            assert self.store is not None
            self.store.release(lease)
        except StoreUnavailableError:
            log.warning("could not release lease %s; TTL will reclaim it",
                        lease.lease_id)

    # -- frame splicing -----------------------------------------------------------

    @staticmethod
    def _splice(client: FrameStream, backend: FrameStream) -> None:
        """Copy raw frames both ways until both directions finish.

        Half-close semantics preserved: when one side stops sending, the
        other still receives everything already in flight.
        """
        done = threading.Event()

        def pump(src: FrameStream, dst: FrameStream, last: bool) -> None:
            try:
                while True:
                    frame = src.recv_frame()
                    if frame is None:
                        break
                    dst.send_frame(frame)
            except (DecodeError, OSError):
                pass
            finally:
                try:
                    dst.sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                if last:
                    done.set()

        up = threading.Thread(target=pump, args=(client, backend, False),
                              name="gateway-up", daemon=True)
        up.start()
        # Backend -> client runs in this thread; the session is over when
        # the backend stops talking.
        pump(backend, client, True)
        done.wait(timeout=1.0)
        up.join(timeout=1.0)
        backend.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gitfarm-gateway", description="Run the session routing gateway."
    )
    parser.add_argument("--config", required=True, help="gateway config JSON")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    config = load_gateway_config(args.config)
    gateway = Gateway(config)
    gateway.start()
    print(f"gitfarm-gateway listening on {gateway.address}", flush=True)

    stop = threading.Event()

    def _sig(_signo, _frame):
        stop.set()

    signal.signal(signal.SIGTERM, _sig)
    signal.signal(signal.SIGINT, _sig)
    try:
        while not stop.wait(0.5):
            pass
    finally:
        gateway.stop()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
