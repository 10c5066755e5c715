"""Per-connection session execution.

One OS thread owns each session socket.  A small reader thread feeds
decoded frames into a queue so the main loop can execute a command and
still notice a client disconnect mid-command (the reader kills the running
process group the moment the socket dies).  Commands execute strictly in
submission order; results stream back in the same order.

A session ends one of three ways:

* gracefully, when the client sends session_close;
* fatally, when a protocol violation, spawn failure, or the session
  deadline produces a terminal session_error followed by session_close;
* abruptly, when the connection drops — any running command is killed and
  the slots are recycled as usual.

Whatever the path, recycling happens exactly once: sandbox scrubbed,
checkout refreshed back to READY, lease released.  The only exception is a
simulated node crash, which deliberately skips cleanup so leases must
age out through the store's TTL sweep (that is the point of the fault).
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from ..config import BackendConfig
from ..errors import DecodeError, ErrorCode
from ..protocol import (
    ClientHello,
    FrameStream,
    SessionAck,
    SessionClose,
    SessionError,
    ServerResult,
    SubmitCommand,
    WIRE_VERSION,
    WORKSPACE_FULL_CHECKOUT,
    validate_command,
    verify_identity_tag,
)
from ..errors import StoreUnavailableError
from ..statestore import StateStore
from .executor import CommandExecutor, SpawnFailure
from .pools import CheckoutPool, CheckoutSlot, SandboxPool, SandboxSlot

log = logging.getLogger("gitfarm.backend.session")

_HELLO_TIMEOUT = 10.0


@dataclass
class SessionContext:
    """Everything a running session owns."""

    session_id: str
    repo_id: str
    client_id: str
    display_name: str
    lease_id: Optional[str]
    checkout: CheckoutSlot
    sandbox: SandboxSlot
    deadline: float
    results_so_far: List = field(default_factory=list)
    seen_aliases: set = field(default_factory=set)
    disconnected: threading.Event = field(default_factory=threading.Event)


@dataclass
class TraceEntry:
    """Post-hoc record of one session, kept for audit and tests."""

    session_id: str
    repo_id: str = ""
    client_id: str = ""
    attempted: List[str] = field(default_factory=list)
    completed: List[str] = field(default_factory=list)
    status: str = "open"
    started_at: float = 0.0
    finished_at: float = 0.0


class SessionTrace:
    """Bounded, thread-safe log of recent sessions on a node."""

    def __init__(self, cap: int = 8192) -> None:
        self._cap = cap
        self._lock = threading.Lock()
        self._entries: "OrderedDict[str, TraceEntry]" = OrderedDict()

    def open(self, session_id: str, *, repo_id: str, client_id: str) -> None:
        with self._lock:
            self._entries[session_id] = TraceEntry(
                session_id=session_id, repo_id=repo_id, client_id=client_id,
                started_at=time.time(),
            )
            while len(self._entries) > self._cap:
                self._entries.popitem(last=False)

    def attempt(self, session_id: str, alias: str) -> None:
        with self._lock:
            entry = self._entries.get(session_id)
            if entry is not None:
                entry.attempted.append(alias)

    def complete(self, session_id: str, alias: str) -> None:
        with self._lock:
            entry = self._entries.get(session_id)
            if entry is not None:
                entry.completed.append(alias)

    def close(self, session_id: str, status: str) -> None:
        with self._lock:
            entry = self._entries.get(session_id)
            if entry is not None and entry.status == "open":
                entry.status = status
                entry.finished_at = time.time()

    def get(self, session_id: str) -> Optional[TraceEntry]:
        with self._lock:
            return self._entries.get(session_id)

    def all(self) -> List[TraceEntry]:
        with self._lock:
            return list(self._entries.values())


class SessionRunner:
    """Drives the session protocol for one backend node."""

    def __init__(
        self,
        *,
        config: BackendConfig,
        pools: Dict[str, CheckoutPool],
        sandboxes: SandboxPool,
        executor: CommandExecutor,
        store: Optional[StateStore],
        trace: SessionTrace,
        crashed: threading.Event,
        on_acquire=None,
    ) -> None:
        self._config = config
        self._pools = pools
        self._sandboxes = sandboxes
        self._executor = executor
        self._store = store
        self._trace = trace
        self._crashed = crashed
        self._on_acquire = on_acquire
        self._allowlist = frozenset(config.allowlist)
        self._seq = itertools.count(1)
        self._active_lock = threading.Lock()
        self._active: Dict[str, SessionContext] = {}

    # -- introspection ---------------------------------------------------

    def active_count(self) -> int:
        with self._active_lock:
            return len(self._active)

    def active_sessions(self) -> List[SessionContext]:
        with self._active_lock:
            return list(self._active.values())

    # -- entry point -------------------------------------------------------

    def handle(self, stream: FrameStream) -> None:
        """Run one session over an accepted connection; never raises."""
        try:
            self._handle(stream)
        except Exception:  # pragma: no cover - last-resort guard
            log.exception("session handler crashed")
        finally:
            stream.close()

    def _handle(self, stream: FrameStream) -> None:
        hello = self._read_hello(stream)
        if hello is None:
            return
        error = self._vet_hello(hello)
        if error is not None:
            self._send_fatal(stream, *error)
            if hello.lease_id:
                self._release_lease(hello.lease_id)
            return

        session_id = f"{self._config.node_id}-s{next(self._seq):06d}"
        ctx = self._acquire(stream, hello, session_id)
        if ctx is None:
            return
        self._trace.open(session_id, repo_id=ctx.repo_id, client_id=ctx.client_id)
        with self._active_lock:
            self._active[session_id] = ctx
        status = "aborted"
        try:
            status = self._serve(stream, ctx)
        finally:
            self._trace.close(session_id, status)
            with self._active_lock:
                self._active.pop(session_id, None)
            if not self._crashed.is_set():
                self._recycle(ctx)

    # -- hello -------------------------------------------------------------

    def _read_hello(self, stream: FrameStream) -> Optional[ClientHello]:
        stream.sock.settimeout(_HELLO_TIMEOUT)
        try:
            msg = stream.recv_message()
        except DecodeError as exc:
            self._send_fatal(stream, ErrorCode.INVALID_ARGUMENT, f"malformed hello: {exc}")
            return None
        except OSError:
            return None
        finally:
            try:
                stream.sock.settimeout(None)
            except OSError:
                return None
        if msg is None:
            return None
        if not isinstance(msg, ClientHello):
            self._send_fatal(stream, ErrorCode.INVALID_ARGUMENT,
                             "first message must be client_hello")
            return None
        return msg

    def _vet_hello(self, hello: ClientHello):
        if hello.version != WIRE_VERSION:
            return (ErrorCode.INVALID_ARGUMENT,
                    f"unsupported protocol version {hello.version}")
        if hello.workspace_type != WORKSPACE_FULL_CHECKOUT:
            return (ErrorCode.INVALID_ARGUMENT,
                    f"unsupported workspace type {hello.workspace_type!r}")
        if hello.repo_id not in self._pools:
            return (ErrorCode.INVALID_ARGUMENT,
                    f"repository {hello.repo_id!r} not served by this node")
        if not verify_identity_tag(self._config.shared_secret, hello):
            return (ErrorCode.UNAUTHENTICATED, "identity tag missing or invalid")
        return None

    # -- slot acquisition ----------------------------------------------------

    def _acquire(self, stream: FrameStream, hello: ClientHello,
                 session_id: str) -> Optional[SessionContext]:
        started = time.perf_counter()
        pool = self._pools[hello.repo_id]
        checkout = None
        sandbox = None
        try:
            checkout = pool.acquire()
            if checkout is not None:
                sandbox = self._sandboxes.acquire()
        except Exception as exc:
            log.exception("slot acquisition failed")
            self._send_fatal(stream, ErrorCode.INTERNAL, f"slot acquisition failed: {exc}")
            if checkout is not None:
                pool.recycle(checkout)
            self._release_lease(hello.lease_id)
            return None
        if checkout is None or sandbox is None:
            if checkout is not None:
                pool.recycle(checkout)
            self._send_fatal(stream, ErrorCode.RESOURCE_EXHAUSTED,
                             "no free slot for repository despite lease")
            self._release_lease(hello.lease_id)
            return None

        self._sandboxes.bind(
            sandbox,
            session_id=session_id,
            client_id=hello.client_id or "",
            display_name=hello.display_name or "",
            repo_id=hello.repo_id,
        )
        acquire_seconds = time.perf_counter() - started
        if self._on_acquire is not None:
            self._on_acquire(acquire_seconds)
        ctx = SessionContext(
            session_id=session_id,
            repo_id=hello.repo_id,
            client_id=hello.client_id or "",
            display_name=hello.display_name or "",
            lease_id=hello.lease_id,
            checkout=checkout,
            sandbox=sandbox,
            deadline=time.time() + self._config.session_cap,
        )
        ack = SessionAck(
            session_id=session_id,
            node_id=self._config.node_id,
            checkout_slot=checkout.slot_id,
            sandbox_slot=sandbox.sandbox_id,
            acquire_seconds=acquire_seconds,
        )
        try:
            stream.send_message(ack)
        except OSError:
            ctx.disconnected.set()
            self._recycle(ctx)
            return None
        return ctx

    # -- main loop -----------------------------------------------------------

    def _serve(self, stream: FrameStream, ctx: SessionContext) -> str:
        inbox: "queue.Queue" = queue.Queue()
        reader = threading.Thread(
            target=self._read_loop, args=(stream, inbox, ctx),
            name=f"{ctx.session_id}-reader", daemon=True,
        )
        reader.start()

        while True:
            remaining = ctx.deadline - time.time()
            if remaining <= 0:
                self._send_fatal(stream, ErrorCode.DEADLINE_EXCEEDED,
                                 "session deadline exceeded")
                return "fatal:DEADLINE_EXCEEDED"
            try:
                kind, payload = inbox.get(timeout=remaining)
            except queue.Empty:
                continue  # re-check deadline

            if kind == "eof":
                return "disconnected"
            if kind == "bad_frame":
                self._send_fatal(stream, ErrorCode.INVALID_ARGUMENT,
                                 f"malformed frame: {payload}")
                return "fatal:INVALID_ARGUMENT"

            msg = payload
            if isinstance(msg, SessionClose):
                try:
                    stream.send_message(SessionClose(reason="completed"))
                except OSError:
                    pass
                return "completed"
            if not isinstance(msg, SubmitCommand):
                self._send_fatal(
                    stream, ErrorCode.INVALID_ARGUMENT,
                    f"unexpected message type {type(msg).__name__} mid-session")
                return "fatal:INVALID_ARGUMENT"

            outcome = self._run_command(stream, ctx, msg)
            if outcome is not None:
                return outcome

    def _run_command(self, stream: FrameStream, ctx: SessionContext,
                     msg: SubmitCommand) -> Optional[str]:
        """Execute one submitted command; return a terminal status or None."""
        cmd = msg.command
        rule = validate_command(cmd, self._allowlist)
        if rule is None and cmd.alias in ctx.seen_aliases:
            rule = f"duplicate alias: {cmd.alias}"
        if rule is not None:
            self._send_fatal(stream, ErrorCode.INVALID_ARGUMENT, rule)
            return "fatal:INVALID_ARGUMENT"
        ctx.seen_aliases.add(cmd.alias)
        self._trace.attempt(ctx.session_id, cmd.alias)
        try:
            outcome = self._executor.execute(
                session_id=ctx.session_id,
                command=cmd,
                checkout=ctx.checkout,
                sandbox=ctx.sandbox,
                client_id=ctx.client_id,
                deadline_remaining=ctx.deadline - time.time(),
            )
        except SpawnFailure as exc:
            self._send_fatal(stream, ErrorCode.INTERNAL, str(exc))
            return "fatal:INTERNAL"
        if ctx.disconnected.is_set():
            return "disconnected"
        ctx.results_so_far.append(outcome.result)
        self._trace.complete(ctx.session_id, cmd.alias)
        try:
            stream.send_message(ServerResult(result=outcome.result))
        except OSError:
            return "disconnected"
        return None

    def _read_loop(self, stream: FrameStream, inbox: "queue.Queue",
                   ctx: SessionContext) -> None:
        while True:
            try:
                msg = stream.recv_message()
            except DecodeError as exc:
                inbox.put(("bad_frame", exc))
                return
            except OSError:
                msg = None
            if msg is None:
                ctx.disconnected.set()
                self._executor.kill_session(ctx.session_id)
                inbox.put(("eof", None))
                return
            inbox.put(("msg", msg))
            if isinstance(msg, SessionClose):
                return

    # -- teardown --------------------------------------------------------------

    def _send_fatal(self, stream: FrameStream, code: str, message: str) -> None:
        try:
            stream.send_message(SessionError(code=code, message=message))
            stream.send_message(SessionClose(reason="fatal"))
        except OSError:
            pass

    def _release_lease(self, lease_id: Optional[str]) -> None:
        if not lease_id or self._store is None:
            return
        try:
            self._store.release(lease_id)
        except StoreUnavailableError:
            log.warning("state store unreachable; lease %s left to expire", lease_id)

    def _recycle(self, ctx: SessionContext) -> None:
        """Return the session's slots to service and drop its lease."""
        self._executor.kill_session(ctx.session_id)
        try:
            self._sandboxes.scrub(ctx.sandbox)
        except Exception:
            log.exception("sandbox scrub failed for %s", ctx.session_id)
        try:
            self._pools[ctx.repo_id].recycle(ctx.checkout)
        except Exception:
            log.exception("checkout recycle failed for %s", ctx.session_id)
        self._release_lease(ctx.lease_id)
