"""Client-side session handle, script runner, and one-shot helper.

A session is a plain TCP connection to the gateway: hello, ack, then any
number of submit/result exchanges, then a close handshake.  The handle
below exposes that as a context manager so callers cannot forget the
goodbye.  Scripts are JSON files describing an ordered command list;
later commands may reference earlier output with ``${alias.stdout}``,
which is how chained flows (find a commit, then act on it) run without a
round-trip back to the caller's own tooling.
"""

from __future__ import annotations

import json
import re
import socket
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .errors import DecodeError, ErrorCode, exit_code_for
from .protocol import (
    ClientHello,
    Command,
    CommandResult,
    FrameStream,
    SessionAck,
    SessionClose,
    SessionError,
    ServerResult,
    SubmitCommand,
    WORKSPACE_FULL_CHECKOUT,
)

_REF_RE = re.compile(r"\$\{([A-Za-z0-9._-]+)\.stdout\}")


class SessionRejected(Exception):
    """The server ended the session with a terminal error."""

    def __init__(self, code: str, message: str = "") -> None:
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code
        self.message = message

    @property
    def exit_code(self) -> int:
        return exit_code_for(self.code)


class SessionClosed(Exception):
    """The connection ended where a reply was expected."""


def _parse_endpoint(endpoint: str) -> tuple:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class Session:
    """An open command session against the service."""

    def __init__(self, endpoint: str, *, token: str, repo_id: str,
                 workspace_type: str = WORKSPACE_FULL_CHECKOUT,
                 timeout: Optional[float] = 300.0) -> None:
        self.endpoint = endpoint
        self.repo_id = repo_id
        self._sock = socket.create_connection(_parse_endpoint(endpoint), timeout=10.0)
        self._sock.settimeout(timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._stream = FrameStream(self._sock)
        self._closed = False
        self._fatal: Optional[SessionRejected] = None
        self.results: List[CommandResult] = []
        self._alias_seq = 0
        try:
            self._stream.send_message(ClientHello(
                repo_id=repo_id, identity_token=token, workspace_type=workspace_type,
            ))
            self.ack = self._await_ack()
        except BaseException:
            self._stream.close()
            raise

    # -- plumbing ------------------------------------------------------

    def _await_ack(self) -> SessionAck:
        msg = self._recv()
        if isinstance(msg, SessionAck):
            return msg
        if isinstance(msg, SessionError):
            self._drain_close()
            raise SessionRejected(msg.code, msg.message)
        raise SessionClosed(f"expected session_ack, got {type(msg).__name__}")

    def _recv(self):
        try:
            msg = self._stream.recv_message()
        except socket.timeout as exc:
            raise SessionRejected(ErrorCode.DEADLINE_EXCEEDED,
                                  "timed out waiting for server") from exc
        except (DecodeError, OSError) as exc:
            raise SessionClosed(f"connection failed: {exc}") from exc
        if msg is None:
            raise SessionClosed("server closed the connection")
        return msg

    def _drain_close(self) -> None:
        try:
            self._stream.recv_message()
        except (DecodeError, OSError, socket.timeout):
            pass

    # -- public API -------------------------------------------------------

    def run(self, command: Command) -> CommandResult:
        """Submit one command and block for its result.

        Raises :class:`SessionRejected` when the server terminates the
        session instead of answering; partial results stay in ``results``.
        """
        if self._closed:
            raise SessionClosed("session already closed")
        if self._fatal is not None:
            raise self._fatal
        self._stream.send_message(SubmitCommand(command=command))
        msg = self._recv()
        if isinstance(msg, ServerResult):
            self.results.append(msg.result)
            return msg.result
        if isinstance(msg, SessionError):
            self._fatal = SessionRejected(msg.code, msg.message)
            self._drain_close()
            raise self._fatal
        raise SessionClosed(f"expected server_result, got {type(msg).__name__}")

    def run_args(self, *arguments: str, binary: str = "git",
                 stdin: Optional[bytes] = None,
                 environment: Optional[Dict[str, str]] = None,
                 alias: Optional[str] = None) -> CommandResult:
        """Convenience wrapper building the Command inline."""
        if alias is None:
            self._alias_seq += 1
            alias = f"c{self._alias_seq:03d}"
        return self.run(Command(alias=alias, binary=binary,
                                arguments=tuple(arguments), stdin=stdin,
                                environment=dict(environment or {})))

    def close(self) -> None:
        """Graceful goodbye; safe to call twice."""
        if self._closed:
            return
        self._closed = True
        try:
            if self._fatal is None:
                self._stream.send_message(SessionClose(reason="done"))
                self._drain_close()
        except (OSError, socket.timeout):
            pass
        finally:
            self._stream.close()

    def abort(self) -> None:
        """Drop the connection without the close handshake."""
        self._closed = True
        self._stream.close()

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


# -- scripts ----------------------------------------------------------------


@dataclass(frozen=True)
class ScriptStep:
    alias: str
    arguments: tuple
    binary: str = "git"
    stdin: Optional[str] = None
    environment: Dict[str, str] = field(default_factory=dict)
    allow_failure: bool = False


@dataclass(frozen=True)
class SessionScript:
    """Ordered command list executed in one session."""

    repo_id: str
    steps: tuple

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SessionScript":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")),
                             source=str(path))

    @classmethod
    def from_dict(cls, raw: dict, source: str = "<script>") -> "SessionScript":
        if not isinstance(raw, dict):
            raise ValueError(f"{source}: script must be a JSON object")
        repo_id = raw.get("repo")
        if not repo_id or not isinstance(repo_id, str):
            raise ValueError(f"{source}: missing 'repo'")
        commands = raw.get("commands")
        if not isinstance(commands, list) or not commands:
            raise ValueError(f"{source}: 'commands' must be a non-empty list")
        steps = []
        seen = set()
        for i, entry in enumerate(commands):
            if not isinstance(entry, dict):
                raise ValueError(f"{source}: command #{i} must be an object")
            alias = entry.get("alias") or f"step{i + 1:02d}"
            if alias in seen:
                raise ValueError(f"{source}: duplicate alias {alias!r}")
            args = entry.get("args")
            if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
                raise ValueError(f"{source}: command {alias!r} needs a list of "
                                 f"string 'args'")
            for ref in _referenced_aliases(args, entry.get("stdin")):
                if ref not in seen:
                    raise ValueError(
                        f"{source}: command {alias!r} references "
                        f"${{{ref}.stdout}} before it has run")
            steps.append(ScriptStep(
                alias=alias,
                arguments=tuple(args),
                binary=entry.get("binary", "git"),
                stdin=entry.get("stdin"),
                environment=dict(entry.get("env", {})),
                allow_failure=bool(entry.get("allow_failure", False)),
            ))
            seen.add(alias)
        return cls(repo_id=repo_id, steps=tuple(steps))


def _referenced_aliases(args: Sequence[str], stdin: Optional[str]) -> List[str]:
    refs: List[str] = []
    for text in list(args) + ([stdin] if stdin else []):
        refs.extend(m.group(1) for m in _REF_RE.finditer(text))
    return refs


def _substitute(text: str, outputs: Dict[str, str]) -> str:
    def repl(match: "re.Match[str]") -> str:
        return outputs[match.group(1)]

    return _REF_RE.sub(repl, text)


@dataclass
class ScriptReport:
    """Outcome of one script run, JSON-serialisable."""

    repo_id: str
    session_id: str = ""
    node_id: str = ""
    results: List[CommandResult] = field(default_factory=list)
    error_code: Optional[str] = None
    error_message: Optional[str] = None
    elapsed_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error_code is None and all(r.exit_code == 0 for r in self.results)

    def to_dict(self) -> dict:
        return {
            "repo": self.repo_id,
            "session_id": self.session_id,
            "node_id": self.node_id,
            "ok": self.ok,
            "elapsed_seconds": round(self.elapsed_seconds, 6),
            "error_code": self.error_code,
            "error_message": self.error_message,
            "results": [{
                "alias": r.alias,
                "exit_code": r.exit_code,
                "stdout": r.stdout.decode("utf-8", "replace"),
                "stderr": r.stderr.decode("utf-8", "replace"),
                "truncated": r.truncated,
            } for r in self.results],
        }


def run_script(endpoint: str, token: str, script: SessionScript,
               *, timeout: Optional[float] = 300.0,
               stop_on_failure: bool = True) -> ScriptReport:
    """Execute a script in a single session and report every result.

    A non-zero exit stops the script (unless that step allows failure);
    a terminal server error is recorded with whatever results arrived
    before it.
    """
    report = ScriptReport(repo_id=script.repo_id)
    started = time.perf_counter()
    outputs: Dict[str, str] = {}
    try:
        with Session(endpoint, token=token, repo_id=script.repo_id,
                     timeout=timeout) as session:
            report.session_id = session.ack.session_id
            report.node_id = session.ack.node_id
            for step in script.steps:
                args = tuple(_substitute(a, outputs) for a in step.arguments)
                stdin = (_substitute(step.stdin, outputs).encode("utf-8")
                         if step.stdin is not None else None)
                result = session.run(Command(
                    alias=step.alias, binary=step.binary, arguments=args,
                    stdin=stdin, environment=step.environment,
                ))
                report.results.append(result)
                outputs[step.alias] = result.stdout.decode("utf-8", "replace").strip()
                if result.exit_code != 0 and stop_on_failure and not step.allow_failure:
                    break
    except SessionRejected as exc:
        report.error_code = exc.code
        report.error_message = exc.message
    except (SessionClosed, OSError) as exc:
        report.error_code = ErrorCode.UNAVAILABLE
        report.error_message = str(exc)
    report.elapsed_seconds = time.perf_counter() - started
    return report


def exec_once(endpoint: str, token: str, repo_id: str, argv: Sequence[str],
              *, stdin: Optional[bytes] = None,
              environment: Optional[Dict[str, str]] = None,
              timeout: Optional[float] = 300.0) -> CommandResult:
    """Run a single command in a throwaway session."""
    if not argv:
        raise ValueError("argv must not be empty")
    command = Command(
        alias=f"exec-{uuid.uuid4().hex[:8]}",
        binary=argv[0],
        arguments=tuple(argv[1:]),
        stdin=stdin,
        environment=dict(environment or {}),
    )
    with Session(endpoint, token=token, repo_id=repo_id, timeout=timeout) as session:
        return session.run(command)
