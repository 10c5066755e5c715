"""Session wire schema and framing codec.

Messages travel as self-delimiting frames over any reliable byte stream:
a 4-byte big-endian body length followed by a canonical JSON body
(sorted keys, compact separators, binary payloads base64-encoded).
The decoder is total: arbitrary input yields a message or DecodeError,
never a crash.
"""
from __future__ import annotations

import base64
import hashlib
import hmac
import json
import re
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import DecodeError, EncodeError, ErrorCode

WORKSPACE_FULL_CHECKOUT = "FULL_CHECKOUT"
WIRE_VERSION = 1

DEFAULT_ALLOWLIST = frozenset({"git"})
DEFAULT_OUTPUT_CAP = 4 * 1024 * 1024  # bytes, stdout and stderr each

# Environment variables the backend injects; client commands may not
# override them. Any GITFARM_-prefixed key is reserved as well.
RESERVED_ENV_KEYS = frozenset({
    "HOME",
    "PATH",
    "GIT_CONFIG_GLOBAL",
    "GIT_CONFIG_SYSTEM",
    "GIT_CONFIG_NOSYSTEM",
    "GIT_ASKPASS",
    "GIT_TERMINAL_PROMPT",
})
RESERVED_ENV_PREFIX = "GITFARM_"

_ENV_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class Command:
    """One git invocation: the unit of remote execution."""

    alias: str
    binary: str
    arguments: tuple[str, ...] = ()
    stdin: Optional[bytes] = None
    environment: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class CommandResult:
    """Captured outcome of one Command."""

    alias: str
    exit_code: int
    stdout: bytes = b""
    stderr: bytes = b""
    truncated: bool = False


@dataclass(frozen=True)
class SessionRequest:
    """A batch session: every command known up front."""

    repo_id: str
    identity_token: str
    commands: tuple[Command, ...] = ()
    workspace_type: str = WORKSPACE_FULL_CHECKOUT


@dataclass(frozen=True)
class ClientHello:
    """First client message. The gateway fills the identity fields after
    authenticating; clients must leave them unset (they are overwritten)."""

    repo_id: str
    identity_token: str = ""
    workspace_type: str = WORKSPACE_FULL_CHECKOUT
    version: int = WIRE_VERSION
    client_id: Optional[str] = None
    display_name: Optional[str] = None
    lease_id: Optional[str] = None
    auth_tag: Optional[str] = None


@dataclass(frozen=True)
class SessionAck:
    """Server acknowledgment that the session is bound and ready."""

    session_id: str = ""
    node_id: str = ""
    checkout_slot: str = ""
    sandbox_slot: str = ""
    acquire_seconds: float = 0.0


@dataclass(frozen=True)
class SubmitCommand:
    command: Command


@dataclass(frozen=True)
class ServerResult:
    result: CommandResult


@dataclass(frozen=True)
class SessionError:
    code: str
    message: str = ""


@dataclass(frozen=True)
class SessionClose:
    reason: str = ""


SessionMessage = Union[ClientHello, SessionAck, SubmitCommand, ServerResult, SessionError, SessionClose]

_TYPE_TAGS = {
    ClientHello: "client_hello",
    SessionAck: "session_ack",
    SubmitCommand: "submit_command",
    ServerResult: "server_result",
    SessionError: "session_error",
    SessionClose: "session_close",
}


def validate_command(cmd: Command, allowlist: frozenset[str] = DEFAULT_ALLOWLIST) -> Optional[str]:
    """Return None if cmd is acceptable, else the first failing rule."""
    if not cmd.alias:
        return "empty alias"
    if cmd.binary not in allowlist:
        return "binary not allowed"
    for key in cmd.environment:
        if not _ENV_KEY_RE.match(key):
            return f"illegal environment key: {key!r}"
        if key in RESERVED_ENV_KEYS or key.startswith(RESERVED_ENV_PREFIX):
            return f"reserved environment key: {key}"
    return None


def identity_tag(secret: str, *, client_id: str, display_name: str,
                 repo_id: str, lease_id: str, workspace_type: str) -> str:
    """HMAC over the identity fields the gateway injects.

    Backends only trust client_id/display_name/lease_id when this tag
    verifies, which stops a client that dials a backend directly from
    forging an identity.  The raw bearer token never crosses this hop.
    """
    payload = "\x1f".join([client_id, display_name, repo_id, lease_id, workspace_type])
    return hmac.new(secret.encode("utf-8"), payload.encode("utf-8"),
                    hashlib.sha256).hexdigest()


def verify_identity_tag(secret: str, hello: ClientHello) -> bool:
    """Constant-time check of a hello's gateway-signed identity fields."""
    if not secret or not hello.client_id or not hello.lease_id or not hello.auth_tag:
        return False
    expected = identity_tag(
        secret,
        client_id=hello.client_id,
        display_name=hello.display_name or "",
        repo_id=hello.repo_id,
        lease_id=hello.lease_id,
        workspace_type=hello.workspace_type,
    )
    return hmac.compare_digest(expected, hello.auth_tag)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _require(body: dict, fname: str, ftype, msg_type: str):
    if fname not in body:
        raise DecodeError(f"{msg_type}: missing field {fname!r}")
    value = body[fname]
    if ftype is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise DecodeError(f"{msg_type}: field {fname!r} must be a number")
        return float(value)
    if ftype is int and isinstance(value, bool):
        raise DecodeError(f"{msg_type}: field {fname!r} must be an integer")
    if not isinstance(value, ftype):
        raise DecodeError(f"{msg_type}: field {fname!r} has wrong type")
    return value


def _decode_b64(body: dict, fname: str, msg_type: str) -> bytes:
    raw = _require(body, fname, str, msg_type)
    try:
        return base64.b64decode(raw.encode("ascii"), validate=True)
    except Exception:
        raise DecodeError(f"{msg_type}: field {fname!r} is not valid base64") from None


def _command_to_wire(cmd: Command) -> dict:
    wire: dict = {
        "alias": cmd.alias,
        "binary": cmd.binary,
        "arguments": list(cmd.arguments),
        "environment": dict(cmd.environment),
    }
    if cmd.stdin is not None:
        wire["stdin_b64"] = _b64(cmd.stdin)
    return wire


def _command_from_wire(body: dict) -> Command:
    alias = _require(body, "alias", str, "submit_command")
    if not alias:
        raise DecodeError("submit_command: field 'alias' must be non-empty")
    binary = _require(body, "binary", str, "submit_command")
    arguments = _require(body, "arguments", list, "submit_command")
    if not all(isinstance(a, str) for a in arguments):
        raise DecodeError("submit_command: field 'arguments' must be strings")
    environment = _require(body, "environment", dict, "submit_command")
    for k, v in environment.items():
        if not isinstance(k, str) or not isinstance(v, str):
            raise DecodeError("submit_command: field 'environment' must map strings to strings")
    stdin = _decode_b64(body, "stdin_b64", "submit_command") if "stdin_b64" in body else None
    return Command(alias=alias, binary=binary, arguments=tuple(arguments),
                   stdin=stdin, environment=dict(environment))


def _message_to_wire(msg: SessionMessage) -> dict:
    tag = _TYPE_TAGS.get(type(msg))
    if tag is None:
        raise EncodeError(f"not a session message: {type(msg).__name__}")
    if isinstance(msg, ClientHello):
        body = {
            "type": tag,
            "version": msg.version,
            "repo_id": msg.repo_id,
            "workspace_type": msg.workspace_type,
            "identity_token": msg.identity_token,
        }
        for fname in ("client_id", "display_name", "lease_id", "auth_tag"):
            value = getattr(msg, fname)
            if value is not None:
                body[fname] = value
        return body
    if isinstance(msg, SessionAck):
        return {
            "type": tag,
            "session_id": msg.session_id,
            "node_id": msg.node_id,
            "checkout_slot": msg.checkout_slot,
            "sandbox_slot": msg.sandbox_slot,
            "acquire_seconds": msg.acquire_seconds,
        }
    if isinstance(msg, SubmitCommand):
        body = _command_to_wire(msg.command)
        body["type"] = tag
        return body
    if isinstance(msg, ServerResult):
        r = msg.result
        return {
            "type": tag,
            "alias": r.alias,
            "exit_code": r.exit_code,
            "stdout_b64": _b64(r.stdout),
            "stderr_b64": _b64(r.stderr),
            "truncated": r.truncated,
        }
    if isinstance(msg, SessionError):
        return {"type": tag, "code": msg.code, "message": msg.message}
    return {"type": tag, "reason": msg.reason}


def encode_message(msg: SessionMessage, max_payload: int = DEFAULT_OUTPUT_CAP) -> bytes:
    """Encode msg as a length-prefixed frame.

    Raises EncodeError for oversize binary payloads (stdin/stdout/stderr
    beyond max_payload) or structurally invalid messages.
    """
    if isinstance(msg, SubmitCommand):
        if not msg.command.alias:
            raise EncodeError("submit_command: empty alias")
        if msg.command.stdin is not None and len(msg.command.stdin) > max_payload:
            raise EncodeError(f"stdin exceeds payload cap ({len(msg.command.stdin)} > {max_payload})")
    if isinstance(msg, ServerResult):
        for fname in ("stdout", "stderr"):
            size = len(getattr(msg.result, fname))
            if size > max_payload:
                raise EncodeError(f"{fname} exceeds payload cap ({size} > {max_payload})")
    if isinstance(msg, SessionError) and msg.code not in ErrorCode.ALL:
        raise EncodeError(f"session_error: unknown code {msg.code!r}")
    body = json.dumps(_message_to_wire(msg), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def default_max_frame(max_payload: int = DEFAULT_OUTPUT_CAP) -> int:
    # base64 inflates by 4/3; allow stdout+stderr plus generous slack
    return 3 * max_payload + 1024 * 1024


def decode_message(frame: bytes, max_frame: Optional[int] = None) -> SessionMessage:
    """Decode one full frame (prefix included). Total: raises DecodeError
    on any malformed input rather than propagating arbitrary exceptions."""
    limit = max_frame if max_frame is not None else default_max_frame()
    if len(frame) < 4:
        raise DecodeError("truncated frame")
    (length,) = struct.unpack(">I", frame[:4])
    if length > limit:
        raise DecodeError(f"frame too large ({length} > {limit})")
    if len(frame) != 4 + length:
        raise DecodeError("truncated frame")
    return decode_body(frame[4:])


def decode_body(body: bytes) -> SessionMessage:
    try:
        wire = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DecodeError("body is not valid JSON") from None
    if not isinstance(wire, dict):
        raise DecodeError("body is not an object")
    tag = wire.get("type")
    if not isinstance(tag, str):
        raise DecodeError("missing field 'type'")

    if tag == "client_hello":
        version = _require(wire, "version", int, tag)
        repo_id = _require(wire, "repo_id", str, tag)
        workspace_type = _require(wire, "workspace_type", str, tag)
        if workspace_type != WORKSPACE_FULL_CHECKOUT:
            raise DecodeError(f"client_hello: unsupported field 'workspace_type': {workspace_type!r}")
        token = _require(wire, "identity_token", str, tag)
        extras = {}
        for fname in ("client_id", "display_name", "lease_id", "auth_tag"):
            if fname in wire:
                extras[fname] = _require(wire, fname, str, tag)
        return ClientHello(repo_id=repo_id, identity_token=token,
                           workspace_type=workspace_type, version=version, **extras)
    if tag == "session_ack":
        return SessionAck(
            session_id=_require(wire, "session_id", str, tag),
            node_id=_require(wire, "node_id", str, tag),
            checkout_slot=_require(wire, "checkout_slot", str, tag),
            sandbox_slot=_require(wire, "sandbox_slot", str, tag),
            acquire_seconds=_require(wire, "acquire_seconds", float, tag),
        )
    if tag == "submit_command":
        return SubmitCommand(command=_command_from_wire(wire))
    if tag == "server_result":
        alias = _require(wire, "alias", str, tag)
        if not alias:
            raise DecodeError("server_result: field 'alias' must be non-empty")
        return ServerResult(result=CommandResult(
            alias=alias,
            exit_code=_require(wire, "exit_code", int, tag),
            stdout=_decode_b64(wire, "stdout_b64", tag),
            stderr=_decode_b64(wire, "stderr_b64", tag),
            truncated=_require(wire, "truncated", bool, tag),
        ))
    if tag == "session_error":
        code = _require(wire, "code", str, tag)
        if code not in ErrorCode.ALL:
            raise DecodeError(f"session_error: unknown field value 'code': {code!r}")
        return SessionError(code=code, message=_require(wire, "message", str, tag))
    if tag == "session_close":
        return SessionClose(reason=_require(wire, "reason", str, tag))
    raise DecodeError(f"unknown tag: {tag!r}")


class FrameStream:
    """Framed message IO over a connected socket.

    recv_message returns None on clean EOF. Writes are serialized so
    multiple threads may send on one stream.
    """

    def __init__(self, sock: socket.socket, max_payload: int = DEFAULT_OUTPUT_CAP):
        self._sock = sock
        self._max_payload = max_payload
        self._max_frame = default_max_frame(max_payload)
        self._send_lock = threading.Lock()
        self._rbuf = b""

    @property
    def sock(self) -> socket.socket:
        return self._sock

    def send_message(self, msg: SessionMessage) -> None:
        frame = encode_message(msg, self._max_payload)
        with self._send_lock:
            self._sock.sendall(frame)

    def send_frame(self, frame: bytes) -> None:
        with self._send_lock:
            self._sock.sendall(frame)

    def _recv_exact(self, n: int) -> Optional[bytes]:
        while len(self._rbuf) < n:
            chunk = self._sock.recv(65536)
            if not chunk:
                if self._rbuf:
                    raise DecodeError("truncated frame")
                return None
            self._rbuf += chunk
        out, self._rbuf = self._rbuf[:n], self._rbuf[n:]
        return out

    def recv_frame(self) -> Optional[bytes]:
        """Read one raw frame (prefix included), or None on clean EOF."""
        header = self._recv_exact(4)
        if header is None:
            return None
        (length,) = struct.unpack(">I", header)
        if length > self._max_frame:
            raise DecodeError(f"frame too large ({length} > {self._max_frame})")
        body = self._recv_exact(length)
        if body is None:
            raise DecodeError("truncated frame")
        return header + body

    def recv_message(self) -> Optional[SessionMessage]:
        frame = self.recv_frame()
        if frame is None:
            return None
        return decode_message(frame, self._max_frame)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
