"""Compare-and-swap key-value store backing the availability registry.

Two interchangeable implementations: InMemoryKV for single-binary runs
and tests, and RemoteKV speaking to a KVServer over TCP with the same
atomic contract. Keys and values are strings; TTLs expire lazily plus
whenever scanned.
"""
from __future__ import annotations

import argparse
import json
import logging
import socket
import socketserver
import struct
import threading
import time
from typing import Optional

from .errors import StoreUnavailableError

log = logging.getLogger(__name__)


class KV:
    """Atomic string key-value contract."""

    def get(self, key: str) -> Optional[str]:
        raise NotImplementedError

    def set(self, key: str, value: str, ttl: Optional[float] = None) -> None:
        raise NotImplementedError

    def cas(self, key: str, expected: Optional[str], value: Optional[str],
            ttl: Optional[float] = None) -> bool:
        """Atomically replace key's value with `value` iff the current value
        equals `expected` (None = key absent). value None deletes. Returns
        whether the swap happened."""
        raise NotImplementedError

    def delete(self, key: str) -> bool:
        raise NotImplementedError

    def scan(self, prefix: str) -> dict[str, str]:
        raise NotImplementedError

    def ping(self) -> bool:
        raise NotImplementedError


class InMemoryKV(KV):
    """Process-local store; mutual exclusion is per key so independent
    counters never contend."""

    def __init__(self):
        self._data: dict[str, tuple[str, Optional[float]]] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._meta = threading.Lock()
        self.stall_until = 0.0

    def _lock_for(self, key: str) -> threading.Lock:
        with self._meta:
            lock = self._locks.get(key)
            if lock is None:
                lock = self._locks[key] = threading.Lock()
            return lock

    def _maybe_stall(self):
        delay = self.stall_until - time.time()
        if delay > 0:
            time.sleep(delay)

    def _live_value(self, key: str) -> Optional[str]:
        entry = self._data.get(key)
        if entry is None:
            return None
        value, expires_at = entry
        if expires_at is not None and expires_at <= time.time():
            self._data.pop(key, None)
            return None
        return value

    def get(self, key):
        self._maybe_stall()
        with self._lock_for(key):
            return self._live_value(key)

    def set(self, key, value, ttl=None):
        self._maybe_stall()
        expires_at = time.time() + ttl if ttl is not None else None
        with self._lock_for(key):
            self._data[key] = (str(value), expires_at)

    def cas(self, key, expected, value, ttl=None):
        self._maybe_stall()
        expires_at = time.time() + ttl if ttl is not None else None
        with self._lock_for(key):
            current = self._live_value(key)
            if current != expected:
                return False
            if value is None:
                self._data.pop(key, None)
            else:
                self._data[key] = (str(value), expires_at)
            return True

    def delete(self, key):
        self._maybe_stall()
        with self._lock_for(key):
            existed = self._live_value(key) is not None
            self._data.pop(key, None)
            return existed

    def scan(self, prefix):
        self._maybe_stall()
        now = time.time()
        out = {}
        with self._meta:
            items = list(self._data.items())
        for key, (value, expires_at) in items:
            if not key.startswith(prefix):
                continue
            if expires_at is not None and expires_at <= now:
                continue
            out[key] = value
        return out

    def ping(self):
        self._maybe_stall()
        return True


def _send_obj(sock: socket.socket, obj: dict) -> None:
    body = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">I", len(body)) + body)


def _recv_obj(sock: socket.socket) -> Optional[dict]:
    buf = b""
    while len(buf) < 4:
        chunk = sock.recv(4 - len(buf))
        if not chunk:
            return None
        buf += chunk
    (length,) = struct.unpack(">I", buf)
    if length > 8 * 1024 * 1024:
        raise ValueError("kv frame too large")
    body = b""
    while len(body) < length:
        chunk = sock.recv(length - len(body))
        if not chunk:
            return None
        body += chunk
    return json.loads(body.decode("utf-8"))


class _KVHandler(socketserver.BaseRequestHandler):
    def handle(self):
        kv: InMemoryKV = self.server.kv  # type: ignore[attr-defined]
        sock = self.request
        while True:
            try:
                req = _recv_obj(sock)
            except (OSError, ValueError, json.JSONDecodeError):
                return
            if req is None:
                return
            try:
                resp = self._dispatch(kv, req)
            except Exception as exc:  # malformed op must not kill the server
                resp = {"ok": False, "error": str(exc)}
            try:
                _send_obj(sock, resp)
            except OSError:
                return

    @staticmethod
    def _dispatch(kv: InMemoryKV, req: dict) -> dict:
        op = req.get("op")
        if op == "get":
            return {"ok": True, "value": kv.get(req["key"])}
        if op == "set":
            kv.set(req["key"], req["value"], req.get("ttl"))
            return {"ok": True}
        if op == "cas":
            swapped = kv.cas(req["key"], req.get("expected"), req.get("value"), req.get("ttl"))
            return {"ok": True, "swapped": swapped}
        if op == "delete":
            return {"ok": True, "existed": kv.delete(req["key"])}
        if op == "scan":
            return {"ok": True, "items": kv.scan(req.get("prefix", ""))}
        if op == "ping":
            return {"ok": True}
        return {"ok": False, "error": f"unknown op: {op!r}"}


class KVServer:
    """TCP server exposing an InMemoryKV with the CAS contract."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.kv = InMemoryKV()
        self._tcp = socketserver.ThreadingTCPServer((host, port), _KVHandler, bind_and_activate=True)
        self._tcp.daemon_threads = True
        self._tcp.kv = self.kv  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "KVServer":
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="kvserver", daemon=True)
        self._thread.start()
        return self

    def stall(self, seconds: float) -> None:
        """Fault injection: every op started within the window blocks."""
        self.kv.stall_until = time.time() + seconds

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        if self._thread:
            self._thread.join(timeout=5)


class RemoteKV(KV):
    """Client for KVServer. Connections are per-thread so concurrent
    callers do not serialize on one socket."""

    def __init__(self, endpoint: str, timeout: float = 3.0):
        host, _, port = endpoint.rpartition(":")
        self._addr = (host or "127.0.0.1", int(port))
        self._timeout = timeout
        self._local = threading.local()

    def _sock(self) -> socket.socket:
        sock = getattr(self._local, "sock", None)
        if sock is None:
            sock = socket.create_connection(self._addr, timeout=self._timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.sock = sock
        return sock

    def _drop(self):
        sock = getattr(self._local, "sock", None)
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass
            self._local.sock = None

    def _call(self, req: dict) -> dict:
        try:
            sock = self._sock()
            _send_obj(sock, req)
            resp = _recv_obj(sock)
        except OSError as exc:
            self._drop()
            raise StoreUnavailableError(f"kv store unreachable: {exc}") from exc
        if resp is None:
            self._drop()
            raise StoreUnavailableError("kv store closed the connection")
        if not resp.get("ok"):
            raise StoreUnavailableError(f"kv store error: {resp.get('error')}")
        return resp

    def get(self, key):
        return self._call({"op": "get", "key": key})["value"]

    def set(self, key, value, ttl=None):
        self._call({"op": "set", "key": key, "value": str(value), "ttl": ttl})

    def cas(self, key, expected, value, ttl=None):
        return self._call({"op": "cas", "key": key, "expected": expected,
                           "value": value if value is None else str(value),
                           "ttl": ttl})["swapped"]

    def delete(self, key):
        return self._call({"op": "delete", "key": key})["existed"]

    def scan(self, prefix):
        return self._call({"op": "scan", "prefix": prefix})["items"]

    def ping(self):
        try:
            return bool(self._call({"op": "ping"})["ok"])
        except StoreUnavailableError:
            return False


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="gitfarm-kvstore",
                                     description="Run the availability-registry key-value server")
    parser.add_argument("--listen", default="127.0.0.1:7420", help="host:port to bind")
    args = parser.parse_args(argv)
    host, _, port = args.listen.rpartition(":")
    server = KVServer(host or "127.0.0.1", int(port))
    server.start()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    log.info("kvstore listening on %s", server.endpoint)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
