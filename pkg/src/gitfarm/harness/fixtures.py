"""Deterministic repository fixtures and a minimal smart-HTTP git host.

Fixtures are built with ``git fast-import`` from a seeded RNG, so the same
spec always produces the same history, byte for byte (fixed timestamps,
fixed author, seeded content).  Every directory carries an OWNERS marker
file, which gives compliance-style workloads something realistic to scan.

The HTTP host speaks just enough of git's smart HTTP protocol for clone,
fetch, and push, by shelling out to ``git upload-pack`` and
``git receive-pack`` in stateless-RPC mode.  Stopping the server is how the
harness simulates an unreachable hosting provider.
"""

from __future__ import annotations

import gzip
import io
import os
import random
import string
import subprocess
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple
from urllib.parse import parse_qs, urlparse

from ..gitutil import run_git

_EPOCH = 1_700_000_000  # fixed base timestamp for reproducible history
_COMMITTER = "Fixture Bot <fixture@gitfarm.test>"


@dataclass(frozen=True)
class BranchSpec:
    """A feature branch forked from a known point on the default branch."""

    name: str
    fork_at: int  # index into the default branch's commit list
    commits: int = 3

    def __post_init__(self):
        if self.fork_at < 0:
            raise ValueError("fork_at must be >= 0")
        if self.commits < 1:
            raise ValueError("branch needs at least one commit")


@dataclass(frozen=True)
class FixtureSpec:
    """Shape of a synthetic repository."""

    repo_id: str
    file_count: int = 200
    directory_depth: int = 3
    commit_count: int = 20
    seed: int = 7
    branches: Tuple[BranchSpec, ...] = ()

    def __post_init__(self):
        if self.file_count < 1 or self.commit_count < 1:
            raise ValueError("file_count and commit_count must be >= 1")
        if self.directory_depth < 1:
            raise ValueError("directory_depth must be >= 1")
        for branch in self.branches:
            if branch.fork_at >= self.commit_count:
                raise ValueError(
                    f"branch {branch.name!r} forks at {branch.fork_at} but there "
                    f"are only {self.commit_count} commits")


@dataclass
class FixtureInfo:
    """What came out of the generator: paths and oracle commit hashes."""

    spec: FixtureSpec
    path: Path  # bare repository on disk
    default_branch: str = "main"
    main_commits: List[str] = field(default_factory=list)
    branch_tips: Dict[str, str] = field(default_factory=dict)
    # For each branch: the commit every merge-base computation must find.
    expected_merge_base: Dict[str, str] = field(default_factory=dict)

    @property
    def tip(self) -> str:
        return self.main_commits[-1]


def _dir_names(rng: random.Random, count: int) -> List[str]:
    return ["".join(rng.choices(string.ascii_lowercase, k=6)) for _ in range(count)]


def _layout_paths(spec: FixtureSpec, rng: random.Random) -> Tuple[List[str], List[str]]:
    """Deterministic directory tree and file paths for a spec."""
    dir_count = max(1, min(spec.file_count, spec.file_count // 25 + 1))
    names = _dir_names(rng, dir_count * spec.directory_depth)
    directories: List[str] = []
    for i in range(dir_count):
        depth = 1 + rng.randrange(spec.directory_depth)
        parts = [names[(i * spec.directory_depth + d) % len(names)]
                 for d in range(depth)]
        directories.append("/".join(parts))
    files = []
    for i in range(spec.file_count):
        directory = directories[rng.randrange(len(directories))]
        files.append(f"{directory}/f{i:06d}.txt")
    return directories, files


class _StreamBuilder:
    """Accumulates a git fast-import stream."""

    def __init__(self) -> None:
        self.parts: List[bytes] = []
        self.mark = 0

    def blob_inline(self, path: str, content: str) -> None:
        data = content.encode("utf-8")
        self.parts.append(f"M 100644 inline {path}\n".encode())
        self.parts.append(f"data {len(data)}\n".encode())
        self.parts.append(data + b"\n" if not data.endswith(b"\n") else data)

    def commit(self, ref: str, message: str, when: int,
               from_mark: Optional[int] = None) -> int:
        self.mark += 1
        head = [f"commit {ref}", f"mark :{self.mark}",
                f"committer {_COMMITTER} {when} +0000"]
        msg = message.encode("utf-8")
        self.parts.append(("\n".join(head) + "\n").encode())
        self.parts.append(f"data {len(msg)}\n".encode())
        self.parts.append(msg + b"\n")
        if from_mark is not None:
            self.parts.append(f"from :{from_mark}\n".encode())
        return self.mark

    def build(self) -> bytes:
        return b"".join(self.parts)


def generate_fixture(spec: FixtureSpec, root: Path) -> FixtureInfo:
    """Create a bare repository matching the spec; idempotent per path.

    Returns oracle data alongside the path: the full main-branch commit
    list and, for every configured branch, the fork commit that any
    merge-base computation must report.
    """
    rng = random.Random(spec.seed)
    path = Path(root) / f"{spec.repo_id}.git"
    if path.exists():
        raise FileExistsError(f"fixture path already exists: {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    run_git(["init", "--quiet", "--bare", "-b", "main", str(path)], cwd=path.parent)
    run_git(["config", "gc.auto", "0"], cwd=path)

    directories, files = _layout_paths(spec, rng)
    stream = _StreamBuilder()
    when = _EPOCH

    # Initial commit: full tree plus one OWNERS marker per directory.
    first = stream.commit("refs/heads/main", "initial tree", when)
    seen_dirs = sorted(set(directories))
    for directory in seen_dirs:
        owners = "\n".join(
            f"owner-{rng.randrange(100):03d}" for _ in range(1 + rng.randrange(3)))
        stream.blob_inline(f"{directory}/OWNERS", owners + "\n")
    versions: Dict[str, int] = {}
    for file_path in files:
        versions[file_path] = 1
        stream.blob_inline(
            file_path, f"{spec.repo_id}:{file_path} v1 {rng.getrandbits(32):08x}\n")

    main_marks = [first]
    for i in range(1, spec.commit_count):
        when += 61
        mark = stream.commit("refs/heads/main", f"change {i:05d}", when)
        for _ in range(1 + rng.randrange(3)):
            file_path = files[rng.randrange(len(files))]
            versions[file_path] += 1
            stream.blob_inline(
                file_path,
                f"{spec.repo_id}:{file_path} v{versions[file_path]} "
                f"{rng.getrandbits(32):08x}\n")
        main_marks.append(mark)

    branch_marks: Dict[str, int] = {}
    for branch in spec.branches:
        parent = main_marks[branch.fork_at]
        for j in range(branch.commits):
            when += 61
            mark = stream.commit(
                f"refs/heads/{branch.name}",
                f"{branch.name} work {j}",
                when,
                from_mark=parent if j == 0 else None,
            )
            file_path = files[rng.randrange(len(files))]
            stream.blob_inline(
                file_path,
                f"{spec.repo_id}:{branch.name}:{file_path} b{j} "
                f"{rng.getrandbits(32):08x}\n")
        branch_marks[branch.name] = mark

    marks_file = path.parent / f".{spec.repo_id}.marks"
    run_git(
        ["fast-import", "--quiet", f"--export-marks={marks_file}"],
        cwd=path,
        input_bytes=stream.build(),
        timeout=600.0,
    )
    mark_to_sha: Dict[int, str] = {}
    for line in marks_file.read_text().splitlines():
        mark_str, _, sha = line.partition(" ")
        mark_to_sha[int(mark_str.lstrip(":"))] = sha
    marks_file.unlink()

    info = FixtureInfo(
        spec=spec,
        path=path,
        main_commits=[mark_to_sha[m] for m in main_marks],
        branch_tips={name: mark_to_sha[m] for name, m in branch_marks.items()},
        expected_merge_base={
            b.name: mark_to_sha[main_marks[b.fork_at]] for b in spec.branches
        },
    )
    return info


def fork_fixture_specs(count: int, *, seed: int = 11,
                       prefix: str = "fork") -> List[FixtureSpec]:
    """Small repositories with one feature branch each and a known fork point."""
    rng = random.Random(seed)
    specs = []
    for i in range(count):
        commits = 6 + rng.randrange(10)
        specs.append(FixtureSpec(
            repo_id=f"{prefix}-{i:03d}",
            file_count=12 + rng.randrange(20),
            directory_depth=2,
            commit_count=commits,
            seed=seed * 1000 + i,
            branches=(BranchSpec(
                name="feature",
                fork_at=1 + rng.randrange(commits - 2),
                commits=2 + rng.randrange(4),
            ),),
        ))
    return specs


# -- smart HTTP host ---------------------------------------------------------


def _git_env() -> Dict[str, str]:
    env = dict(os.environ)
    env.setdefault("GIT_CONFIG_NOSYSTEM", "1")
    env["GIT_TERMINAL_PROMPT"] = "0"
    return env


class _GitHTTPHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "gitfixture/1"

    def log_message(self, fmt, *args):  # noqa: D102 - keep tests quiet
        pass

    @property
    def _host(self) -> "GitHTTPServer":
        return self.server.git_host  # type: ignore[attr-defined]

    def _lookup(self, repo_name: str) -> Optional[Path]:
        return self._host.repo_path(repo_name)

    def do_GET(self):
        url = urlparse(self.path)
        parts = url.path.strip("/").split("/")
        if len(parts) < 3 or parts[-2:] != ["info", "refs"]:
            self.send_error(404)
            return
        repo = self._lookup("/".join(parts[:-2]))
        service = parse_qs(url.query).get("service", [""])[0]
        if repo is None or service not in ("git-upload-pack", "git-receive-pack"):
            self.send_error(404)
            return
        advertisement = subprocess.run(
            ["git", service[4:], "--stateless-rpc", "--advertise-refs", str(repo)],
            capture_output=True, check=True, env=_git_env(),
        ).stdout
        header = f"# service={service}\n"
        pkt = f"{len(header) + 4:04x}{header}0000".encode()
        body = pkt + advertisement
        self.send_response(200)
        self.send_header("Content-Type", f"application/x-{service}-advertisement")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> bytes:
        if self.headers.get("Expect", "").lower() == "100-continue":
            self.wfile.write(b"HTTP/1.1 100 Continue\r\n\r\n")
            self.wfile.flush()
        if "chunked" in self.headers.get("Transfer-Encoding", "").lower():
            buf = io.BytesIO()
            while True:
                size_line = self.rfile.readline(80).strip()
                size = int(size_line.split(b";")[0], 16)
                if size == 0:
                    self.rfile.readline()
                    break
                buf.write(self.rfile.read(size))
                self.rfile.read(2)  # trailing CRLF
            raw = buf.getvalue()
        else:
            raw = self.rfile.read(int(self.headers.get("Content-Length", "0")))
        if self.headers.get("Content-Encoding", "") == "gzip":
            raw = gzip.decompress(raw)
        return raw

    def do_POST(self):
        parts = self.path.strip("/").split("/")
        service = parts[-1]
        repo_name = "/".join(parts[:-1])
        repo = self._lookup(repo_name)
        if repo is None or service not in ("git-upload-pack", "git-receive-pack"):
            self.send_error(404)
            return
        body = self._read_body()
        out = subprocess.run(
            ["git", service[4:], "--stateless-rpc", str(repo)],
            input=body, capture_output=True, env=_git_env(),
        ).stdout
        self.send_response(200)
        self.send_header("Content-Type", f"application/x-{service}-result")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)
        if service == "git-receive-pack":
            self._host.push_received(repo_name)


class GitHTTPServer:
    """Serves bare repositories over smart HTTP; stop/start to fault it.

    ``on_push(repo_name)`` runs after every receive-pack request — the
    harness uses it to deliver push webhooks the way a hosting provider
    would.
    """

    def __init__(self, repos: Optional[Dict[str, Path]] = None,
                 host: str = "127.0.0.1", port: int = 0,
                 on_push: Optional[Callable[[str], None]] = None) -> None:
        self._repos: Dict[str, Path] = dict(repos or {})
        self._lock = threading.Lock()
        self._host = host
        self._port = port
        self.on_push = on_push
        self._server: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None

    # -- repo table -------------------------------------------------------

    def add_repo(self, name: str, path: Path) -> None:
        with self._lock:
            self._repos[name] = Path(path)

    def repo_path(self, name: str) -> Optional[Path]:
        with self._lock:
            return self._repos.get(name)

    def push_received(self, repo_name: str) -> None:
        callback = self.on_push
        if callback is not None:
            try:
                callback(repo_name)
            except Exception:  # pragma: no cover - webhook must not kill serving
                pass

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        if self._server is not None:
            return
        server = ThreadingHTTPServer((self._host, self._port), _GitHTTPHandler)
        server.daemon_threads = True
        server.git_host = self  # type: ignore[attr-defined]
        self._port = server.server_address[1]  # pin so restart reuses the port
        self._server = server
        self._thread = threading.Thread(
            target=server.serve_forever, kwargs={"poll_interval": 0.1},
            name="git-http", daemon=True,
        )
        self._thread.start()

    def stop(self) -> None:
        """Become unreachable (connection refused), keeping the port."""
        if self._server is None:
            return
        self._server.shutdown()
        self._server.server_close()
        self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None

    @property
    def running(self) -> bool:
        return self._server is not None

    @property
    def base_url(self) -> str:
        return f"http://{self._host}:{self._port}"

    def url_for(self, name: str) -> str:
        return f"{self.base_url}/{name}"

    def __enter__(self) -> "GitHTTPServer":
        self.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.stop()
