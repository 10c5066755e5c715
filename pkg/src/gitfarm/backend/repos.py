"""Bare mirror clones and their synchronisation with upstream.

Each backend node keeps one bare mirror per served repository.  The mirror
is created at startup with ``git clone --mirror`` and then kept fresh two
ways: a periodic fetch on a per-repository interval, and an event-driven
fetch triggered by the push webhook.  Checkout slots are re-based onto the
mirror, never onto upstream directly, so a single fetch amortises across
every slot on the node.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

from ..config import BackendConfig, RepositoryConfig
from ..gitutil import GitError, git_out, run_git

log = logging.getLogger("gitfarm.backend.repos")

# Sync triggers.
PERIODIC = "PERIODIC"
EVENT = "EVENT"
STARTUP = "STARTUP"

_BACKOFF_BASE = 1.0
_BACKOFF_CAP = 60.0
_DEGRADED_AFTER = 3
_FETCH_TIMEOUT = 60.0


class SyncFailure(Exception):
    """A single fetch attempt against upstream failed."""


@dataclass
class SyncState:
    """Mutable bookkeeping for one repository's mirror."""

    repo_id: str
    consecutive_failures: int = 0
    degraded: bool = False
    last_attempt_at: float = 0.0
    last_success_at: float = 0.0
    next_due_at: float = 0.0
    event_pending: bool = False
    syncs: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def backoff(self) -> float:
        return min(_BACKOFF_CAP, _BACKOFF_BASE * (2 ** max(0, self.consecutive_failures - 1)))


class BareRepoManager:
    """Owns the bare mirrors for every repository a node serves.

    ``on_tips_changed(repo_id, tips)`` is invoked (from the syncing thread)
    whenever a fetch moved any branch head; the node uses it to kick the
    proactive checkout-refresh pass.
    """

    def __init__(
        self,
        config: BackendConfig,
        on_tips_changed: Optional[Callable[[str, Dict[str, str]], None]] = None,
    ) -> None:
        self._config = config
        self._bare_root = Path(config.data_dir) / "bare"
        self._on_tips_changed = on_tips_changed
        self._states: Dict[str, SyncState] = {
            r.repo_id: SyncState(repo_id=r.repo_id) for r in config.repositories
        }
        self._default_branch: Dict[str, str] = {}
        self._tips: Dict[str, Dict[str, str]] = {}
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # -- paths ---------------------------------------------------------

    def bare_path(self, repo_id: str) -> Path:
        return self._bare_root / f"{repo_id}.git"

    def _repo_cfg(self, repo_id: str) -> RepositoryConfig:
        return self._config.repo(repo_id)

    # -- startup -------------------------------------------------------

    def ensure_all(self) -> None:
        """Mirror-clone every configured repository that is not present yet.

        Startup is strict: a node that cannot reach upstream for an initial
        clone refuses to come up rather than advertising slots it cannot
        back.
        """
        self._bare_root.mkdir(parents=True, exist_ok=True)
        for repo in self._config.repositories:
            path = self.bare_path(repo.repo_id)
            if not path.exists():
                run_git(
                    [
                        "clone",
                        "--mirror",
                        "--quiet",
                        "-c",
                        "gc.auto=0",
                        repo.upstream_url,
                        str(path),
                    ],
                    cwd=self._bare_root,
                    timeout=300.0,
                )
                run_git(["config", "gc.auto", "0"], cwd=path)
            state = self._states[repo.repo_id]
            now = time.time()
            state.last_attempt_at = now
            state.last_success_at = now
            state.next_due_at = now + repo.sync_interval
            self._default_branch[repo.repo_id] = git_out(
                ["symbolic-ref", "--short", "HEAD"], cwd=path
            )
            self._tips[repo.repo_id] = self._read_tips(repo.repo_id)

    # -- queries -------------------------------------------------------

    def default_branch(self, repo_id: str) -> str:
        return self._default_branch[repo_id]

    def tip(self, repo_id: str, branch: Optional[str] = None) -> str:
        branch = branch or self.default_branch(repo_id)
        return git_out(["rev-parse", "--verify", f"refs/heads/{branch}"],
                       cwd=self.bare_path(repo_id))

    def _read_tips(self, repo_id: str) -> Dict[str, str]:
        out = git_out(
            ["for-each-ref", "--format=%(refname:short) %(objectname)", "refs/heads"],
            cwd=self.bare_path(repo_id),
        )
        tips: Dict[str, str] = {}
        for line in out.splitlines():
            name, _, sha = line.partition(" ")
            if name and sha:
                tips[name] = sha
        return tips

    def state(self, repo_id: str) -> SyncState:
        return self._states[repo_id]

    def sync_lag(self, repo_id: str) -> float:
        return time.time() - self._states[repo_id].last_success_at

    def degraded(self, repo_id: str) -> bool:
        return self._states[repo_id].degraded

    # -- synchronisation -----------------------------------------------

    def notify_push(self, repo_id: str) -> None:
        """Record a push webhook; the scheduler fetches on its next tick."""
        state = self._states[repo_id]
        with state.lock:
            state.event_pending = True

    def sync(self, repo_id: str, trigger: str = PERIODIC) -> Dict[str, str]:
        """Run one fetch attempt against upstream; return branch tips after.

        On failure the repository's backoff/degraded bookkeeping is updated
        and :class:`SyncFailure` is raised.  The mirror keeps serving its
        last-known state either way.
        """
        state = self._states[repo_id]
        repo = self._repo_cfg(repo_id)
        path = self.bare_path(repo_id)
        now = time.time()
        with state.lock:
            state.last_attempt_at = now
            state.event_pending = False
        try:
            run_git(["fetch", "--prune", "--quiet", "origin"], cwd=path,
                    timeout=_FETCH_TIMEOUT)
        except GitError as exc:
            with state.lock:
                state.consecutive_failures += 1
                if state.consecutive_failures >= _DEGRADED_AFTER:
                    state.degraded = True
                state.next_due_at = time.time() + state.backoff()
            log.warning("sync %s (%s) failed (%d consecutive): %s",
                        repo_id, trigger, state.consecutive_failures, exc)
            raise SyncFailure(str(exc)) from exc

        tips = self._read_tips(repo_id)
        with state.lock:
            state.consecutive_failures = 0
            state.degraded = False
            state.last_success_at = time.time()
            state.next_due_at = state.last_success_at + repo.sync_interval
            state.syncs += 1
            changed = tips != self._tips.get(repo_id)
            self._tips[repo_id] = tips
        if changed and self._on_tips_changed is not None:
            self._on_tips_changed(repo_id, tips)
        return tips

    # -- scheduler thread ------------------------------------------------

    def start_scheduler(self, tick: float = 0.2) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(
            target=self._loop, args=(tick,), name="gitfarm-sync", daemon=True
        )
        self._thread.start()

    def stop_scheduler(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None

    def _loop(self, tick: float) -> None:
        while not self._stop.wait(tick):
            now = time.time()
            for repo_id, state in self._states.items():
                with state.lock:
                    due = state.event_pending or now >= state.next_due_at
                    trigger = EVENT if state.event_pending else PERIODIC
                if not due:
                    continue
                try:
                    self.sync(repo_id, trigger)
                except SyncFailure:
                    pass  # backoff already recorded
                except Exception:  # pragma: no cover - defensive
                    log.exception("unexpected sync error for %s", repo_id)
