"""Warm checkout pools and sandbox slots.

A checkout slot is a full working tree cloned from the node-local bare
mirror, so materialisation costs no network round-trips and (on most
filesystems) hardlinks the object store.  Slots cycle through a strict
state machine:

    READY -> IN_USE -> REFRESHING -> READY

with one extra edge, READY -> REFRESHING, used by the proactive pass that
re-bases idle slots after the mirror has synced.  Every transition is
checked; a slot that reaches an impossible state is destroyed and rebuilt
rather than handed to a session.

Sandboxes are lighter: a directory tree providing HOME/TMPDIR plus the
per-session credential material, scrubbed between sessions.
"""

from __future__ import annotations

import itertools
import json
import logging
import shutil
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional, Set

from ..config import RepositoryConfig
from ..gitutil import GitError, git_out, run_git
from .repos import BareRepoManager

log = logging.getLogger("gitfarm.backend.pools")

# Checkout slot states.
READY = "READY"
IN_USE = "IN_USE"
REFRESHING = "REFRESHING"

_CHECKOUT_EDGES = {
    (READY, IN_USE),
    (IN_USE, REFRESHING),
    (REFRESHING, READY),
    (READY, REFRESHING),  # proactive refresh of an idle slot
}

# Sandbox states.
IDLE = "IDLE"
BOUND = "BOUND"
SCRUBBING = "SCRUBBING"

_SANDBOX_EDGES = {(IDLE, BOUND), (BOUND, SCRUBBING), (SCRUBBING, IDLE)}


class SlotStateError(AssertionError):
    """An illegal slot state transition was attempted."""


@dataclass
class CheckoutSlot:
    slot_id: str
    repo_id: str
    path: Path
    state: str = READY
    base_commit: str = ""
    generation: int = 0

    def transition(self, new_state: str) -> None:
        if (self.state, new_state) not in _CHECKOUT_EDGES:
            raise SlotStateError(
                f"checkout {self.slot_id}: illegal transition {self.state} -> {new_state}"
            )
        self.state = new_state


@dataclass
class SandboxSlot:
    sandbox_id: str
    mount_point: Path
    state: str = IDLE
    identity: Optional[str] = None

    def transition(self, new_state: str) -> None:
        if (self.state, new_state) not in _SANDBOX_EDGES:
            raise SlotStateError(
                f"sandbox {self.sandbox_id}: illegal transition {self.state} -> {new_state}"
            )
        self.state = new_state

    @property
    def home(self) -> Path:
        return self.mount_point / "home"

    @property
    def tmp(self) -> Path:
        return self.mount_point / "tmp"

    @property
    def creds(self) -> Path:
        return self.mount_point / "creds"


class CheckoutPool:
    """Pool of working trees for a single repository on a single node."""

    def __init__(self, repo: RepositoryConfig, bare: BareRepoManager, root: Path) -> None:
        self.repo = repo
        self._bare = bare
        self._root = root / repo.repo_id
        self._lock = threading.Lock()
        self._ready: Deque[CheckoutSlot] = deque()
        self._all: Set[str] = set()
        self._seq = itertools.count(1)
        self._cold_active = 0  # live slots when pooling is disabled

    # -- materialisation -------------------------------------------------

    def _materialize(self, slot_id: str) -> CheckoutSlot:
        """Clone the local mirror into a fresh working tree."""
        path = self._root / slot_id
        if path.exists():
            shutil.rmtree(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        bare = self._bare.bare_path(self.repo.repo_id)
        run_git(
            ["clone", "--quiet", "-c", "gc.auto=0", str(bare), str(path)],
            cwd=path.parent,
            timeout=600.0,
        )
        run_git(["config", "gc.auto", "0"], cwd=path)
        run_git(["remote", "add", "upstream", self.repo.upstream_url], cwd=path)
        base = git_out(["rev-parse", "--verify", "HEAD"], cwd=path)
        return CheckoutSlot(
            slot_id=slot_id,
            repo_id=self.repo.repo_id,
            path=path,
            state=READY,
            base_commit=base,
        )

    def _next_slot_id(self) -> str:
        return f"{self.repo.repo_id}-co{next(self._seq):03d}"

    def warm(self) -> None:
        """Fill the pool to its configured size (no-op when pooling is off)."""
        if not self.repo.pooling:
            return
        while True:
            with self._lock:
                if len(self._all) >= self.repo.checkout_pool_size:
                    return
                slot_id = self._next_slot_id()
                self._all.add(slot_id)
            try:
                slot = self._materialize(slot_id)
            except Exception:
                with self._lock:
                    self._all.discard(slot_id)
                raise
            with self._lock:
                self._ready.append(slot)

    # -- acquire / recycle -----------------------------------------------

    def acquire(self) -> Optional[CheckoutSlot]:
        """Hand out a READY slot, or None when the pool is exhausted.

        With pooling disabled this materialises a throwaway working tree on
        the spot (the cold path), still bounded by the configured size.
        """
        if not self.repo.pooling:
            with self._lock:
                if self._cold_active >= self.repo.checkout_pool_size:
                    return None
                self._cold_active += 1
                slot_id = self._next_slot_id()
            try:
                slot = self._materialize(slot_id)
            except Exception:
                with self._lock:
                    self._cold_active -= 1
                raise
            slot.transition(IN_USE)
            return slot
        with self._lock:
            if not self._ready:
                return None
            slot = self._ready.popleft()
        slot.transition(IN_USE)
        return slot

    def recycle(self, slot: CheckoutSlot) -> None:
        """Return a slot to service after a session.

        Pooled slots are refreshed back onto the mirror tip; cold slots are
        simply destroyed.  Any anomaly during refresh falls back to destroy
        and re-materialise, so a corrupted tree can never re-enter READY.
        """
        if not self.repo.pooling:
            self._destroy_path(slot.path)
            with self._lock:
                self._cold_active -= 1
            return
        slot.transition(REFRESHING)
        try:
            self._refresh(slot)
        except Exception as exc:
            log.warning("refresh of %s failed (%s); rebuilding slot", slot.slot_id, exc)
            self._rebuild(slot)
            return
        slot.transition(READY)
        with self._lock:
            self._ready.append(slot)

    def _refresh(self, slot: CheckoutSlot) -> None:
        """Reset a working tree onto the mirror's current default tip.

        Fast path: if the tree is already clean and parked on the tip we
        skip the reset entirely; this is what makes warm acquires cheap even
        under heavy recycle traffic.
        """
        path = slot.path
        branch = self._bare.default_branch(self.repo.repo_id)
        tip = self._bare.tip(self.repo.repo_id)
        run_git(["fetch", "--quiet", "origin"], cwd=path, timeout=120.0)
        head = git_out(["rev-parse", "--verify", "HEAD"], cwd=path)
        dirty = git_out(["status", "--porcelain"], cwd=path) != ""
        on_branch = git_out(["rev-parse", "--abbrev-ref", "HEAD"], cwd=path) == branch
        if dirty or head != tip or not on_branch:
            run_git(["checkout", "--force", "--quiet", branch], cwd=path)
            run_git(["reset", "--hard", "--quiet", tip], cwd=path)
            run_git(["clean", "-fdx", "--quiet"], cwd=path)
        # Drop any refs/branches a session may have created locally.
        for line in git_out(["for-each-ref", "--format=%(refname)", "refs/heads"],
                            cwd=path).splitlines():
            name = line.removeprefix("refs/heads/")
            if name and name != branch:
                run_git(["branch", "-D", "--quiet", name], cwd=path, check=False)
        slot.base_commit = tip
        slot.generation += 1

    def _rebuild(self, slot: CheckoutSlot) -> None:
        self._destroy_path(slot.path)
        with self._lock:
            self._all.discard(slot.slot_id)
        try:
            self.warm()
        except Exception:
            log.exception("re-materialisation for %s failed; pool below target",
                          self.repo.repo_id)

    @staticmethod
    def _destroy_path(path: Path) -> None:
        shutil.rmtree(path, ignore_errors=True)

    # -- proactive refresh -------------------------------------------------

    def refresh_idle(self) -> int:
        """Re-base READY slots that are behind the mirror tip; return count."""
        if not self.repo.pooling:
            return 0
        tip = self._bare.tip(self.repo.repo_id)
        refreshed = 0
        stale: List[CheckoutSlot] = []
        with self._lock:
            keep: Deque[CheckoutSlot] = deque()
            while self._ready:
                slot = self._ready.popleft()
                if slot.base_commit != tip:
                    slot.transition(REFRESHING)
                    stale.append(slot)
                else:
                    keep.append(slot)
            self._ready = keep
        for slot in stale:
            try:
                self._refresh(slot)
            except Exception as exc:
                log.warning("idle refresh of %s failed (%s); rebuilding", slot.slot_id, exc)
                self._rebuild(slot)
                continue
            slot.transition(READY)
            with self._lock:
                self._ready.append(slot)
            refreshed += 1
        return refreshed

    # -- introspection -----------------------------------------------------

    def ready_count(self) -> int:
        if not self.repo.pooling:
            with self._lock:
                return self.repo.checkout_pool_size - self._cold_active
        with self._lock:
            return len(self._ready)

    def size(self) -> int:
        with self._lock:
            return len(self._all)


class SandboxPool:
    """Fixed pool of scrubbed per-session sandbox directories."""

    def __init__(self, root: Path, size: int) -> None:
        if size < 1:
            raise ValueError("sandbox pool size must be >= 1")
        self._root = root
        self._lock = threading.Lock()
        self._idle: Deque[SandboxSlot] = deque()
        self._slots: List[SandboxSlot] = []
        for i in range(1, size + 1):
            slot = SandboxSlot(sandbox_id=f"sb{i:03d}", mount_point=root / f"sb{i:03d}")
            self._reset_tree(slot)
            self._slots.append(slot)
            self._idle.append(slot)

    @staticmethod
    def _reset_tree(slot: SandboxSlot) -> None:
        if slot.mount_point.exists():
            shutil.rmtree(slot.mount_point)
        for sub in (slot.home, slot.tmp, slot.creds):
            sub.mkdir(parents=True, exist_ok=True)

    def acquire(self) -> Optional[SandboxSlot]:
        with self._lock:
            if not self._idle:
                return None
            slot = self._idle.popleft()
        slot.transition(BOUND)
        return slot

    def bind(self, slot: SandboxSlot, *, session_id: str, client_id: str,
             display_name: str, repo_id: str) -> None:
        """Drop per-session credential material into a BOUND sandbox."""
        if slot.state != BOUND:
            raise SlotStateError(f"sandbox {slot.sandbox_id} not BOUND")
        slot.identity = client_id
        identity = {
            "session_id": session_id,
            "client_id": client_id,
            "display_name": display_name,
            "repo_id": repo_id,
        }
        (slot.creds / "identity.json").write_text(
            json.dumps(identity, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        name = display_name or client_id
        gitconfig = (
            "[user]\n"
            f"\tname = {name}\n"
            f"\temail = {client_id}@gitfarm.invalid\n"
            "[advice]\n"
            "\tdetachedHead = false\n"
            "[init]\n"
            "\tdefaultBranch = main\n"
        )
        (slot.creds / "gitconfig").write_text(gitconfig, encoding="utf-8")

    def scrub(self, slot: SandboxSlot) -> None:
        """Wipe every trace of the previous session and return slot to IDLE."""
        slot.transition(SCRUBBING)
        slot.identity = None
        self._reset_tree(slot)
        leftovers = [p for p in slot.home.iterdir()] + [p for p in slot.tmp.iterdir()]
        if leftovers:  # pragma: no cover - reset_tree recreates empty dirs
            raise SlotStateError(f"sandbox {slot.sandbox_id} scrub left {leftovers}")
        slot.transition(IDLE)
        with self._lock:
            self._idle.append(slot)

    def idle_count(self) -> int:
        with self._lock:
            return len(self._idle)

    def size(self) -> int:
        return len(self._slots)
