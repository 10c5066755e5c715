"""Checkout and sandbox pools: state machine, refresh, cold path, scrubbing."""
import json
from pathlib import Path

import pytest

from gitfarm.backend.pools import (
    BOUND,
    IDLE,
    IN_USE,
    READY,
    REFRESHING,
    SCRUBBING,
    CheckoutPool,
    CheckoutSlot,
    SandboxPool,
    SandboxSlot,
    SlotStateError,
)
from gitfarm.backend.repos import BareRepoManager
from gitfarm.config import BackendConfig, RepositoryConfig
from gitfarm.gitutil import git_out, run_git
from gitfarm.harness.fixtures import FixtureSpec, generate_fixture


def make_rig(tmp_path, *, pool_size=2, pooling=True):
    """Fixture repo + mirror + pool, all on local paths (no HTTP)."""
    fixture = generate_fixture(
        FixtureSpec(repo_id="r", file_count=25, directory_depth=2,
                    commit_count=4, seed=2),
        tmp_path / "up")
    config = BackendConfig(
        node_id="n1", cluster_id="c", data_dir=str(tmp_path / "node"),
        repositories=[RepositoryConfig(
            repo_id="r", upstream_url=str(fixture.path),
            checkout_pool_size=pool_size, pooling=pooling)],
    )
    bare = BareRepoManager(config)
    bare.ensure_all()
    pool = CheckoutPool(config.repositories[0], bare,
                        Path(config.data_dir) / "checkouts")
    return fixture, bare, pool


def advance_upstream(bare_path) -> str:
    """One empty commit on upstream main, via plumbing."""
    tip = git_out(["rev-parse", "refs/heads/main"], cwd=bare_path)
    tree = git_out(["rev-parse", f"{tip}^{{tree}}"], cwd=bare_path)
    ident = {"GIT_AUTHOR_NAME": "U", "GIT_AUTHOR_EMAIL": "u@test",
             "GIT_COMMITTER_NAME": "U", "GIT_COMMITTER_EMAIL": "u@test"}
    new = git_out(["commit-tree", tree, "-p", tip, "-m", "tick"],
                  cwd=bare_path, env_extra=ident)
    git_out(["update-ref", "refs/heads/main", new], cwd=bare_path)
    return new


# -- slot state machines ------------------------------------------------------


def test_checkout_slot_legal_cycle(tmp_path):
    slot = CheckoutSlot(slot_id="s", repo_id="r", path=tmp_path, state=READY,
                        base_commit="x")
    slot.transition(IN_USE)
    slot.transition(REFRESHING)
    slot.transition(READY)
    slot.transition(REFRESHING)  # proactive refresh of an idle slot
    slot.transition(READY)


@pytest.mark.parametrize("start,bad", [
    (READY, READY),
    (IN_USE, READY),       # must pass through REFRESHING
    (REFRESHING, IN_USE),
])
def test_checkout_slot_illegal_transitions(tmp_path, start, bad):
    slot = CheckoutSlot(slot_id="s", repo_id="r", path=tmp_path, state=start,
                        base_commit="x")
    with pytest.raises(SlotStateError):
        slot.transition(bad)


def test_sandbox_slot_state_machine(tmp_path):
    slot = SandboxSlot(sandbox_id="sb", mount_point=tmp_path)
    assert slot.state == IDLE
    slot.transition(BOUND)
    slot.transition(SCRUBBING)
    slot.transition(IDLE)
    with pytest.raises(SlotStateError):
        slot.transition(SCRUBBING)  # IDLE -> SCRUBBING skips BOUND


# -- warm pool ----------------------------------------------------------------


def test_warm_fills_pool_and_acquire_drains_it(tmp_path):
    fixture, _, pool = make_rig(tmp_path, pool_size=2)
    pool.warm()
    assert pool.ready_count() == 2
    assert pool.size() == 2

    first = pool.acquire()
    second = pool.acquire()
    assert first.state == IN_USE and second.state == IN_USE
    assert first.slot_id != second.slot_id
    assert pool.acquire() is None  # exhausted, never over-allocates
    assert pool.ready_count() == 0

    for slot in (first, second):
        assert slot.base_commit == fixture.tip
        assert git_out(["rev-parse", "HEAD"], cwd=slot.path) == fixture.tip
        remotes = git_out(["remote"], cwd=slot.path).splitlines()
        assert sorted(remotes) == ["origin", "upstream"]


def test_recycle_clean_slot_returns_to_ready(tmp_path):
    _, _, pool = make_rig(tmp_path, pool_size=1)
    pool.warm()
    slot = pool.acquire()
    pool.recycle(slot)
    assert slot.state == READY
    assert pool.ready_count() == 1


def test_recycle_scrubs_a_trashed_working_tree(tmp_path):
    fixture, _, pool = make_rig(tmp_path, pool_size=1)
    pool.warm()
    slot = pool.acquire()

    tracked = git_out(["ls-files"], cwd=slot.path).splitlines()[0]
    (slot.path / tracked).write_text("scribbled\n")
    (slot.path / "junk.bin").write_bytes(b"\x00" * 128)
    (slot.path / "junkdir").mkdir()
    (slot.path / "junkdir" / "deep").write_text("x")
    run_git(["checkout", "--quiet", "-b", "session-branch"], cwd=slot.path)
    run_git(["update-ref", "refs/heads/sneaky", "HEAD"], cwd=slot.path)

    pool.recycle(slot)
    assert slot.state == READY
    assert git_out(["status", "--porcelain"], cwd=slot.path) == ""
    assert git_out(["rev-parse", "HEAD"], cwd=slot.path) == fixture.tip
    assert git_out(["rev-parse", "--abbrev-ref", "HEAD"], cwd=slot.path) == "main"
    branches = git_out(["for-each-ref", "--format=%(refname:short)", "refs/heads"],
                       cwd=slot.path).splitlines()
    assert branches == ["main"]


def test_recycle_recovers_detached_head(tmp_path):
    fixture, _, pool = make_rig(tmp_path, pool_size=1)
    pool.warm()
    slot = pool.acquire()
    run_git(["checkout", "--quiet", "HEAD~1"], cwd=slot.path)
    pool.recycle(slot)
    assert git_out(["rev-parse", "--abbrev-ref", "HEAD"], cwd=slot.path) == "main"
    assert git_out(["rev-parse", "HEAD"], cwd=slot.path) == fixture.tip


def test_recycle_rebases_onto_new_mirror_tip(tmp_path):
    fixture, bare, pool = make_rig(tmp_path, pool_size=1)
    pool.warm()
    slot = pool.acquire()
    new_tip = advance_upstream(fixture.path)
    bare.sync("r")
    pool.recycle(slot)
    assert slot.base_commit == new_tip
    assert git_out(["rev-parse", "HEAD"], cwd=slot.path) == new_tip


def test_corrupted_slot_is_rebuilt_not_reused(tmp_path):
    import shutil

    _, _, pool = make_rig(tmp_path, pool_size=1)
    pool.warm()
    slot = pool.acquire()
    shutil.rmtree(slot.path / ".git")  # simulate severe corruption
    pool.recycle(slot)
    assert pool.ready_count() == 1  # replacement slot, fully materialised
    fresh = pool.acquire()
    assert fresh.slot_id != slot.slot_id
    assert git_out(["status", "--porcelain"], cwd=fresh.path) == ""


def test_refresh_idle_rebases_stale_ready_slots(tmp_path):
    fixture, bare, pool = make_rig(tmp_path, pool_size=2)
    pool.warm()
    new_tip = advance_upstream(fixture.path)
    bare.sync("r")
    assert pool.refresh_idle() == 2
    assert pool.refresh_idle() == 0  # already on tip: nothing to do
    slot = pool.acquire()
    assert slot.base_commit == new_tip


# -- cold path ------------------------------------------------------------------


def test_cold_mode_materialises_on_demand(tmp_path):
    fixture, _, pool = make_rig(tmp_path, pool_size=2, pooling=False)
    pool.warm()  # no-op without pooling
    assert pool.size() == 0
    assert pool.ready_count() == 2  # virtual capacity

    one = pool.acquire()
    assert one.state == IN_USE
    assert git_out(["rev-parse", "HEAD"], cwd=one.path) == fixture.tip
    assert pool.ready_count() == 1

    two = pool.acquire()
    assert pool.acquire() is None  # bounded by configured size
    path = one.path
    pool.recycle(one)
    assert not path.exists()  # cold slots are destroyed, not refreshed
    assert pool.ready_count() == 1
    pool.recycle(two)
    assert pool.ready_count() == 2


# -- sandboxes ----------------------------------------------------------------------


def test_sandbox_pool_bind_and_scrub_lifecycle(tmp_path):
    pool = SandboxPool(tmp_path, 2)
    assert pool.idle_count() == 2

    slot = pool.acquire()
    assert slot.state == BOUND
    pool.bind(slot, session_id="s1", client_id="alice",
              display_name="Alice Dev", repo_id="demo")
    identity = json.loads((slot.creds / "identity.json").read_text())
    assert identity == {"session_id": "s1", "client_id": "alice",
                        "display_name": "Alice Dev", "repo_id": "demo"}
    gitconfig = (slot.creds / "gitconfig").read_text()
    assert "name = Alice Dev" in gitconfig
    assert "email = alice@gitfarm.invalid" in gitconfig

    (slot.home / "secret.txt").write_text("residue")
    (slot.tmp / "scratch").mkdir()
    pool.scrub(slot)
    assert slot.state == IDLE
    assert slot.identity is None
    assert list(slot.home.iterdir()) == []
    assert list(slot.tmp.iterdir()) == []
    assert not (slot.creds / "identity.json").exists()
    assert pool.idle_count() == 2


def test_sandbox_pool_exhaustion_and_bounds(tmp_path):
    pool = SandboxPool(tmp_path, 1)
    slot = pool.acquire()
    assert pool.acquire() is None
    pool.scrub(slot)
    assert pool.acquire() is not None
    with pytest.raises(ValueError):
        SandboxPool(tmp_path / "zero", 0)


def test_sandbox_bind_requires_bound_state(tmp_path):
    pool = SandboxPool(tmp_path, 1)
    slot = pool._slots[0]  # still IDLE
    with pytest.raises(SlotStateError):
        pool.bind(slot, session_id="s", client_id="c", display_name="",
                  repo_id="r")
