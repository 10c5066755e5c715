"""Mirror synchronisation: triggers, backoff, degraded mode, recovery."""
import time

import pytest

from gitfarm.backend.repos import EVENT, PERIODIC, BareRepoManager, SyncFailure, SyncState
from gitfarm.config import BackendConfig, RepositoryConfig
from gitfarm.gitutil import GitError, git_out
from gitfarm.harness.fixtures import FixtureSpec, GitHTTPServer, generate_fixture

from test_backend_pools import advance_upstream


@pytest.fixture
def rig(tmp_path):
    """Fixture repo behind a stoppable HTTP server, mirrored by a manager."""
    fixture = generate_fixture(
        FixtureSpec(repo_id="r", file_count=20, commit_count=3, seed=4),
        tmp_path / "up")
    server = GitHTTPServer({"r": fixture.path})
    server.start()
    config = BackendConfig(
        node_id="n1", cluster_id="c", data_dir=str(tmp_path / "node"),
        repositories=[RepositoryConfig(
            repo_id="r", upstream_url=server.url_for("r"),
            checkout_pool_size=1, sync_interval=300.0)],
    )
    yield fixture, server, config
    server.stop()


def test_ensure_all_mirrors_and_reads_tips(rig):
    fixture, _, config = rig
    manager = BareRepoManager(config)
    manager.ensure_all()
    assert manager.bare_path("r").exists()
    assert manager.default_branch("r") == "main"
    assert manager.tip("r") == fixture.tip
    assert git_out(["rev-parse", "refs/heads/main"],
                   cwd=manager.bare_path("r")) == fixture.tip
    # idempotent: a second call must not re-clone or fail
    manager.ensure_all()


def test_startup_is_strict_about_unreachable_upstream(rig):
    _, server, config = rig
    server.stop()
    manager = BareRepoManager(config)
    with pytest.raises(GitError):
        manager.ensure_all()


def test_sync_picks_up_new_commits_and_fires_callback(rig):
    fixture, _, config = rig
    events = []
    manager = BareRepoManager(config, on_tips_changed=lambda rid, tips:
                              events.append((rid, dict(tips))))
    manager.ensure_all()

    tips = manager.sync("r", PERIODIC)
    assert tips["main"] == fixture.tip
    assert events == []  # nothing moved yet

    new = advance_upstream(fixture.path)
    tips = manager.sync("r", PERIODIC)
    assert tips["main"] == new
    assert manager.tip("r") == new
    assert events == [("r", tips)]
    assert manager.state("r").syncs == 2


def test_sync_failure_backs_off_and_degrades_after_three(rig):
    fixture, server, config = rig
    manager = BareRepoManager(config)
    manager.ensure_all()
    server.stop()

    state = manager.state("r")
    for attempt in range(1, 4):
        with pytest.raises(SyncFailure):
            manager.sync("r", PERIODIC)
        assert state.consecutive_failures == attempt
        assert state.degraded is (attempt >= 3)
    assert manager.degraded("r") is True
    # the mirror still serves its last-known tips while degraded
    assert manager.tip("r") == fixture.tip


def test_backoff_schedule_doubles_and_caps():
    state = SyncState(repo_id="r")
    observed = []
    for failures in (1, 2, 3, 4, 5, 6, 7, 10):
        state.consecutive_failures = failures
        observed.append(state.backoff())
    assert observed == [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 60.0, 60.0]


def test_recovery_clears_degraded_and_failures(rig):
    fixture, server, config = rig
    manager = BareRepoManager(config)
    manager.ensure_all()
    server.stop()
    for _ in range(3):
        with pytest.raises(SyncFailure):
            manager.sync("r")
    server.start()
    new = advance_upstream(fixture.path)
    tips = manager.sync("r")
    assert tips["main"] == new
    state = manager.state("r")
    assert state.consecutive_failures == 0
    assert state.degraded is False
    assert manager.sync_lag("r") < 5.0


def test_notify_push_schedules_an_event_sync(rig):
    fixture, _, config = rig
    manager = BareRepoManager(config)
    manager.ensure_all()
    new = advance_upstream(fixture.path)

    manager.notify_push("r")
    assert manager.state("r").event_pending is True
    manager.start_scheduler(tick=0.05)
    try:
        deadline = time.time() + 5
        while manager.tip("r") != new and time.time() < deadline:
            time.sleep(0.05)
        assert manager.tip("r") == new
        assert manager.state("r").event_pending is False
    finally:
        manager.stop_scheduler()


def test_scheduler_runs_periodic_syncs_on_interval(tmp_path):
    fixture = generate_fixture(
        FixtureSpec(repo_id="r", file_count=15, commit_count=2, seed=5),
        tmp_path / "up")
    config = BackendConfig(
        node_id="n1", cluster_id="c", data_dir=str(tmp_path / "node"),
        repositories=[RepositoryConfig(
            repo_id="r", upstream_url=str(fixture.path),
            checkout_pool_size=1, sync_interval=0.2)],
    )
    manager = BareRepoManager(config)
    manager.ensure_all()
    new = advance_upstream(fixture.path)
    manager.start_scheduler(tick=0.05)
    try:
        deadline = time.time() + 5
        while manager.tip("r") != new and time.time() < deadline:
            time.sleep(0.05)
        assert manager.tip("r") == new
    finally:
        manager.stop_scheduler()


def test_event_trigger_constant_names():
    # wire-adjacent names used in logs and tests; keep them stable
    assert PERIODIC == "PERIODIC"
    assert EVENT == "EVENT"
