import shutil

import pytest
from hypothesis import HealthCheck, settings

from gitfarm.harness.cluster import ClusterSpec, LocalCluster
from gitfarm.harness.fixtures import BranchSpec, FixtureSpec

settings.register_profile(
    "local",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("local")

# Small repository used by most end-to-end tests: enough structure to be
# interesting (directories, OWNERS files, a forked branch) while staying
# fast to clone.
SMALL_REPO = FixtureSpec(
    repo_id="demo",
    file_count=120,
    directory_depth=3,
    commit_count=12,
    seed=7,
    branches=(BranchSpec(name="feature", fork_at=6, commits=3),),
)


@pytest.fixture(scope="session")
def basic_cluster(tmp_path_factory):
    """One-node cluster shared across read-mostly end-to-end tests."""
    root = tmp_path_factory.mktemp("cluster")
    spec = ClusterSpec(repos=(SMALL_REPO,), nodes=1,
                       checkout_pool_size=4, sandbox_pool_size=6)
    cluster = LocalCluster(root=root, spec=spec)
    cluster.start()
    yield cluster
    cluster.stop()
    shutil.rmtree(root, ignore_errors=True)


@pytest.fixture
def make_cluster(tmp_path):
    """Factory for tests that mutate, crash, or reconfigure a cluster."""
    built = []

    def build(spec: ClusterSpec) -> LocalCluster:
        cluster = LocalCluster(root=tmp_path / f"cluster{len(built)}", spec=spec)
        built.append(cluster)
        cluster.start()
        return cluster

    yield build
    for cluster in built:
        cluster.destroy()
