"""Whole-system test with real OS processes.

Launches the key-value server, one backend node, and the gateway as
separate Python processes wired together through config files on disk,
then drives them with the `gitfarm` CLI and scrapes the node's metrics
endpoint — the same motions as a production deployment, shrunk to
loopback.
"""
import json
import socket
import subprocess
import sys
import time
import urllib.error
import urllib.request

import pytest

from gitfarm.config import (
    BackendConfig,
    GatewayConfig,
    PolicyEntry,
    RepositoryConfig,
    TokenEntry,
    save_backend_config,
    save_gateway_config,
)
from gitfarm.harness.fixtures import FixtureSpec, generate_fixture
from gitfarm.statestore import NodeRegistration

pytestmark = pytest.mark.slow

SECRET = "process-test-secret"


def _free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def _wait_listening(port: int, deadline: float) -> None:
    while time.time() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.5).close()
            return
        except OSError:
            time.sleep(0.1)
    raise TimeoutError(f"nothing listening on port {port}")


@pytest.fixture(scope="module")
def deployment(tmp_path_factory):
    root = tmp_path_factory.mktemp("deploy")
    fixture = generate_fixture(
        FixtureSpec(repo_id="demo", file_count=25, commit_count=3, seed=13),
        root / "upstream")

    kv_port, session_port, http_port, gw_port = (_free_port() for _ in range(4))
    statestore = f"127.0.0.1:{kv_port}"

    backend_cfg = BackendConfig(
        node_id="n1", cluster_id="c1", data_dir=str(root / "n1"),
        repositories=[RepositoryConfig(repo_id="demo",
                                       upstream_url=str(fixture.path),
                                       checkout_pool_size=2)],
        session_listen=f"127.0.0.1:{session_port}",
        http_listen=f"127.0.0.1:{http_port}",
        statestore=statestore,
        sandbox_pool_size=3,
        heartbeat_interval=0.3,
        shared_secret=SECRET,
    )
    save_backend_config(backend_cfg, root / "backend.json")

    gateway_cfg = GatewayConfig(
        listen=f"127.0.0.1:{gw_port}",
        statestore=statestore,
        shared_secret=SECRET,
        nodes=[NodeRegistration(node_id="n1", cluster_id="c1",
                                address=f"127.0.0.1:{session_port}",
                                checkout_pools={"demo": 2}, sandbox_pool=3)],
        tokens=[TokenEntry(token="tok-cli", client_id="cli",
                           display_name="CLI User")],
        policies=[PolicyEntry(client_id="cli", cluster_id="c1",
                              allowed_repos=("demo",))],
    )
    save_gateway_config(gateway_cfg, root / "gateway.json")

    procs = []

    def launch(*argv):
        proc = subprocess.Popen([sys.executable, "-m", *argv],
                                stdout=subprocess.PIPE,
                                stderr=subprocess.STDOUT)
        procs.append(proc)
        return proc

    try:
        launch("gitfarm.kvstore", "--listen", statestore)
        _wait_listening(kv_port, time.time() + 10)
        launch("gitfarm.backend.node", "--config", str(root / "backend.json"))
        _wait_listening(session_port, time.time() + 60)
        _wait_listening(http_port, time.time() + 10)
        launch("gitfarm.gateway", "--config", str(root / "gateway.json"))
        _wait_listening(gw_port, time.time() + 10)
        yield {
            "endpoint": f"127.0.0.1:{gw_port}",
            "http": f"127.0.0.1:{http_port}",
            "tip": fixture.tip,
        }
    finally:
        for proc in procs:
            proc.terminate()
        for proc in procs:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=10)


def _gitfarm(*argv):
    return subprocess.run(
        [sys.executable, "-m", "gitfarm.cli", *argv],
        capture_output=True, timeout=120)


def test_cli_execs_against_real_daemons(deployment):
    deadline = time.time() + 15
    while True:  # first heartbeat may still be in flight
        proc = _gitfarm("exec", "--endpoint", deployment["endpoint"],
                        "--token", "tok-cli", "--repo", "demo",
                        "--", "git", "rev-parse", "HEAD")
        if proc.returncode == 0 or time.time() > deadline:
            break
        time.sleep(0.3)
    assert proc.returncode == 0, proc.stderr.decode()
    assert proc.stdout.decode().strip() == deployment["tip"]


def test_cli_exit_codes_cross_process(deployment):
    denied = _gitfarm("exec", "--endpoint", deployment["endpoint"],
                      "--token", "tok-cli", "--repo", "secret",
                      "--", "git", "status")
    assert denied.returncode == 4

    unauth = _gitfarm("exec", "--endpoint", deployment["endpoint"],
                      "--token", "not-a-token", "--repo", "demo",
                      "--", "git", "status")
    assert unauth.returncode == 3

    failed = _gitfarm("exec", "--endpoint", deployment["endpoint"],
                      "--token", "tok-cli", "--repo", "demo",
                      "--", "git", "rev-parse", "--verify", "refs/missing")
    assert failed.returncode == 7


def test_metrics_endpoint_reports_node_state(deployment):
    with urllib.request.urlopen(f"http://{deployment['http']}/metrics",
                                timeout=5) as resp:
        assert resp.status == 200
        body = resp.read().decode()
    assert "node_id n1" in body
    assert "repo_ready{repo=demo}" in body
    assert "sandboxes_total 3" in body


def test_push_event_endpoint_validates_payloads(deployment):
    url = f"http://{deployment['http']}/events/push"

    ok = urllib.request.urlopen(urllib.request.Request(
        url, data=json.dumps({"repo_id": "demo"}).encode(),
        headers={"Content-Type": "application/json"}), timeout=5)
    assert ok.status == 202

    with pytest.raises(urllib.error.HTTPError) as excinfo:
        urllib.request.urlopen(urllib.request.Request(
            url, data=b"not json", headers={"Content-Type": "text/plain"}),
            timeout=5)
    assert excinfo.value.code == 400

    with pytest.raises(urllib.error.HTTPError) as excinfo:
        urllib.request.urlopen(urllib.request.Request(
            url, data=json.dumps({"repo_id": "ghost"}).encode(),
            headers={"Content-Type": "application/json"}), timeout=5)
    assert excinfo.value.code == 404

    with pytest.raises(urllib.error.HTTPError) as excinfo:
        urllib.request.urlopen(f"http://{deployment['http']}/nothing-here",
                               timeout=5)
    assert excinfo.value.code == 404


def test_health_endpoint(deployment):
    with urllib.request.urlopen(f"http://{deployment['http']}/health",
                                timeout=5) as resp:
        assert resp.status == 200
        assert resp.read() == b"ok\n"
