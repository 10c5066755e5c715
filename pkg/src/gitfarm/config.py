"""Dataclass configs for backend nodes and gateways, JSON on disk.

Config files carry a `version` integer so older files are rejected
loudly instead of being misread.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .statestore import (DEFAULT_HEARTBEAT_INTERVAL, DEFAULT_LEASE_TTL,
                         DEFAULT_STALENESS, NodeRegistration)

CONFIG_VERSION = 1

DEFAULT_SYNC_INTERVAL = 300.0
DEFAULT_COMMAND_TIMEOUT = 120.0
DEFAULT_SESSION_CAP = 300.0
DEFAULT_OUTPUT_CAP = 4 * 1024 * 1024


@dataclass(frozen=True)
class RepositoryConfig:
    """One repository a backend node serves."""

    repo_id: str
    upstream_url: str
    checkout_pool_size: int = 4
    sync_interval: float = DEFAULT_SYNC_INTERVAL
    pooling: bool = True  # False = materialize on demand (cold path)

    def __post_init__(self):
        if self.checkout_pool_size < 1:
            raise ValueError("checkout_pool_size must be >= 1")
        if self.sync_interval <= 0:
            raise ValueError("sync_interval must be positive")


@dataclass
class BackendConfig:
    node_id: str
    cluster_id: str
    data_dir: str
    repositories: list[RepositoryConfig] = field(default_factory=list)
    session_listen: str = "127.0.0.1:0"
    http_listen: str = "127.0.0.1:0"
    statestore: str = ""  # host:port of the kv server; empty = in-process only
    sandbox_pool_size: int = 8
    allowlist: tuple[str, ...] = ("git",)
    per_command_timeout: float = DEFAULT_COMMAND_TIMEOUT
    session_cap: float = DEFAULT_SESSION_CAP
    output_cap_bytes: int = DEFAULT_OUTPUT_CAP
    heartbeat_interval: float = DEFAULT_HEARTBEAT_INTERVAL
    sync_enabled: bool = True
    refresh_ready_on_sync: bool = True
    shared_secret: str = "dev-secret"
    version: int = CONFIG_VERSION

    def repo(self, repo_id: str) -> Optional[RepositoryConfig]:
        for rc in self.repositories:
            if rc.repo_id == repo_id:
                return rc
        return None


@dataclass
class TokenEntry:
    token: str
    client_id: str
    display_name: str = ""


@dataclass
class PolicyEntry:
    """Placement policy: one client's cluster and permitted repositories."""

    client_id: str
    cluster_id: str
    allowed_repos: tuple[str, ...] = ()


@dataclass
class GatewayConfig:
    listen: str = "127.0.0.1:0"
    statestore: str = ""
    shared_secret: str = "dev-secret"
    nodes: list[NodeRegistration] = field(default_factory=list)
    tokens: list[TokenEntry] = field(default_factory=list)
    policies: list[PolicyEntry] = field(default_factory=list)
    staleness_threshold: float = DEFAULT_STALENESS
    lease_ttl: float = DEFAULT_LEASE_TTL
    connect_timeout: float = 3.0
    version: int = CONFIG_VERSION


def _check_version(raw: dict, path: Union[str, Path]) -> None:
    version = raw.get("version")
    if version != CONFIG_VERSION:
        raise ValueError(f"{path}: unsupported config version {version!r} "
                         f"(expected {CONFIG_VERSION})")


def load_backend_config(path: Union[str, Path]) -> BackendConfig:
    raw = json.loads(Path(path).read_text())
    _check_version(raw, path)
    repos = [RepositoryConfig(**r) for r in raw.pop("repositories", [])]
    allowlist = tuple(raw.pop("allowlist", ["git"]))
    return BackendConfig(repositories=repos, allowlist=allowlist, **raw)


def save_backend_config(cfg: BackendConfig, path: Union[str, Path]) -> None:
    raw = {
        "version": cfg.version,
        "node_id": cfg.node_id,
        "cluster_id": cfg.cluster_id,
        "data_dir": cfg.data_dir,
        "session_listen": cfg.session_listen,
        "http_listen": cfg.http_listen,
        "statestore": cfg.statestore,
        "sandbox_pool_size": cfg.sandbox_pool_size,
        "allowlist": list(cfg.allowlist),
        "per_command_timeout": cfg.per_command_timeout,
        "session_cap": cfg.session_cap,
        "output_cap_bytes": cfg.output_cap_bytes,
        "heartbeat_interval": cfg.heartbeat_interval,
        "sync_enabled": cfg.sync_enabled,
        "refresh_ready_on_sync": cfg.refresh_ready_on_sync,
        "shared_secret": cfg.shared_secret,
        "repositories": [{
            "repo_id": r.repo_id,
            "upstream_url": r.upstream_url,
            "checkout_pool_size": r.checkout_pool_size,
            "sync_interval": r.sync_interval,
            "pooling": r.pooling,
        } for r in cfg.repositories],
    }
    Path(path).write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")


def load_gateway_config(path: Union[str, Path]) -> GatewayConfig:
    raw = json.loads(Path(path).read_text())
    _check_version(raw, path)
    nodes = [NodeRegistration(node_id=n["node_id"], cluster_id=n["cluster_id"],
                              address=n["address"],
                              checkout_pools=dict(n.get("checkout_pools", {})),
                              sandbox_pool=n.get("sandbox_pool", 0))
             for n in raw.pop("nodes", [])]
    tokens = [TokenEntry(**t) for t in raw.pop("tokens", [])]
    policies = [PolicyEntry(client_id=p["client_id"], cluster_id=p["cluster_id"],
                            allowed_repos=tuple(p.get("allowed_repos", [])))
                for p in raw.pop("policies", [])]
    return GatewayConfig(nodes=nodes, tokens=tokens, policies=policies, **raw)


def save_gateway_config(cfg: GatewayConfig, path: Union[str, Path]) -> None:
    raw = {
        "version": cfg.version,
        "listen": cfg.listen,
        "statestore": cfg.statestore,
        "shared_secret": cfg.shared_secret,
        "staleness_threshold": cfg.staleness_threshold,
        "lease_ttl": cfg.lease_ttl,
        "connect_timeout": cfg.connect_timeout,
        "nodes": [{
            "node_id": n.node_id,
            "cluster_id": n.cluster_id,
            "address": n.address,
            "checkout_pools": dict(n.checkout_pools),
            "sandbox_pool": n.sandbox_pool,
        } for n in cfg.nodes],
        "tokens": [{
            "token": t.token,
            "client_id": t.client_id,
            "display_name": t.display_name,
        } for t in cfg.tokens],
        "policies": [{
            "client_id": p.client_id,
            "cluster_id": p.cluster_id,
            "allowed_repos": list(p.allowed_repos),
        } for p in cfg.policies],
    }
    Path(path).write_text(json.dumps(raw, indent=2, sort_keys=True) + "\n")
