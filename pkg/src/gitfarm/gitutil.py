"""Thin subprocess wrapper for git invocations made by gitfarm itself
(pool maintenance, sync, oracles). Session commands go through the
sandbox executor instead, which has its own environment policy.
"""
from __future__ import annotations

import os
import subprocess
from pathlib import Path
from typing import Optional, Union


class GitError(RuntimeError):
    def __init__(self, argv: list[str], returncode: int, stderr: str):
        super().__init__(f"git {' '.join(argv)} failed ({returncode}): {stderr.strip()}")
        self.argv = argv
        self.returncode = returncode
        self.stderr = stderr


def _base_env() -> dict[str, str]:
    env = {
        "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
        "HOME": os.environ.get("HOME", "/tmp"),
        "GIT_TERMINAL_PROMPT": "0",
        "GIT_CONFIG_NOSYSTEM": "1",
        "LC_ALL": "C",
    }
    return env


def run_git(args: list[str], cwd: Union[str, Path, None] = None, *,
            check: bool = True, timeout: float = 120.0,
            input_bytes: Optional[bytes] = None,
            env_extra: Optional[dict[str, str]] = None) -> subprocess.CompletedProcess:
    env = _base_env()
    if env_extra:
        env.update(env_extra)
    proc = subprocess.run(["git", *args], cwd=str(cwd) if cwd else None,
                          capture_output=True, timeout=timeout,
                          input=input_bytes, env=env)
    if check and proc.returncode != 0:
        raise GitError(args, proc.returncode, proc.stderr.decode("utf-8", "replace"))
    return proc


def git_out(args: list[str], cwd: Union[str, Path, None] = None, **kwargs) -> str:
    """run_git returning stripped stdout text."""
    return run_git(args, cwd, **kwargs).stdout.decode("utf-8", "replace").strip()


def rev_parse(repo: Union[str, Path], ref: str = "HEAD") -> str:
    return git_out(["rev-parse", "--verify", f"{ref}^{{commit}}"], repo)


def default_branch(bare_repo: Union[str, Path]) -> str:
    ref = git_out(["symbolic-ref", "HEAD"], bare_repo)
    prefix = "refs/heads/"
    return ref[len(prefix):] if ref.startswith(prefix) else ref
