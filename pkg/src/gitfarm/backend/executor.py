"""Sandboxed execution of a single command inside a session.

Commands run as their own process group with a scrubbed environment rooted
in the session sandbox, so a kill (timeout, client disconnect, node crash)
can take down the whole tree with one signal and nothing from the operator
environment leaks in.
"""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional

from ..protocol import Command, CommandResult
from .pools import CheckoutSlot, SandboxSlot

log = logging.getLogger("gitfarm.backend.executor")

#: Exit code reported when a command exceeds its per-command deadline.
TIMEOUT_EXIT_CODE = 124

#: Hook signature used by fault injection to sabotage process spawn.
SpawnHook = Callable[[str, Command], None]


class SpawnFailure(Exception):
    """The command process could not be started at all."""


def _default_path() -> str:
    return os.environ.get("PATH", "/usr/local/bin:/usr/bin:/bin")


def build_env(sandbox: SandboxSlot, extra: Mapping[str, str],
              *, client_id: str) -> Dict[str, str]:
    """Construct the scrubbed environment for one command.

    Nothing from the node's own environment is inherited except PATH.  Git
    is pinned to the per-session global config (identity, defaults) and the
    system config is disabled, so repository-local config is the only other
    input.
    """
    env: Dict[str, str] = {
        "PATH": _default_path(),
        "HOME": str(sandbox.home),
        "TMPDIR": str(sandbox.tmp),
        "LANG": "C.UTF-8",
        "LC_ALL": "C.UTF-8",
        "GIT_CONFIG_NOSYSTEM": "1",
        "GIT_CONFIG_GLOBAL": str(sandbox.creds / "gitconfig"),
        "GIT_TERMINAL_PROMPT": "0",
        "GITFARM_SANDBOX": sandbox.sandbox_id,
        "GITFARM_CLIENT_ID": client_id,
        "GITFARM_CREDENTIALS": str(sandbox.creds / "identity.json"),
    }
    env.update(extra)
    return env


@dataclass
class ExecutionOutcome:
    result: CommandResult
    timed_out: bool = False


class CommandExecutor:
    """Runs validated commands for sessions on one node."""

    def __init__(self, *, per_command_timeout: float, output_cap: int,
                 spawn_hook: Optional[SpawnHook] = None) -> None:
        self.per_command_timeout = per_command_timeout
        self.output_cap = output_cap
        self.spawn_hook = spawn_hook
        self._lock = threading.Lock()
        self._live: Dict[str, subprocess.Popen] = {}

    # -- live-process tracking (for disconnect / crash kills) -----------

    def _track(self, session_id: str, proc: subprocess.Popen) -> None:
        with self._lock:
            self._live[session_id] = proc

    def _untrack(self, session_id: str) -> None:
        with self._lock:
            self._live.pop(session_id, None)

    def kill_session(self, session_id: str) -> bool:
        """SIGKILL the process group of the session's running command."""
        with self._lock:
            proc = self._live.get(session_id)
        if proc is None:
            return False
        _kill_group(proc)
        return True

    def kill_all(self) -> int:
        with self._lock:
            procs = list(self._live.values())
        for proc in procs:
            _kill_group(proc)
        return len(procs)

    # -- execution -------------------------------------------------------

    def execute(self, *, session_id: str, command: Command,
                checkout: CheckoutSlot, sandbox: SandboxSlot,
                client_id: str, deadline_remaining: float) -> ExecutionOutcome:
        """Run one command to completion inside the session's slots.

        Raises :class:`SpawnFailure` when the process cannot start; every
        other failure mode (non-zero exit, timeout, kill) is reported inside
        the returned :class:`CommandResult`.
        """
        env = build_env(sandbox, command.environment, client_id=client_id)
        timeout = max(0.1, min(self.per_command_timeout, deadline_remaining))
        argv = [command.binary, *command.arguments]
        try:
            if self.spawn_hook is not None:
                self.spawn_hook(session_id, command)
            proc = subprocess.Popen(
                argv,
                cwd=str(checkout.path),
                env=env,
                stdin=subprocess.PIPE if command.stdin is not None else subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,
            )
        except OSError as exc:
            raise SpawnFailure(f"cannot spawn {command.binary!r}: {exc}") from exc

        self._track(session_id, proc)
        timed_out = False
        try:
            try:
                stdout, stderr = proc.communicate(input=command.stdin, timeout=timeout)
            except subprocess.TimeoutExpired:
                timed_out = True
                _kill_group(proc)
                stdout, stderr = proc.communicate()
        finally:
            self._untrack(session_id)

        exit_code = proc.returncode
        if timed_out:
            exit_code = TIMEOUT_EXIT_CODE
            stderr = (stderr or b"") + (
                f"\ncommand '{command.alias}' timed out after {timeout:.1f}s\n".encode()
            )
        stdout, stderr, truncated = self._cap(stdout or b"", stderr or b"")
        result = CommandResult(
            alias=command.alias,
            exit_code=exit_code,
            stdout=stdout,
            stderr=stderr,
            truncated=truncated,
        )
        return ExecutionOutcome(result=result, timed_out=timed_out)

    def _cap(self, stdout: bytes, stderr: bytes) -> tuple:
        truncated = False
        if len(stdout) > self.output_cap:
            stdout = stdout[: self.output_cap]
            truncated = True
        if len(stderr) > self.output_cap:
            stderr = stderr[: self.output_cap]
            truncated = True
        return stdout, stderr, truncated


def _kill_group(proc: subprocess.Popen) -> None:
    """Best-effort SIGKILL of the whole process group."""
    if proc.poll() is not None:
        return
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        try:
            proc.kill()
        except ProcessLookupError:
            pass
