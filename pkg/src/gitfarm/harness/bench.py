"""Benchmarks and reference workloads over a local cluster.

Reports keep raw samples (seconds) per phase so downstream analysis can
recompute anything; the summary uses nearest-rank percentiles, which are
well-defined for small sample counts.

The read-only workloads verify remote results against a local oracle: the
same git binary run in a pristine clone of the same upstream at the same
commit, under the same scrubbed environment.  Equality is byte-for-byte on
(exit code, stdout, stderr).
"""

from __future__ import annotations

import json
import math
import os
import random
import shutil
import subprocess
import time
import uuid
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from ..client import Session, SessionRejected, SessionScript, run_script
from ..errors import ErrorCode
from ..gitutil import run_git
from .cluster import LocalCluster

# Read-only commands whose output depends only on repository content, never
# on remotes, packing, or local configuration.
READONLY_MENU: Tuple[Tuple[str, ...], ...] = (
    ("status", "--short"),
    ("rev-parse", "HEAD"),
    ("log", "-n", "5", "--format=%H %T %s"),
    ("ls-files",),
    ("ls-tree", "-r", "--name-only", "HEAD"),
    ("cat-file", "-p", "HEAD"),
    ("for-each-ref", "--format=%(refname) %(objectname)", "refs/heads"),
    ("show", "--stat", "--format=%H", "HEAD"),
)


def percentile(samples: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile; pct in (0, 100]."""
    if not samples:
        raise ValueError("no samples")
    ordered = sorted(samples)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class BenchReport:
    """Raw samples plus counters for one scenario run."""

    scenario: str
    params: Dict[str, object] = field(default_factory=dict)
    samples: Dict[str, List[float]] = field(default_factory=dict)
    counters: Dict[str, int] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    started_at: float = field(default_factory=time.time)
    elapsed_seconds: float = 0.0

    def add(self, phase: str, seconds: float) -> None:
        self.samples.setdefault(phase, []).append(seconds)

    def bump(self, counter: str, by: int = 1) -> None:
        self.counters[counter] = self.counters.get(counter, 0) + by

    def note(self, text: str) -> None:
        self.notes.append(text)

    def phase_summary(self, phase: str) -> Dict[str, float]:
        data = self.samples.get(phase, [])
        if not data:
            return {"count": 0}
        return {
            "count": len(data),
            "mean": sum(data) / len(data),
            "min": min(data),
            "p50": percentile(data, 50),
            "p95": percentile(data, 95),
            "max": max(data),
        }

    def throughput(self, phase: str) -> float:
        """Completed samples per second of wall time for one phase."""
        if self.elapsed_seconds <= 0:
            return 0.0
        return len(self.samples.get(phase, [])) / self.elapsed_seconds

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "params": self.params,
            "started_at": self.started_at,
            "elapsed_seconds": round(self.elapsed_seconds, 6),
            "counters": self.counters,
            "notes": self.notes,
            "summary": {phase: self.phase_summary(phase) for phase in self.samples},
            "throughput": {phase: round(self.throughput(phase), 4)
                           for phase in self.samples},
            "samples": self.samples,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    def format_table(self) -> str:
        lines = [f"scenario: {self.scenario}"]
        for key, value in sorted(self.params.items()):
            lines.append(f"  {key} = {value}")
        for phase in sorted(self.samples):
            s = self.phase_summary(phase)
            lines.append(
                f"  {phase:<20} n={s['count']:<6} mean={s['mean'] * 1000:9.2f}ms "
                f"p50={s['p50'] * 1000:9.2f}ms p95={s['p95'] * 1000:9.2f}ms "
                f"max={s['max'] * 1000:9.2f}ms")
        for counter, value in sorted(self.counters.items()):
            lines.append(f"  {counter} = {value}")
        for note in self.notes:
            lines.append(f"  note: {note}")
        return "\n".join(lines)


def run_parallel(count: int, parallelism: int, fn: Callable[[int], dict],
                 pace_seconds: float = 0.0) -> List[dict]:
    """Run fn(0..count-1) across a thread pool; collect all outcomes.

    A non-zero pace sleeps between submissions, turning the pool into an
    open-ish loop driven at roughly 1/pace submissions per second.
    """
    outcomes: List[dict] = []
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        futures = []
        for i in range(count):
            futures.append(pool.submit(fn, i))
            if pace_seconds > 0 and i + 1 < count:
                time.sleep(pace_seconds)
        for future in as_completed(futures):
            outcomes.append(future.result())
    return outcomes


def session_budget(sessions: int, rate: Optional[float],
                   duration: Optional[float]) -> Tuple[int, float]:
    """Translate a rate/duration pair into (session count, pacing).

    Whichever of rate and duration is given wins over the plain count;
    with both, the count is rate*duration and submissions are spaced at
    1/rate.  Desk-scale approximation: pacing happens at submission, so a
    saturated pool stretches the effective duration instead of shedding.
    """
    if rate is not None and rate <= 0:
        raise ValueError("rate must be positive")
    if duration is not None and duration <= 0:
        raise ValueError("duration must be positive")
    if rate and duration:
        return max(1, round(rate * duration)), 1.0 / rate
    if rate:
        return sessions, 1.0 / rate
    if duration:
        return sessions, duration / max(1, sessions)
    return sessions, 0.0


# -- acquisition ---------------------------------------------------------------


def bench_acquire(cluster: LocalCluster, trials: int = 100, *,
                  scenario: str = "acquire",
                  capacity_retry_limit: int = 200) -> BenchReport:
    """Open and close sessions one after another, timing acquisition.

    Two phases land in the report: ``acquire_seconds`` is the server-side
    slot binding time carried in the ack, ``open_seconds`` the client-side
    connect-to-ack wall time.  Trials blocked by momentary recycling are
    retried (counted, not timed) so the numbers describe acquisition cost,
    not scheduling luck.
    """
    repo_id = cluster.spec.repos[0].repo_id
    report = BenchReport(scenario=scenario, params={
        "trials": trials,
        "repo": repo_id,
        "pooling": cluster.spec.pooling,
        "nodes": cluster.spec.nodes,
        "pool_size": cluster.spec.checkout_pool_size,
    })
    started = time.perf_counter()
    done = 0
    while done < trials:
        t0 = time.perf_counter()
        try:
            session = cluster.session(repo_id)
        except SessionRejected as exc:
            if exc.code == ErrorCode.RESOURCE_EXHAUSTED:
                report.bump("capacity_retries")
                if report.counters.get("capacity_retries", 0) > capacity_retry_limit:
                    report.note("capacity retry limit hit; aborting bench")
                    break
                time.sleep(0.05)
                continue
            report.bump("failures")
            report.note(f"trial {done}: {exc.code}: {exc.message}")
            done += 1
            continue
        opened = time.perf_counter() - t0
        report.add("open_seconds", opened)
        report.add("acquire_seconds", session.ack.acquire_seconds)
        session.close()
        done += 1
    report.elapsed_seconds = time.perf_counter() - started
    return report


# -- oracle machinery ------------------------------------------------------------


def oracle_env(home: Path) -> Dict[str, str]:
    """Environment equivalent to the execution sandbox, minus identity."""
    return {
        "PATH": os.environ.get("PATH", "/usr/local/bin:/usr/bin:/bin"),
        "HOME": str(home),
        "TMPDIR": str(home / "tmp"),
        "LANG": "C.UTF-8",
        "LC_ALL": "C.UTF-8",
        "GIT_CONFIG_NOSYSTEM": "1",
        "GIT_TERMINAL_PROMPT": "0",
    }


class Oracle:
    """Runs commands locally in a pristine clone for comparison."""

    def __init__(self, bare_path: Path, workdir: Path):
        self.home = Path(workdir) / "oracle-home"
        (self.home / "tmp").mkdir(parents=True, exist_ok=True)
        self.clone = Path(workdir) / "oracle-clone"
        run_git(["clone", "--quiet", str(bare_path), str(self.clone)],
                cwd=workdir, timeout=600.0)
        self._cache: Dict[Tuple[str, ...], Tuple[int, bytes, bytes]] = {}

    def run(self, arguments: Sequence[str]) -> Tuple[int, bytes, bytes]:
        key = tuple(arguments)
        if key not in self._cache:
            proc = subprocess.run(
                ["git", *arguments], cwd=self.clone, capture_output=True,
                env=oracle_env(self.home), timeout=120.0,
            )
            self._cache[key] = (proc.returncode, proc.stdout, proc.stderr)
        return self._cache[key]

    def destroy(self) -> None:
        shutil.rmtree(self.clone, ignore_errors=True)
        shutil.rmtree(self.home, ignore_errors=True)


# -- workloads -----------------------------------------------------------------------


def workload_readonly_scan(cluster: LocalCluster, *, sessions: int = 20,
                           commands_per_session: int = 5, parallelism: int = 4,
                           seed: int = 1234, verify: bool = True,
                           rate: Optional[float] = None,
                           duration: Optional[float] = None,
                           menu: Optional[Sequence[Tuple[str, ...]]] = None,
                           ) -> BenchReport:
    """Random read-only commands per session, byte-compared to the oracle."""
    repo_id = cluster.spec.repos[0].repo_id
    sessions, pace = session_budget(sessions, rate, duration)
    menu = tuple(menu) if menu is not None else READONLY_MENU
    report = BenchReport(scenario="readonly-scan", params={
        "sessions": sessions,
        "commands_per_session": commands_per_session,
        "parallelism": parallelism,
        "seed": seed,
        "repo": repo_id,
        "rate": rate,
        "duration": duration,
    })
    oracle = Oracle(cluster.fixtures[repo_id].path, cluster.root / "oracle") \
        if verify else None
    started = time.perf_counter()

    def one(i: int) -> dict:
        rng = random.Random(seed + i)
        outcome = {"latencies": [], "session_seconds": 0.0,
                   "verified": 0, "mismatches": [], "error": None}
        t0 = time.perf_counter()
        try:
            with cluster.session(repo_id) as session:
                for j in range(commands_per_session):
                    args = rng.choice(menu)
                    c0 = time.perf_counter()
                    result = session.run_args(*args, alias=f"scan{j:02d}")
                    outcome["latencies"].append(time.perf_counter() - c0)
                    if oracle is not None:
                        expect = oracle.run(args)
                        got = (result.exit_code, result.stdout, result.stderr)
                        if got == expect:
                            outcome["verified"] += 1
                        else:
                            outcome["mismatches"].append(" ".join(args))
        except (SessionRejected, OSError) as exc:
            outcome["error"] = str(exc)
        outcome["session_seconds"] = time.perf_counter() - t0
        return outcome

    for outcome in run_parallel(sessions, parallelism, one, pace_seconds=pace):
        for latency in outcome["latencies"]:
            report.add("command_seconds", latency)
        report.add("session_seconds", outcome["session_seconds"])
        report.bump("verified", outcome["verified"])
        for mismatch in outcome["mismatches"]:
            report.bump("mismatches")
            report.note(f"oracle mismatch: {mismatch}")
        if outcome["error"]:
            report.bump("session_errors")
            report.note(outcome["error"])
    if oracle is not None:
        oracle.destroy()
    report.elapsed_seconds = time.perf_counter() - started
    return report


def workload_compliance_audit(cluster: LocalCluster, *, sessions: int = 10,
                              owners_per_session: int = 5, parallelism: int = 4,
                              seed: int = 99, rate: Optional[float] = None,
                              duration: Optional[float] = None) -> BenchReport:
    """Interactive chained flow: list OWNERS files, then inspect a few.

    The follow-up commands depend on the first command's output, so this
    exercises client-side chaining inside one session.
    """
    repo_id = cluster.spec.repos[0].repo_id
    sessions, pace = session_budget(sessions, rate, duration)
    report = BenchReport(scenario="compliance-audit", params={
        "sessions": sessions,
        "owners_per_session": owners_per_session,
        "parallelism": parallelism,
        "repo": repo_id,
        "rate": rate,
        "duration": duration,
    })
    started = time.perf_counter()

    def one(i: int) -> dict:
        rng = random.Random(seed + i)
        outcome = {"session_seconds": 0.0, "owners_read": 0, "error": None,
                   "empty": 0}
        t0 = time.perf_counter()
        try:
            with cluster.session(repo_id) as session:
                listing = session.run_args("ls-files", "--", "*OWNERS", alias="list")
                paths = listing.stdout.decode().splitlines()
                rng.shuffle(paths)
                for j, path in enumerate(paths[:owners_per_session]):
                    blob = session.run_args("show", f"HEAD:{path}", alias=f"own{j:02d}")
                    if blob.exit_code == 0 and blob.stdout.strip():
                        outcome["owners_read"] += 1
                    else:
                        outcome["empty"] += 1
                    session.run_args("log", "-n", "1", "--format=%H", "--", path,
                                     alias=f"log{j:02d}")
        except (SessionRejected, OSError) as exc:
            outcome["error"] = str(exc)
        outcome["session_seconds"] = time.perf_counter() - t0
        return outcome

    for outcome in run_parallel(sessions, parallelism, one, pace_seconds=pace):
        report.add("session_seconds", outcome["session_seconds"])
        report.bump("owners_read", outcome["owners_read"])
        if outcome["empty"]:
            report.bump("empty_owners", outcome["empty"])
        if outcome["error"]:
            report.bump("session_errors")
            report.note(outcome["error"])
    report.elapsed_seconds = time.perf_counter() - started
    return report


def workload_base_change(cluster: LocalCluster, *, sessions: int = 10,
                         parallelism: int = 4, branch: str = "feature",
                         run_id: Optional[str] = None,
                         rate: Optional[float] = None,
                         duration: Optional[float] = None) -> BenchReport:
    """Chained flow with output dependence crossing commands.

    Each session computes a merge base remotely and then pushes that exact
    commit upstream as a derived ref, referencing the first command's
    stdout via ``${base.stdout}``.  Verification checks the pushed ref
    against the fixture's known fork point.
    """
    repo_id = cluster.spec.repos[0].repo_id
    fixture = cluster.fixtures[repo_id]
    expected = fixture.expected_merge_base.get(branch)
    if expected is None:
        raise ValueError(f"fixture {repo_id!r} has no branch {branch!r} with a "
                         f"known fork point")
    run_id = run_id or uuid.uuid4().hex[:8]
    sessions, pace = session_budget(sessions, rate, duration)
    report = BenchReport(scenario="base-change", params={
        "sessions": sessions,
        "parallelism": parallelism,
        "repo": repo_id,
        "branch": branch,
        "run_id": run_id,
        "rate": rate,
        "duration": duration,
    })
    started = time.perf_counter()

    def one(i: int) -> dict:
        ref = f"refs/bases/{run_id}-{i:04d}"
        script = SessionScript.from_dict({
            "repo": repo_id,
            "commands": [
                {"alias": "base",
                 "args": ["merge-base", "origin/main", f"origin/{branch}"]},
                {"alias": "push",
                 "args": ["push", "--quiet", "upstream",
                          "${base.stdout}:" + ref]},
            ],
        })
        t0 = time.perf_counter()
        run = run_script(cluster.endpoint, cluster.token, script)
        outcome = {
            "session_seconds": time.perf_counter() - t0,
            "error": run.error_code,
            "base_ok": False,
            "ref_ok": False,
        }
        if run.error_code is None and len(run.results) == 2 and run.ok:
            base = run.results[0].stdout.decode().strip()
            outcome["base_ok"] = base == expected
            landed = run_git(["rev-parse", "--verify", ref],
                             cwd=fixture.path, check=False)
            outcome["ref_ok"] = (landed.returncode == 0 and
                                 landed.stdout.decode().strip() == base)
        return outcome

    for outcome in run_parallel(sessions, parallelism, one, pace_seconds=pace):
        report.add("session_seconds", outcome["session_seconds"])
        if outcome["error"]:
            report.bump("session_errors")
            report.note(str(outcome["error"]))
        report.bump("base_verified", int(outcome["base_ok"]))
        report.bump("ref_verified", int(outcome["ref_ok"]))
    report.elapsed_seconds = time.perf_counter() - started
    return report
