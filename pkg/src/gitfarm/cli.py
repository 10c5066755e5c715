"""`gitfarm` command-line client.

Two subcommands mirror the two ways people use the service:

* ``gitfarm exec`` — run one command in a throwaway session and behave
  like a local tool (stdout/stderr pass through, exit code table below);
* ``gitfarm script`` — run a JSON-described command list in one session.

Exit codes: 0 success, 2 invalid usage or validation failure, 3 not
authenticated, 4 permission denied, 5 no capacity, 6 session-fatal error
(unavailable, deadline, internal), 7 the remote command itself failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

from . import client as client_mod
from .errors import (
    EXIT_COMMAND_FAILED,
    EXIT_OK,
    EXIT_SESSION_FATAL,
    EXIT_VALIDATION,
    ErrorCode,
    exit_code_for,
)


def _add_connection_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--endpoint", default=os.environ.get("GITFARM_ENDPOINT"),
                        help="gateway host:port (or $GITFARM_ENDPOINT)")
    parser.add_argument("--token", default=os.environ.get("GITFARM_TOKEN"),
                        help="bearer token (or $GITFARM_TOKEN)")
    parser.add_argument("--timeout", type=float, default=300.0,
                        help="overall wait for any single reply (seconds)")
    parser.add_argument("--json", action="store_true", dest="as_json",
                        help="print a machine-readable JSON report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gitfarm",
        description="Run git commands remotely on pre-warmed repository checkouts.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_exec = sub.add_parser("exec", help="run one command in a fresh session")
    _add_connection_flags(p_exec)
    p_exec.add_argument("--repo", required=True, help="repository id")
    p_exec.add_argument("--stdin-file", help="file whose bytes feed the command's stdin")
    p_exec.add_argument("--env", action="append", default=[], metavar="KEY=VALUE",
                        help="extra environment for the command (repeatable)")
    p_exec.add_argument("argv", nargs=argparse.REMAINDER,
                        help="command to run, e.g. -- git status --short")

    p_script = sub.add_parser("script", help="run a JSON command script in one session")
    _add_connection_flags(p_script)
    p_script.add_argument("file", help="script JSON path")
    p_script.add_argument("--keep-going", action="store_true",
                          help="continue past non-zero exit codes")
    return parser


def _require_connection(args: argparse.Namespace) -> Optional[str]:
    if not args.endpoint:
        return "no endpoint: pass --endpoint or set GITFARM_ENDPOINT"
    if not args.token:
        return "no token: pass --token or set GITFARM_TOKEN"
    return None


def _parse_env(pairs: List[str]) -> dict:
    env = {}
    for pair in pairs:
        key, eq, value = pair.partition("=")
        if not eq or not key:
            raise ValueError(f"--env expects KEY=VALUE, got {pair!r}")
        env[key] = value
    return env


def _cmd_exec(args: argparse.Namespace) -> int:
    problem = _require_connection(args)
    if problem:
        print(f"gitfarm: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    argv = list(args.argv)
    if argv and argv[0] == "--":
        argv = argv[1:]
    if not argv:
        print("gitfarm: nothing to run; pass a command after --", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        env = _parse_env(args.env)
    except ValueError as exc:
        print(f"gitfarm: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    stdin = None
    if args.stdin_file:
        try:
            with open(args.stdin_file, "rb") as fh:
                stdin = fh.read()
        except OSError as exc:
            print(f"gitfarm: cannot read stdin file: {exc}", file=sys.stderr)
            return EXIT_VALIDATION

    try:
        result = client_mod.exec_once(
            args.endpoint, args.token, args.repo, argv,
            stdin=stdin, environment=env, timeout=args.timeout,
        )
    except client_mod.SessionRejected as exc:
        return _report_rejection(exc, args.as_json)
    except (client_mod.SessionClosed, OSError, ValueError) as exc:
        return _report_transport(exc, args.as_json)

    if args.as_json:
        print(json.dumps({
            "alias": result.alias,
            "exit_code": result.exit_code,
            "stdout": result.stdout.decode("utf-8", "replace"),
            "stderr": result.stderr.decode("utf-8", "replace"),
            "truncated": result.truncated,
        }, indent=2, sort_keys=True))
    else:
        sys.stdout.buffer.write(result.stdout)
        sys.stdout.buffer.flush()
        sys.stderr.buffer.write(result.stderr)
        sys.stderr.buffer.flush()
    return EXIT_OK if result.exit_code == 0 else EXIT_COMMAND_FAILED


def _cmd_script(args: argparse.Namespace) -> int:
    problem = _require_connection(args)
    if problem:
        print(f"gitfarm: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        script = client_mod.SessionScript.from_file(args.file)
    except (OSError, ValueError) as exc:
        print(f"gitfarm: bad script: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    report = client_mod.run_script(
        args.endpoint, args.token, script,
        timeout=args.timeout, stop_on_failure=not args.keep_going,
    )
    if args.as_json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        for result in report.results:
            marker = "ok" if result.exit_code == 0 else f"exit {result.exit_code}"
            print(f"[{result.alias}] {marker}")
            text = result.stdout.decode("utf-8", "replace")
            if text:
                print(text.rstrip("\n"))
            errtext = result.stderr.decode("utf-8", "replace")
            if errtext and result.exit_code != 0:
                print(errtext.rstrip("\n"), file=sys.stderr)
        if report.error_code:
            print(f"gitfarm: session error {report.error_code}: "
                  f"{report.error_message}", file=sys.stderr)

    if report.error_code:
        return exit_code_for(report.error_code)
    if any(r.exit_code != 0 for r in report.results):
        return EXIT_COMMAND_FAILED
    return EXIT_OK


def _report_rejection(exc: "client_mod.SessionRejected", as_json: bool) -> int:
    if as_json:
        print(json.dumps({"error_code": exc.code, "error_message": exc.message},
                         indent=2, sort_keys=True))
    else:
        print(f"gitfarm: {exc.code}: {exc.message}", file=sys.stderr)
    return exc.exit_code


def _report_transport(exc: Exception, as_json: bool) -> int:
    if as_json:
        print(json.dumps({"error_code": ErrorCode.UNAVAILABLE,
                          "error_message": str(exc)}, indent=2, sort_keys=True))
    else:
        print(f"gitfarm: connection failed: {exc}", file=sys.stderr)
    return EXIT_SESSION_FATAL


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.subcommand == "exec":
        return _cmd_exec(args)
    if args.subcommand == "script":
        return _cmd_script(args)
    raise AssertionError("unreachable")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
