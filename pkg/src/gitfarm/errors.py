"""Error codes shared across the wire protocol, gateway, backend and client."""
from __future__ import annotations


class ErrorCode:
    """Session error codes carried in SessionError.code."""

    INVALID_ARGUMENT = "INVALID_ARGUMENT"
    UNAUTHENTICATED = "UNAUTHENTICATED"
    PERMISSION_DENIED = "PERMISSION_DENIED"
    RESOURCE_EXHAUSTED = "RESOURCE_EXHAUSTED"
    UNAVAILABLE = "UNAVAILABLE"
    DEADLINE_EXCEEDED = "DEADLINE_EXCEEDED"
    INTERNAL = "INTERNAL"

    ALL = frozenset({
        INVALID_ARGUMENT,
        UNAUTHENTICATED,
        PERMISSION_DENIED,
        RESOURCE_EXHAUSTED,
        UNAVAILABLE,
        DEADLINE_EXCEEDED,
        INTERNAL,
    })


# Process exit codes used by the `gitfarm` CLI. Fixed contract:
# 0 ok, 2 validation, 3 unauthenticated, 4 denied, 5 capacity,
# 6 session fatal, 7 command failure.
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_UNAUTHENTICATED = 3
EXIT_DENIED = 4
EXIT_CAPACITY = 5
EXIT_SESSION_FATAL = 6
EXIT_COMMAND_FAILED = 7

_CODE_TO_EXIT = {
    ErrorCode.INVALID_ARGUMENT: EXIT_VALIDATION,
    ErrorCode.UNAUTHENTICATED: EXIT_UNAUTHENTICATED,
    ErrorCode.PERMISSION_DENIED: EXIT_DENIED,
    ErrorCode.RESOURCE_EXHAUSTED: EXIT_CAPACITY,
    ErrorCode.UNAVAILABLE: EXIT_SESSION_FATAL,
    ErrorCode.DEADLINE_EXCEEDED: EXIT_SESSION_FATAL,
    ErrorCode.INTERNAL: EXIT_SESSION_FATAL,
}


def exit_code_for(error_code: str) -> int:
    return _CODE_TO_EXIT.get(error_code, EXIT_SESSION_FATAL)


class GitFarmError(Exception):
    """Base class for all gitfarm errors."""


class ProtocolError(GitFarmError):
    """Malformed or out-of-contract wire traffic."""


class EncodeError(ProtocolError):
    pass


class DecodeError(ProtocolError):
    pass


class CommandViolation(GitFarmError):
    """A Command failed validation; carries the first failing rule."""

    def __init__(self, rule: str):
        super().__init__(rule)
        self.rule = rule


class SessionFatal(GitFarmError):
    """Terminal session error observed by a client."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


class NoCapacityError(GitFarmError):
    """Every eligible node is out of free checkouts or sandboxes."""


class UnknownNodeError(GitFarmError):
    """Status update from a node that is not in the cluster config."""


class StoreUnavailableError(GitFarmError):
    """The availability registry could not be reached."""
