"""Exception taxonomy shared by all pilotlet subsystems.

Every error carries a stable ``code`` string so CLI output and store records
can name failures without depending on Python class identity.
"""

from __future__ import annotations


class PilotletError(Exception):
    """Base class for all domain errors."""

    code = "ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class ValidationError(PilotletError):
    """One or more invariants violated; collects every violation, not just the first."""

    code = "VALIDATION"

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class IllegalTransition(PilotletError):
    code = "ILLEGAL_TRANSITION"

    def __init__(self, current, new, detail: str = ""):
        self.current = current
        self.new = new
        msg = f"{current} -> {new}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DuplicateId(PilotletError):
    code = "DUPLICATE_ID"


class UnknownPilot(PilotletError):
    code = "UNKNOWN_PILOT"


class UnknownUnit(PilotletError):
    code = "UNKNOWN_UNIT"


class SubmitFailed(PilotletError):
    code = "SUBMIT_FAILED"


class UnknownJob(PilotletError):
    code = "UNKNOWN_JOB"


class AlreadyTerminal(PilotletError):
    code = "ALREADY_TERMINAL"


class NoActivePilot(PilotletError):
    code = "NO_ACTIVE_PILOT"


class WaitTimeout(PilotletError):
    """Raised by blocking waits; carries the partial state map observed so far."""

    code = "TIMEOUT"

    def __init__(self, states, message: str = "wait timed out"):
        self.states = dict(states)
        super().__init__(message)


class MissingEnv(PilotletError):
    code = "MISSING_ENV"


class MalformedNodefile(PilotletError):
    code = "MALFORMED_NODEFILE"


class BootFailed(PilotletError):
    code = "BOOT_FAILED"


class ConnectFailed(PilotletError):
    code = "CONNECT_FAILED"


class NeverFits(PilotletError):
    code = "NEVER_FITS"


class MetricsUnavailable(PilotletError):
    code = "METRICS_UNAVAILABLE"


class SpawnFailed(PilotletError):
    code = "SPAWN_FAILED"


class StagingFailed(PilotletError):
    code = "STAGING_FAILED"


class IoFailed(PilotletError):
    code = "IO_FAILED"


class Unreachable(PilotletError):
    code = "UNREACHABLE"


class ImpossibleRequest(PilotletError):
    code = "IMPOSSIBLE_REQUEST"


class UnknownApp(PilotletError):
    code = "UNKNOWN_APP"


class ShapeMismatch(PilotletError):
    code = "SHAPE_MISMATCH"


class MalformedInput(PilotletError):
    code = "MALFORMED_INPUT"
