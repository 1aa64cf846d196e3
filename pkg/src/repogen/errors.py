"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class RepogenError(Exception):
    """Base class for every error raised by this package."""


# doc_index
class UnsupportedFormat(RepogenError):
    pass


class EmptyInput(RepogenError):
    pass


# gateway
class GatewayError(RepogenError):
    pass


class ReplayMismatch(GatewayError):
    def __init__(self, position: int, expected: str | None, got: str):
        self.position = position
        self.expected = expected
        self.got = got
        if expected is None:
            msg = f"replay transcript exhausted at position {position} (request digest {got[:12]})"
        else:
            msg = (
                f"replay digest mismatch at position {position}: "
                f"expected {expected[:12]}, got {got[:12]}"
            )
        super().__init__(msg)


class ProviderError(GatewayError):
    pass


class BudgetExceeded(RepogenError):
    pass


class ConcurrentReplay(GatewayError):
    pass


# structured replies
class SchemaParseError(RepogenError):
    def __init__(self, message: str, errors: list[str] | None = None):
        super().__init__(message)
        self.errors = errors or []


class BlueprintValidationError(RepogenError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("blueprint invalid:\n  " + "\n  ".join(self.violations))


# codemem
class EmptyGeneration(RepogenError):
    pass


class DuplicateFile(RepogenError):
    pass


class CyclicDependency(RepogenError):
    def __init__(self, remaining: list[str]):
        self.remaining = list(remaining)
        super().__init__(f"no eligible file; cycle among: {', '.join(self.remaining)}")


# coderag
class EmptyRepo(RepogenError):
    pass


class NoTuple(RepogenError):
    pass


class RagIndexError(RepogenError):
    pass


# verifier / sandbox
class RangeOutOfBounds(RepogenError):
    pass


class OverlappingEdits(RepogenError):
    pass


class SetupFailed(RepogenError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class SandboxUnavailable(RepogenError):
    pass


class SandboxViolation(RepogenError):
    pass


# orchestrator
class ConfigError(RepogenError):
    pass


class DigestMismatch(RepogenError):
    pass


class WorkspaceLocked(RepogenError):
    pass


class PhaseError(RepogenError):
    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        self.cause = cause
        super().__init__(f"phase {phase!r} failed: {cause}")
