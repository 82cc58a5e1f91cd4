"""Exceptions shared across the pipeline. CLI exit codes map onto these."""


class ConfigError(ValueError):
    """Invalid or unsupported configuration (exit code 2)."""


class LifecycleError(RuntimeError):
    """An operation was invoked before its prerequisite phase ran."""


class LedgerViolation(AssertionError):
    """A parameter outside the phase's permitted set changed (exit code 4)."""


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = -1):
        super().__init__(message if offset < 0 else f"{message} (at byte {offset})")
        self.offset = offset
