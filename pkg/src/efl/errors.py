"""Exception hierarchy shared by every stage.

Each class carries the CLI exit code it maps to.
"""


class EflError(Exception):
    exit_code = 1


class ConfigError(EflError, ValueError):
    """Invalid parameters or configuration file."""

    exit_code = 2


class ShapeError(EflError, ValueError):
    exit_code = 3


class DegenerateInputError(EflError, ValueError):
    """Input carries no usable signal (all zeros, zero energy, ...)."""

    exit_code = 3


class InsufficientDataError(EflError, ValueError):
    exit_code = 3


class UndefinedAnchorError(EflError, ValueError):
    """A contrastive batch in which no anchor has a positive."""

    exit_code = 3


class NumericError(EflError, ArithmeticError):
    exit_code = 4


class StageError(EflError):
    """Wraps a failure inside an experiment stage, tagging the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", None) or _fallback_code(cause)


def _fallback_code(cause) -> int:
    if isinstance(cause, ArithmeticError):
        return NumericError.exit_code
    if isinstance(cause, (OSError, KeyError)):
        return InsufficientDataError.exit_code
    return 1
