"""Exception types shared across the package."""


class SlipforgeError(Exception):
    """Base class for all package errors."""


class InvalidRotation(SlipforgeError):
    """Rotation input is not a valid rotation (bad norm, non-orthonormal, ...)."""


class EmptyInput(SlipforgeError):
    """An operation received an empty sequence where data is required."""


class ParamError(SlipforgeError):
    """A physical or configuration parameter is out of its valid range."""


class NumericalDivergence(SlipforgeError):
    """An integrator or training run produced non-finite state."""


class InputError(SlipforgeError):
    """Malformed runtime input (wrong shapes, too few frames, ...)."""


class ParseError(SlipforgeError):
    """A file could not be parsed; carries a location when known."""

    def __init__(self, message, line=None, offset=None):
        loc = ""
        if line is not None:
            loc = f" (line {line})"
        elif offset is not None:
            loc = f" (byte offset {offset})"
        super().__init__(message + loc)
        self.line = line
        self.offset = offset


class AlignmentError(SlipforgeError):
    """Event stream and pose-derived series do not cover the same time span."""


class InternalError(SlipforgeError):
    """An internal consistency check failed."""


class BalanceError(SlipforgeError):
    """Class balancing is impossible (one class is empty)."""


class SplitError(SlipforgeError):
    """Too few items to produce the requested split."""


class DivergedError(NumericalDivergence):
    """Training diverged; records the epoch where it happened."""

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch
        self.epoch = epoch


class EvalError(SlipforgeError):
    """Evaluation was requested on an empty dataset."""


class SpecError(SlipforgeError):
    """A sweep or dataset description is malformed."""


class IoError(SlipforgeError):
    """A filesystem operation failed (unwritable directory, missing file)."""
