"""Exception hierarchy.

Every error raised by this package derives from RepsfError. The CLI maps
subtrees onto its exit-code contract: validation-type errors exit 1,
FormatError exits 2, numeric/convergence failures exit 3.
"""


class RepsfError(Exception):
    """Base class for all package errors."""


class ValidationError(RepsfError):
    """Invalid user-supplied value (bad annotation, bad flag, bad input)."""


class ConfigError(ValidationError):
    """Invalid configuration; the message names the offending field."""


class ShapeError(ValidationError):
    """Array shape or dtype inconsistent with the operation's contract."""


class GeometryError(ValidationError):
    """Convolution/pooling geometry produces an empty or invalid output."""


class ParityError(ValidationError):
    """Kernel parity violation (an even kernel has no center)."""


class StructureError(ValidationError):
    """Structurally invalid block (e.g. identity branch under stride)."""


class DegenerateInputError(ValidationError):
    """Input is degenerate for the requested computation (e.g. zero mass)."""


class UnsupportedInstanceError(ValidationError):
    """Instance falls outside the supported problem class."""


class StateError(RepsfError):
    """Operation requires state that has not been populated."""


class NumericError(RepsfError):
    """Numeric failure (non-finite intermediate, invalid variance, ...)."""


class ConvergenceError(NumericError):
    """Iterative solver failed to reach its tolerance."""


class FormatError(RepsfError):
    """Malformed serialized data.

    `offset` is the byte offset at which the problem was detected, or None
    when it cannot be localized (e.g. a manifest-level inconsistency).
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
