"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and format
problems exit 2, numeric failures exit 3.
"""


class LesionCamError(Exception):
    exit_code = 2


class UsageError(LesionCamError, RuntimeError):
    exit_code = 1


class ShapeError(LesionCamError, ValueError):
    """Array shapes are incompatible with an op."""


class ConfigError(LesionCamError, ValueError):
    """A configuration violates one of its invariants."""


class FormatError(LesionCamError, ValueError):
    """A file is malformed, truncated, or of an unsupported kind."""


class DegenerateInputError(LesionCamError, ValueError):
    pass


class EmptyRegionError(LesionCamError, ValueError):
    pass


class UndefinedMetricError(LesionCamError, ValueError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""


class NumericError(LesionCamError, ArithmeticError):
    exit_code = 3


class ValidationError(LesionCamError, ValueError):
    """Input data violates a domain rule (e.g. a label row with two classes)."""
