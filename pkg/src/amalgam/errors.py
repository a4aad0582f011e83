"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage errors exit 2,
data/format errors exit 3, training divergence exits 4.
"""


class AmalgamError(Exception):
    """Base class for all package errors."""


class DimensionError(AmalgamError):
    """Tensor or layer shapes are incompatible."""


class UsageError(AmalgamError):
    """An operation was invoked in a way its contract forbids."""


class DataError(AmalgamError):
    """Input values violate a data precondition (bad labels, empty mask, NaN)."""


class ConfigurationError(AmalgamError):
    """Inconsistent run configuration or structurally mismatched networks."""


class FormatError(AmalgamError):
    """A serialized file is malformed, truncated, or fails its checksum."""


class TrainingDivergence(AmalgamError):
    """Training produced a non-finite loss; carries a partial report when available."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
