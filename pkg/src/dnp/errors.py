"""Exception hierarchy shared across the package.

Two broad families matter for the CLI exit codes: configuration/validation
problems (exit 1) and runtime/data problems (exit 2).
"""


class DnpError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DnpError):
    """Invalid configuration: bad k, missing labels, incompatible flags."""


class FormatError(DnpError):
    """Malformed tensor file or dataset layout."""


class DtypeError(FormatError):
    """Tensor file with an unsupported dtype."""


class ValidationError(DnpError):
    """Data violates a type invariant (non-finite values, bad label range)."""


class ShapeError(DnpError):
    """Incompatible array shapes between inputs."""


class DomainError(DnpError):
    """Input outside a function's mathematical domain (e.g. zero-norm cosine)."""


class DataError(DnpError):
    """Runtime data problem: empty dataset, empty pool, failed samples."""


class DegenerateFitError(DataError):
    """Normalization extrema collapsed (max == min, or non-positive max)."""


class UndefinedMetricError(DataError):
    """A metric was requested on single-class input."""
