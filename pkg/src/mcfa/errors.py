"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, data and format
errors -> 2, TrainingAbort -> 3.
"""


class McfaError(Exception):
    """Base class for all package errors."""


class ShapeError(McfaError):
    """Operands have incompatible shapes; the message carries both."""


class NonFiniteError(McfaError):
    """A tensor picked up a NaN or Inf, which is an error state."""


class ConfigError(McfaError):
    """Invalid run configuration or command usage."""


class DataError(McfaError):
    """Corpus, embedding file, or split problems."""


class FormatError(McfaError):
    """Model file is not in the expected format or is corrupted."""


class TrainingAbort(McfaError):
    """Training hit an unrecoverable state (e.g. non-finite loss)."""
