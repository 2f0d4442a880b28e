"""Exception types shared across the library.

The CLI maps these onto exit codes: configuration/validation problems
exit 1, numeric failures (non-finite values) exit 2, partial per-image
failures exit 3.
"""


class DenseCountError(Exception):
    """Base class for all library errors."""


class ShapeError(DenseCountError):
    """Tensor extents are invalid or incompatible for an operation."""


class ConfigError(DenseCountError):
    """A configuration object violates its invariants."""


class ContractError(DenseCountError):
    """An operation was called outside its documented contract."""


class AnnotationError(DenseCountError):
    """An annotation record is malformed or out of image bounds."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"annotation {index}: {message}"
        super().__init__(message)
        self.index = index


class NumericError(DenseCountError):
    """A computation produced non-finite values."""
