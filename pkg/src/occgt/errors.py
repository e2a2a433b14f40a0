"""Exception hierarchy shared by all modules.

The CLI maps ``ValidationError`` to exit code 1 and ``FormatError`` /
``OSError`` to exit code 2.
"""


class OccgtError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(OccgtError, ValueError):
    """Bad parameter values or violated data invariants."""


class FormatError(OccgtError):
    """A file on disk does not match its binary or JSON layout."""


class IndexFormatError(FormatError):
    """Frame index JSON that cannot be parsed or has wrongly typed fields."""


class TruncatedCloudError(FormatError):
    """Point-cloud file whose size is not a whole number of records."""

    def __init__(self, path, expected: int, actual: int):
        super().__init__(
            f"{path}: size {actual} bytes is not a multiple of the record size; "
            f"expected {expected} bytes for the whole records present"
        )
        self.expected = expected
        self.actual = actual


class OccgError(FormatError):
    """Base class for OCCG container errors."""


class BadMagicError(OccgError):
    pass


class VersionMismatchError(OccgError):
    pass


class PayloadLengthError(OccgError):
    def __init__(self, message: str, expected: int, actual: int):
        super().__init__(f"{message} (expected {expected} bytes, got {actual})")
        self.expected = expected
        self.actual = actual


class DivergenceError(OccgtError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss
