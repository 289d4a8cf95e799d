"""Exception hierarchy shared by every module."""


class VmuError(Exception):
    """Base class for all package errors."""


class ShapeError(VmuError, ValueError):
    """Array dimensions disagree with what an operation requires."""


class NumericError(VmuError, ArithmeticError):
    """A value is non-finite or otherwise numerically invalid."""


class DataError(VmuError):
    """Missing or malformed data on disk."""


class FormatError(DataError):
    """Base for binary file format violations."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass
