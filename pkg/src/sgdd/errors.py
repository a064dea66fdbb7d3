"""Exception types shared across the package."""


class SgddError(Exception):
    """Base class for every error raised by this package."""

    category = "error"


class InputError(SgddError, ValueError):
    """Invalid arguments, shapes, or indices."""

    category = "input"


class ParseError(InputError):
    """Malformed file or configuration content."""

    category = "parse"


class NumericalError(SgddError, ArithmeticError):
    """Singular matrices, non-PSD inputs, non-finite losses."""

    category = "numerical"
