"""Exception types raised across the package.

The CLI prints ``ERROR <ClassName>: <message>`` on a single line for any of
these, so the class name is part of the public surface.
"""


class IenError(Exception):
    """Base class for all package errors."""


class ShapeError(IenError, ValueError):
    """An array did not have the expected shape."""


class NumericError(IenError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class UsageError(IenError, ValueError):
    """An API or CLI was called with invalid arguments."""


class ConfigError(IenError, ValueError):
    """Model, file, and run configuration disagree."""


class FormatError(IenError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
