"""Exception types shared across the package.

Every error carries a ``code`` so the CLI can map it to an exit status and so
malformed-file errors stay distinguishable from one another.
"""


class MvlError(Exception):
    code = "error"


class InvalidArgument(MvlError, ValueError):
    code = "invalid-argument"


class ViewMismatch(InvalidArgument):
    code = "view-mismatch"


class NumericFailure(MvlError, ArithmeticError):
    """A non-finite value appeared somewhere it must not."""

    code = "numeric-failure"

    def __init__(self, where, timestep=None, detail=""):
        self.where = where
        self.timestep = timestep
        msg = f"non-finite values in {where}"
        if timestep is not None:
            msg += f" at timestep {timestep}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DataError(MvlError):
    code = "data-error"


class FormatError(DataError):
    """Base class for malformed binary files."""

    code = "format-error"


class BadMagic(FormatError):
    code = "bad-magic"

    def __init__(self, path, expected, found, offset=0):
        self.offset = offset
        super().__init__(
            f"{path}: bad magic at offset {offset}: expected {expected!r}, found {found!r}"
        )


class VersionMismatch(FormatError):
    code = "version-mismatch"

    def __init__(self, path, expected, found, offset=4):
        self.offset = offset
        super().__init__(
            f"{path}: unsupported version {found} at offset {offset} (expected {expected})"
        )


class TruncatedFile(FormatError):
    code = "truncated"

    def __init__(self, path, expected, actual, what="file"):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{path}: truncated {what}: expected {expected} bytes, got {actual}"
        )


class InvalidView(FormatError):
    code = "invalid-view"

    def __init__(self, path, angle):
        self.angle = angle
        super().__init__(f"{path}: invalid view angle {angle} (must be one of 0, 30, 45, 60, 90)")
