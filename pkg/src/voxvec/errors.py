"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/validation errors -> 2,
data/IO errors -> 3, numeric divergence -> 4.
"""


class VoxvecError(Exception):
    """Base class for package errors."""


class InvalidArgumentError(VoxvecError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(VoxvecError, ValueError):
    """Input is structurally valid but degenerate (e.g. a silent stem)."""


class NotFoundError(VoxvecError, LookupError):
    """A referenced recording, speaker, or file does not exist."""


class ManifestError(VoxvecError, ValueError):
    """Manifest parse or schema violation; carries the offending field."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message if field is None else f"{message} (field: {field})")


class StageError(VoxvecError, ValueError):
    """A checkpoint of the wrong training stage was supplied."""


class DivergenceError(VoxvecError, RuntimeError):
    """Training diverged (NaN loss or non-decreasing smoothed loss).

    ``last_good`` holds the path of the most recent finite checkpoint,
    when one was written.
    """

    def __init__(self, message: str, last_good=None):
        self.last_good = last_good
        super().__init__(message)
