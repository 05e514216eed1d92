"""
Exception hierarchy shared by the library, the CLI and the HTTP API.
"""


class FlowError(Exception):
    """Base class for every error raised by the package."""
    exit_code = 1


class UsageError(FlowError):
    """Invalid arguments or call sequence."""
    exit_code = 1


class DimensionError(UsageError):
    """Shapes do not conform."""


class DomainError(FlowError):
    """Input outside the domain of a primitive (e.g. log of a non-positive value)."""
    exit_code = 2


class NonFiniteError(FlowError):
    """A NaN or Inf appeared in a computation."""
    exit_code = 2

    def __init__(self, message: str, op: str = None, step: int = None):
        super().__init__(message)
        self.op = op
        self.step = step


class ArtifactError(FlowError):
    """Reading or writing an artifact failed."""
    exit_code = 3


class CheckpointError(ArtifactError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointNotFoundError(CheckpointError):
    pass
