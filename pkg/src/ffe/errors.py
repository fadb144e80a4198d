"""Exception types shared across the package."""


class FFEError(Exception):
    """Base class for all errors raised by this package."""


class InvalidFrameError(FFEError):
    """A particle frame violates its invariants (empty, wrong shape, non-finite)."""


class ShapeError(FFEError):
    """Array shapes are inconsistent with the operation's contract."""


class GradientError(FFEError):
    """Backward pass or gradient check invoked on invalid inputs."""


class NumericalError(FFEError):
    """A computation produced non-finite values.

    ``context`` carries where it happened (e.g. solver iteration).
    """

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


class ConfigError(FFEError):
    """A configuration value violates its declared range."""


class FileFormatError(FFEError):
    """A data file is malformed. Carries the path and, when known, the line
    number (text) or byte offset (binary) of the problem."""

    def __init__(self, message, path=None, line=None, offset=None):
        parts = [message]
        if path is not None:
            parts.append(f"path={path}")
        if line is not None:
            parts.append(f"line={line}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" | ".join(str(p) for p in parts))
        self.path = path
        self.line = line
        self.offset = offset


class TrainingDivergedError(FFEError):
    """Training loss became non-finite or exploded."""

    def __init__(self, message, epoch=None, sample=None, loss=None):
        super().__init__(message)
        self.epoch = epoch
        self.sample = sample
        self.loss = loss
