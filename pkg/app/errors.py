"""Exception hierarchy of the package."""

from typing import Optional


class RdtError(Exception):
    """Base class for every error raised by this package."""


class ParameterDomainError(RdtError, ValueError):
    """An argument lies outside its legal domain (width < 2, scale <= 0, ...)."""


class DimensionMismatchError(RdtError, ValueError):
    """Vector lengths disagree with the model or with each other."""


class InvalidPathError(RdtError, ValueError):
    """A trajectory is not a root-to-leaf path of the topology."""


class TreeTooLargeError(RdtError):
    """Exact enumeration was requested on a tree above the leaf guard."""


class DivergenceError(RdtError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message: str, epoch: Optional[int] = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class MalformedFileError(RdtError):
    """A model, dataset or config file does not follow its format."""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        field: Optional[str] = None,
        line: Optional[int] = None,
    ):
        self.path = path
        self.field = field
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
