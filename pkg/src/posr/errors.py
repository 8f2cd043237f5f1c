"""Exception hierarchy shared across the package."""


class PosrError(Exception):
    """Base class for all package errors."""


class ShapeError(PosrError, ValueError):
    pass


class DomainError(PosrError, ValueError):
    pass


class LabelError(PosrError, ValueError):
    pass


class ConfigError(PosrError, ValueError):
    pass


class UnsupportedConfigurationError(ConfigError):
    pass


class NonScalarLossError(PosrError, ValueError):
    pass


class NonDeterministicLossError(PosrError, RuntimeError):
    pass


class DivergenceError(PosrError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class FileFormatError(PosrError, ValueError):
    pass


class BadMagicError(FileFormatError):
    pass


class UnsupportedVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class MetricsParseError(PosrError, ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(where + message)
        self.path = path
        self.line = line
