"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class VlmDriveError(Exception):
    exit_code = 1


class UsageError(VlmDriveError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class ShapeError(VlmDriveError, ValueError):
    exit_code = 3


class DataError(VlmDriveError, ValueError):
    exit_code = 3


class FormatError(VlmDriveError):
    exit_code = 4

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class TransportError(VlmDriveError):
    exit_code = 5

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class EnrichmentError(TransportError):
    pass


class ParseError(VlmDriveError):
    exit_code = 3

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw
