class ReentraError(Exception):
    """Base class for all errors raised by this package."""


class DataError(ReentraError):
    """Input data is malformed or unusable."""


class ManifestParseError(DataError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"manifest line {line_no}: {reason}")
        self.line_no = line_no


class ValidationError(DataError):
    pass


class IngestionError(DataError):
    def __init__(self, path, reason: str = "unreadable"):
        super().__init__(f"cannot ingest {path}: {reason}")
        self.path = path


class LexError(DataError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = ""
        if line is not None:
            where = f" at line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(message + where)
        self.line = line
        self.column = column


class ContractViolation(ReentraError, ValueError):
    """Shapes or dimensions disagree with what an operation requires."""
