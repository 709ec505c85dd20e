"""Error taxonomy. Every class maps to its own CLI exit code."""


class PondError(Exception):
    exit_code = 1


class ConfigError(PondError):
    exit_code = 2


class MissingFileError(PondError):
    exit_code = 3


class SchemaError(PondError):
    """Malformed trace / snapshot / config content."""
    exit_code = 4

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ValidationError(PondError):
    exit_code = 5


class CapacityError(PondError):
    exit_code = 6


class OwnershipError(PondError):
    exit_code = 7


class SliceRangeError(PondError):
    exit_code = 8


class ModelStateError(PondError):
    exit_code = 9


class CalibrationError(PondError):
    exit_code = 10


class SimStateError(PondError):
    exit_code = 11


def error_line(err):
    """One machine-parseable line for stderr."""
    msg = str(err).replace('"', "'")
    return f'error={type(err).__name__} code={getattr(err, "exit_code", 1)} message="{msg}"'
