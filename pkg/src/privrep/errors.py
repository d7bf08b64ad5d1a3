"""Exception hierarchy. Each class maps onto a CLI exit code."""


class PrivrepError(Exception):
    exit_code = 1


class SchemaError(PrivrepError):
    """Malformed input file, missing field, or dimension mismatch in a file."""

    exit_code = 2


class ParseError(SchemaError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ParameterError(PrivrepError, ValueError):
    """Invalid privacy or configuration parameter."""

    exit_code = 3


class DimensionError(PrivrepError, ValueError):
    exit_code = 2


class DomainError(PrivrepError, ValueError):
    """Input outside an operation's domain (NaN, label out of range, ...)."""

    exit_code = 3


class SensitivityError(DomainError):
    """A coordinate fed to the Laplace mechanism lies outside [0, 1]."""


class DegenerateTaskError(ParameterError):
    pass


class DivergenceError(PrivrepError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, epoch=None, batch=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
