"""Exception hierarchy shared across the package."""


class GraphSamplingError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GraphSamplingError, ValueError):
    """An invalid configuration value."""


class ValidationError(GraphSamplingError, ValueError):
    """Input data violates a documented invariant."""


class ParseError(ValidationError):
    """A malformed line in a text file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class TrainingAborted(GraphSamplingError, RuntimeError):
    """Training hit a non-finite loss or gradient.

    ``state`` holds whatever diagnostic context the caller collected
    (epoch, iteration, batch indices, parameter norms).
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = dict(state or {})
