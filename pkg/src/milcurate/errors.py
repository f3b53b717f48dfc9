"""Exception hierarchy shared by every stage."""


class CurationError(Exception):
    """Base class for all errors raised by milcurate."""


class ValidationError(CurationError):
    """Input data violates a structural invariant."""

    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)


class ConfigError(CurationError, ValueError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(CurationError):
    pass


class StateError(CurationError):
    pass


class CardinalityError(CurationError, ValueError):
    pass


class DomainError(CurationError, ValueError):
    pass


class NumericError(CurationError, ValueError):
    pass


class DegenerateDataError(CurationError, ValueError):
    pass


class UndefinedDistanceError(CurationError, ValueError):
    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class EnumerationTooLarge(CurationError):
    pass


class ConvergenceError(CurationError):
    pass


class QuotaError(CurationError, ValueError):
    pass


class CalibrationError(CurationError):
    pass
