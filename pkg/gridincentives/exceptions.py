import typing


class ValidationError(ValueError):
    pass


class TopologyError(ValidationError):
    pass


class DomainError(ValueError):
    pass


class NegativeDemandError(DomainError):
    pass


class NegativeDemandWarning(UserWarning):
    pass


class MeasurementError(ValueError):
    pass


class ConvergenceError(Exception):
    pass


class InfeasibleError(Exception):
    def __init__(self, message: str, violated: typing.Sequence[str] = ()):
        super().__init__(message)
        self.violated = list(violated)


class DivergenceError(Exception):
    def __init__(self, message: str, trace: typing.Sequence[typing.Any] = ()):
        super().__init__(message)
        self.trace = list(trace)


class ParseError(ValidationError):
    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line
