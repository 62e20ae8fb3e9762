class ElasticDtnError(Exception):
    """Base class for toolkit errors."""


class ConfigurationError(ElasticDtnError):
    pass


class DomainError(ElasticDtnError, ValueError):
    pass


class DimensionError(ElasticDtnError, ValueError):
    pass


class GeometryError(ElasticDtnError):
    pass


class MeshParseError(ElasticDtnError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class MeshValidationError(ElasticDtnError):
    pass


class FrequencyRangeError(ElasticDtnError):
    pass


class SolverError(ElasticDtnError):
    """Raised when an iterative method fails; carries the residual history."""

    def __init__(self, msg: str, history=None):
        self.history = list(history or [])
        super().__init__(msg)


class StagnationError(ElasticDtnError):
    def __init__(self, msg: str, trace=None):
        self.trace = trace
        super().__init__(msg)


class ResolutionError(ElasticDtnError):
    pass
