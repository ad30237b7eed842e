"""Exception types shared across the package."""


class DemagoptError(Exception):
    """Base class for all package errors."""


class ConfigError(DemagoptError):
    """Invalid or unknown configuration input."""


class GeometryError(DemagoptError):
    """Degenerate or inconsistent geometry parameters."""


class MeshFormatError(DemagoptError):
    """Malformed mesh/design/table file.

    Carries the 1-based line number when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MeshValidationError(DemagoptError):
    """Structurally invalid mesh (non-conforming, negative areas, ...)."""


class SolverError(DemagoptError):
    """Linear or Newton solver failure; carries the residual history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class TabulationError(DemagoptError):
    """Topological-derivative table build or load failure."""


class OptimizationStalled(DemagoptError):
    """Line search could not make progress at the step floor."""

    def __init__(self, message, design=None, log_rows=None):
        super().__init__(message)
        self.design = design
        self.log_rows = log_rows or []
