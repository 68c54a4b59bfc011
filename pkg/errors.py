class SolverSuiteError(Exception):
    """Base class for all errors raised by the solver suite."""


class GeometryError(SolverSuiteError):
    """Mesh geometry does not satisfy the channel/obstacle preconditions."""


class ConfigurationError(SolverSuiteError, ValueError):
    """Invalid configuration value or unknown configuration key."""

    def __init__(self, message: str, key: str = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ContractViolation(SolverSuiteError):
    """An operation was called with arguments that break its precondition."""


class FactorizationError(SolverSuiteError):
    """Sparse LU factorization hit a singular pivot."""


class SolverError(SolverSuiteError):
    """Linear solve or time loop failed; carries the step index when known."""

    def __init__(self, message: str, step: int = None):
        self.step = step
        super().__init__(f"step {step}: {message}" if step is not None else message)


class BarrierMismatchError(SolverSuiteError):
    """Result sets being compared do not share the same time barriers."""

    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing barriers: {', '.join(f'{t:g}' for t in self.missing)}")
