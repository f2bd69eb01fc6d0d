"""Exception types shared across the package."""


class PaleoError(Exception):
    """Base class for all package errors."""


class DomainError(PaleoError, ValueError):
    """An argument lies outside the domain of a function."""


class InfeasibleParameterizationError(PaleoError, ValueError):
    """No distribution parameters reproduce the requested mode and std."""


class ConfigurationError(PaleoError, ValueError):
    pass


class ContractError(PaleoError, ValueError):
    """Inputs with mismatched dimensions or otherwise broken preconditions."""


class DataFormatError(PaleoError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, site_id: str | None = None):
        super().__init__(message)
        self.line = line
        self.site_id = site_id


class NonFiniteGradientError(PaleoError, FloatingPointError):
    def __init__(self, index: int, message: str = ""):
        super().__init__(message or f"non-finite gradient for latent index {index}")
        self.index = index


class DivergenceError(PaleoError, RuntimeError):
    """The optimizer produced non-finite objectives for too long."""

    def __init__(self, message: str, iteration: int, diagnostics: dict | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.diagnostics = diagnostics or {}
