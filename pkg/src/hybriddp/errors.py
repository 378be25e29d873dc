"""Exception hierarchy shared by all modules."""


class HybridDPError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(HybridDPError, ValueError):
    pass


class SchemaError(ConfigurationError):
    pass


class DomainError(HybridDPError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeError(HybridDPError, ValueError):
    pass


class NumericError(HybridDPError, ArithmeticError):
    """A non-finite value appeared during a forward or backward pass."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


class CalibrationError(HybridDPError, RuntimeError):
    def __init__(self, message: str, eps_at_lo: float, eps_at_hi: float):
        super().__init__(f"{message}; eps(sigma_lo)={eps_at_lo!r}, eps(sigma_hi)={eps_at_hi!r}")
        self.eps_at_lo = eps_at_lo
        self.eps_at_hi = eps_at_hi


class UndefinedMetricError(HybridDPError, ValueError):
    pass
