"""Exception types shared across the simulator."""


class CaflError(Exception):
    """Base class for simulator errors."""


class ConfigError(CaflError, ValueError):
    """A scenario or argument failed validation."""


class InfeasibleGeometry(CaflError, ValueError):
    """Coherence geometry leaves no room for a data phase."""


class CapacityExceeded(InfeasibleGeometry):
    """The model does not fit in the available time-frequency grid."""


class NegativePilotPower(CaflError, ValueError):
    """Closed-form power split produced a non-positive pilot power."""


class DecodeSingular(CaflError, ArithmeticError):
    """Effective channel gain too small to invert."""


class PowerBudgetExceeded(CaflError, ValueError):
    """A transmitter would exceed its average power budget."""


class HistoryTooShort(CaflError, LookupError):
    """Global-model history no longer holds the requested round."""


class BoundPreconditionError(CaflError, ValueError):
    """Step size violates the convergence-bound precondition."""
