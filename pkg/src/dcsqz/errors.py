"""Exception types raised across the package."""


class DcsqzError(Exception):
    """Base class for package errors."""


class DegenerateStateError(DcsqzError, ValueError):
    """Mean field is zero, so its phase is undefined."""


class SqueezeDomainError(DcsqzError, ValueError):
    """Kerr squeezing angle requested outside the arccos domain."""


class ExtremaTieError(DcsqzError, ValueError):
    """Variance trace has a plateau; extrema cannot be counted unambiguously."""


class TruncationError(DcsqzError, ValueError):
    """Fock-space truncation leaves too much probability in the tail."""


class ClippingError(DcsqzError, ValueError):
    """Too many ADC samples hit the rails."""


class LowCorrelationError(DcsqzError, ValueError):
    """Envelope cross-correlation peak below the acceptance threshold."""


class EmptySelectionError(DcsqzError, ValueError):
    """CEO-phase binning selected no records."""


class ConfigError(DcsqzError, ValueError):
    """Configuration failed validation."""


class DataError(DcsqzError, ValueError):
    """Input data file is malformed or inconsistent."""
