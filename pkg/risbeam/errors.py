"""Exception hierarchy shared by all risbeam modules."""


class RisbeamError(Exception):
    """Base class for every error raised on purpose by risbeam."""


class ConfigError(RisbeamError, ValueError):
    """Invalid or unknown configuration key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class UsageError(RisbeamError, ValueError):
    """An operation was called with arguments outside its contract."""


class DimensionError(RisbeamError, ValueError):
    """Array shapes do not match the system dimensions."""


class DomainError(RisbeamError, ValueError):
    """Argument outside the mathematical domain (non-positive distance, zero channel)."""


class DegenerateError(RisbeamError, ArithmeticError):
    """A projection or initialization received a degenerate candidate."""


class ConvergenceError(RisbeamError, RuntimeError):
    """An iterative routine hit its iteration cap."""

    def __init__(self, message: str, last_iterate=None, last_value=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.last_value = last_value


class InfeasibleStateError(RisbeamError, ValueError):
    """A beamforming state violates the power or unit-modulus constraints."""


class SamplerExhaustedError(RisbeamError, RuntimeError):
    """A finite channel-sample source ran out of samples."""
