"""Exception hierarchy shared by every module of the package."""


class SafeSwitchError(Exception):
    """Base class for all errors raised by safeswitch."""


class DimensionMismatch(SafeSwitchError, ValueError):
    pass


class NotPositiveDefinite(SafeSwitchError, ValueError):
    pass


class Unstable(SafeSwitchError, ValueError):
    """A matrix that must be Schur-stable has spectral radius >= 1."""

    def __init__(self, message, spectral_radius=None):
        super().__init__(message)
        self.spectral_radius = spectral_radius


class NoConvergence(SafeSwitchError, RuntimeError):
    pass


class NotStabilizable(SafeSwitchError, ValueError):
    pass


class DwellTimeOverflow(SafeSwitchError, RuntimeError):
    pass


class InvalidDof(SafeSwitchError, ValueError):
    pass


class InconsistentDwell(SafeSwitchError, ValueError):
    pass


class DegenerateGains(SafeSwitchError, ValueError):
    pass


class ConfigParseError(SafeSwitchError, ValueError):
    """The configuration file could not be parsed."""

    def __init__(self, message, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.field = field


class ValidationError(SafeSwitchError, ValueError):
    """One or more configuration invariants are violated.

    ``problems`` holds every violation as ``(field, message)`` pairs.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        text = "; ".join(f"{f}: {m}" for f, m in self.problems)
        super().__init__(f"invalid configuration: {text}")
