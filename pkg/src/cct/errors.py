"""Exception types shared across the solver modules."""


class CCTError(Exception):
    """Base class for all solver errors."""


class SpecError(CCTError):
    """A problem instance failed validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class EscapeDetected(CCTError):
    """A backward Riccati integration blew up before reaching t = 0."""

    def __init__(self, t):
        self.t = float(t)
        super().__init__(f"coefficient blow-up detected at t={self.t:.6g}")


class HorizonInfeasible(CCTError):
    def __init__(self, T, escape_time):
        self.T = float(T)
        self.escape_time = float(escape_time)
        super().__init__(
            f"horizon T={self.T:.6g} is not below the escape time {self.escape_time:.6g}"
        )


class NoRealEquilibrium(CCTError):
    pass


class InfeasibleMarginals(CCTError):
    pass


class CapExceeded(CCTError):
    def __init__(self, count, cap):
        self.count = count
        self.cap = cap
        super().__init__(f"{count} entries exceed the cap of {cap}")


class MaxIterExceeded(CCTError):
    """Iteration budget exhausted; the best iterate found is attached."""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class MaxOuterExceeded(MaxIterExceeded):
    pass


class UnsupportedDimension(CCTError, ValueError):
    """The tensor quadrature grid is not available in this dimension."""


class ConfigError(CCTError):
    """A run configuration could not be parsed or is incomplete."""
