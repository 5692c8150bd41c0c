"""
Exception hierarchy shared by the simulation, tuning and diagnostics services.

Every error carries the CLI exit code it maps to:
- 1: usage error (bad flags, malformed config file)
- 2: parameter domain violation or missing capability
- 3: numerical failure (degenerate bounce, failed inversion, degenerate ensemble)
- 4: verification failure (certificate or acceptance check)
"""

from typing import Optional, Sequence


class PdmpLabError(Exception):
    """Base class for all library errors."""
    exit_code: int = 1


class DomainError(PdmpLabError, ValueError):
    """Raised when a parameter lies outside its admissible domain."""
    exit_code = 2

    def __init__(self, name: str, value: object, requirement: str):
        self.name = name
        self.value = value
        self.requirement = requirement
        super().__init__(f"{name}={value!r} violates {requirement}")


class DimensionMismatchError(DomainError):
    """Raised when vectors or potentials disagree on the dimension d."""

    def __init__(self, expected: int, got: int, what: str = "dimension"):
        self.expected = expected
        self.got = got
        super().__init__(what, got, f"expected length {expected}")


class UnsupportedPotentialError(PdmpLabError):
    """Raised when an operation needs a capability the potential does not expose."""
    exit_code = 2

    def __init__(self, operation: str, capability: str):
        self.operation = operation
        self.capability = capability
        super().__init__(f"{operation} requires a potential with {capability}")


class DegenerateBounceError(PdmpLabError):
    """Raised when a bounce is requested where the gradient vanishes."""
    exit_code = 3

    def __init__(self, time: Optional[float] = None):
        self.time = time
        where = f" at t={time!r}" if time is not None else ""
        super().__init__(f"Reflection undefined: zero gradient at bounce point{where}")


class NumericalFailureError(PdmpLabError):
    """Raised on non-finite states or a failed event-time inversion."""
    exit_code = 3

    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(detail)


class DegenerateEnsembleError(PdmpLabError):
    """Raised when a coupling ensemble carries no decay signal (all distances zero)."""
    exit_code = 3

    def __init__(self, n_traces: int):
        self.n_traces = n_traces
        super().__init__(f"degenerate ensemble: all {n_traces} traces are identically zero")


class VerificationFailedError(PdmpLabError):
    """Raised when a certificate or acceptance check does not hold."""
    exit_code = 4

    def __init__(self, check: str, margin: Optional[float] = None, details: Sequence[str] = ()):
        self.check = check
        self.margin = margin
        self.details = list(details)
        suffix = f" (margin {margin:.6g})" if margin is not None else ""
        super().__init__(f"{check} failed{suffix}")


class UsageError(PdmpLabError):
    """Raised on malformed command lines or config files."""
    exit_code = 1

    def __init__(self, detail: str):
        self.detail = detail
        super().__init__(detail)
