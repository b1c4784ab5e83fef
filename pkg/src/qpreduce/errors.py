"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class QPReduceError(Exception):
    """Base class for all errors raised by qpreduce."""


class BasisError(QPReduceError):
    """Frequency bases are incompatible or a basis is malformed."""


class DimError(QPReduceError):
    """State or matrix dimensions do not agree."""


class NotSemiSimpleError(QPReduceError):
    """The constant linear part is (numerically) defective."""


class IrreducibleResonance(QPReduceError):
    """Retained normal-form terms prevent a time-invariant linear block."""

    def __init__(self, message: str, entries=()):
        super().__init__(message)
        self.entries = list(entries)


class AssemblyError(QPReduceError):
    """The assembled L-P transformation failed its verification."""


class SingularSampleError(QPReduceError):
    def __init__(self, time: float, cond: float):
        super().__init__(f"L-P matrix is singular at t={time:.6g} (cond={cond:.3g})")
        self.time = time
        self.cond = cond


class DivergenceError(QPReduceError):
    """ZNN integration produced a non-finite state."""


class PartitionError(QPReduceError):
    """Master/slave selection splits a conjugate pair or is malformed."""


class LinearResonance(QPReduceError):
    """A forcing harmonic coincides with a slave eigenvalue (primary resonance)."""

    condition = "Eq33-linear"

    def __init__(self, message: str, entry=None):
        super().__init__(message)
        self.entry = entry


class ReducibilityViolation(QPReduceError):
    """A manifold divisor vanished; carries the violated condition id."""

    def __init__(self, condition: str, message: str, entry=None):
        super().__init__(f"{condition}: {message}")
        self.condition = condition
        self.entry = entry


class ImaginaryLeak(QPReduceError):
    """Recovered physical states carry a non-negligible imaginary part."""


class BlowUpError(QPReduceError):
    def __init__(self, time: float):
        super().__init__(f"non-finite state at t={time:.6g}")
        self.time = time


class SegmentError(QPReduceError):
    """Welch segment longer than the signal."""


class GridError(QPReduceError):
    """Two trajectories share no common time window."""


class ConfigError(QPReduceError):
    """Configuration failed validation."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
