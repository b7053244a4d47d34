"""Domain errors. All of them are ValueErrors so callers can keep catching ValueError."""
from __future__ import annotations


class SamplingError(ValueError):
    pass


class PopulationFormatError(SamplingError):
    """Malformed population file: missing column, bad cell, empty file."""


class DesignError(SamplingError):
    """Weights or sample size that violate a design's definition."""


class DegenerateDesignError(SamplingError):
    """The design puts no mass on the requested size (B(n) = 0, or d_N = 0)."""


class ConvergenceError(SamplingError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class RoundCapError(SamplingError):
    def __init__(self, scheme: str, rounds: int):
        super().__init__(
            f"{scheme}: no admissible sample after {rounds} rounds; the design is likely degenerate."
        )
        self.scheme = scheme
        self.rounds = rounds


class EnumerationCapError(SamplingError):
    """Plan too large to enumerate exactly."""


class AbsoluteContinuityError(SamplingError):
    """KL(R || R~) undefined: R charges a sample that R~ does not."""
