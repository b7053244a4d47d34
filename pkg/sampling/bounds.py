"""Bennett/Bernstein tail bounds for HT totals and their inversion into confidence radii.

All bounds are upper-tail bounds for P{S_hat - S_N > t}. Lower tails follow by
flipping the sign of x, which leaves every variance proxy and envelope
unchanged, so `side="lower"` returns the same value and `side="both"` doubles it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import bisect

from .conf import setting
from .estimators import VarianceProfile

logger = logging.getLogger(__name__)

SERIES_BELOW = 1e-8
UNCALIBRATED = "uncalibrated universal constant (shape-only bound)"


class BoundKind(str, Enum):
    POISSON_BENNETT = "poisson-bennett"
    POISSON_BERNSTEIN = "poisson-bernstein"
    NA_BENNETT = "na-bennett"
    NA_BERNSTEIN = "na-bernstein"
    REJECTIVE_BENNETT = "rejective-bennett"
    REJECTIVE_BERNSTEIN = "rejective-bernstein"
    HT_PI_BENNETT = "ht-pi-bennett"
    HT_PI_BERNSTEIN = "ht-pi-bernstein"

    @property
    def family(self) -> str:
        return self.value.rsplit("-", 1)[0]

    @property
    def kernel(self) -> str:
        return self.value.rsplit("-", 1)[1]

    @property
    def constant_free(self) -> bool:
        return self.family in ("poisson", "na")


@dataclass(frozen=True)
class BoundCurve:
    bound_kind: BoundKind
    thresholds: np.ndarray
    values: np.ndarray
    constants: Dict[str, float] = field(default_factory=dict)
    flags: Tuple[str, ...] = ()

    def capped(self) -> np.ndarray:
        return np.minimum(self.values, 1.0)


def H(x):
    """(1+x) log(1+x) - x, with a series near 0."""
    x = np.asarray(x, dtype=np.float64)
    small = x < SERIES_BELOW
    safe = np.where(small, 1.0, x)
    exact = (1.0 + safe) * np.log1p(safe) - safe
    series = x**2 / 2.0 - x**3 / 6.0
    out = np.where(small, series, exact)
    return out if out.ndim else float(out)


def _degenerate(t: np.ndarray) -> np.ndarray:
    return np.where(t > 0, 0.0, 1.0)


def bennett_exponent(t, v: float, c: float):
    t = np.asarray(t, dtype=np.float64)
    if v <= 0.0:
        out = np.where(t > 0, np.inf, 0.0)
    elif c <= 0.0:
        out = t**2 / (2.0 * v)
    else:
        out = (v / c**2) * H(c * t / v)
    return out if np.ndim(out) else float(out)


def bernstein_exponent(t, v: float, c: float):
    t = np.asarray(t, dtype=np.float64)
    if v <= 0.0:
        out = np.where(t > 0, np.inf, 0.0)
    else:
        out = t**2 / (2.0 * (v + c * t / 3.0))
    return out if np.ndim(out) else float(out)


def bennett_kernel(t, v: float, c: float):
    """exp(-(v/c^2) H(ct/v))."""
    return _kernel_value(bennett_exponent(t, v, c))


def bernstein_kernel(t, v: float, c: float):
    """exp(-t^2 / (2(v + ct/3)))."""
    return _kernel_value(bernstein_exponent(t, v, c))


def _kernel_value(exponent):
    out = np.exp(-np.asarray(exponent, dtype=np.float64))
    return out if out.ndim else float(out)


_KERNELS = {"bennett": bennett_kernel, "bernstein": bernstein_kernel}
_EXPONENTS = {"bennett": bennett_exponent, "bernstein": bernstein_exponent}
_SIDE_FACTOR = {"upper": 1.0, "lower": 1.0, "both": 2.0}


def _side(side: str) -> float:
    try:
        return _SIDE_FACTOR[side]
    except KeyError:
        raise ValueError(f"side must be one of {sorted(_SIDE_FACTOR)}, got {side!r}.")


def poisson_tail_bound(profile: VarianceProfile, t, kind: str = "bernstein", side: str = "upper"):
    """Independent-sampling bound with v = sum (1-p_i)/p_i x_i^2, c = max |x_i|/p_i."""
    return _side(side) * _KERNELS[kind](t, profile.poisson_var, profile.c_p)


def na_tail_bound(profile: VarianceProfile, t, kind: str = "bernstein", side: str = "upper"):
    """Negative-association bound: 2 kernel(t/2) with pi-weighted proxies; may exceed 1."""
    t = np.asarray(t, dtype=np.float64)
    return _side(side) * 2.0 * _KERNELS[kind](t / 2.0, profile.na_var, profile.c_pi)


def rejective_preconditions(profile: VarianceProfile, D: Optional[float] = None) -> List[str]:
    D = setting("SAMPLING_CONSTANT_D", 1.0) if D is None else D
    flags = []
    if min(profile.d_N, profile.d_star_N) < 1.0:
        flags.append(f"min(d_N, d*_N) = {min(profile.d_N, profile.d_star_N):.6g} < 1")
    if profile.d_N < D:
        flags.append(f"d_N = {profile.d_N:.6g} < D = {D:.6g}")
    return flags


def rejective_tail_bound(profile: VarianceProfile, t, kind: str = "bernstein", C: Optional[float] = None,
                         side: str = "upper"):
    """C kernel(t; v = sigma2_N, c = max |x_j|/p_j), for the p-weighted statistic."""
    C = setting("SAMPLING_CONSTANT_C", 1.0) if C is None else C
    return _side(side) * C * _KERNELS[kind](t, profile.sigma2_N, profile.c_p)


def ht_pi_tail_bound(profile: VarianceProfile, t, kind: str = "bernstein", C: Optional[float] = None,
                     side: str = "upper"):
    """Rejective bound shifted by the bias radius M_N; flat at C for t <= M_N."""
    C = setting("SAMPLING_CONSTANT_C", 1.0) if C is None else C
    t = np.asarray(t, dtype=np.float64)
    shifted = np.maximum(t - profile.M_N, 0.0)
    out = np.where(t > profile.M_N, rejective_tail_bound(profile, shifted, kind, C), C) * _side(side)
    return out if out.ndim else float(out)


def bound_exponent(kind: BoundKind, profile: VarianceProfile, t):
    """-log of the kernel part, constants excluded."""
    kind = BoundKind(kind)
    t = np.asarray(t, dtype=np.float64)
    fn = _EXPONENTS[kind.kernel]
    if kind.family == "poisson":
        return fn(t, profile.poisson_var, profile.c_p)
    if kind.family == "na":
        return fn(t / 2.0, profile.na_var, profile.c_pi)
    if kind.family == "rejective":
        return fn(t, profile.sigma2_N, profile.c_p)
    return fn(np.maximum(t - profile.M_N, 0.0), profile.sigma2_N, profile.c_p)


def evaluate(kind: BoundKind, profile: VarianceProfile, t, C: Optional[float] = None, side: str = "upper"):
    kind = BoundKind(kind)
    if kind.family == "poisson":
        return poisson_tail_bound(profile, t, kind.kernel, side)
    if kind.family == "na":
        return na_tail_bound(profile, t, kind.kernel, side)
    if kind.family == "rejective":
        return rejective_tail_bound(profile, t, kind.kernel, C, side)
    return ht_pi_tail_bound(profile, t, kind.kernel, C, side)


def bound_curve(kind: BoundKind, profile: VarianceProfile, thresholds, C: Optional[float] = None,
                D: Optional[float] = None, side: str = "upper") -> BoundCurve:
    kind = BoundKind(kind)
    grid = np.asarray(thresholds, dtype=np.float64)
    C_used = setting("SAMPLING_CONSTANT_C", 1.0) if C is None else C
    D_used = setting("SAMPLING_CONSTANT_D", 1.0) if D is None else D
    flags: List[str] = []
    constants = {}
    if not kind.constant_free:
        constants = {"C": C_used, "D": D_used}
        flags.append(UNCALIBRATED)
        flags.extend(rejective_preconditions(profile, D_used))
        if kind.family == "ht-pi" and np.any(grid <= profile.M_N):
            flags.append(f"t <= M_N = {profile.M_N:.6g}: bound is trivial there")
    values = np.atleast_1d(evaluate(kind, profile, grid, C_used, side))
    if flags:
        logger.debug("%s flags: %s", kind.value, "; ".join(flags))
    return BoundCurve(kind, grid, values, constants, tuple(flags))


def confidence_radius(bound_fn: Callable[[float], float], delta: float, rtol: float = 1e-10) -> float:
    """Smallest t (to rtol) with bound_fn(t) <= delta."""
    if not (0.0 < delta):
        raise ValueError("delta must be positive.")
    if delta >= bound_fn(0.0):
        return 0.0
    hi = 1.0
    while bound_fn(hi) > delta:
        hi *= 2.0
        if not math.isfinite(hi):
            raise ValueError("Bound never drops below delta.")
    lo = hi / 2.0
    while lo > 1e-300 and bound_fn(lo) <= delta:
        hi, lo = lo, lo / 2.0
    if lo <= 1e-300:
        lo = 0.0
    root = bisect(lambda t: bound_fn(t) - delta, lo, hi, xtol=1e-300, rtol=rtol, maxiter=2000)
    step = max(abs(root), 1e-300) * rtol
    while bound_fn(root) > delta:
        root += step
    return float(root)


def confidence_interval(estimate: float, bound_fn: Callable[[float], float], delta: float) -> Tuple[float, float]:
    """Two-sided interval from a one-sided bound: smallest t with min(1, 2 bound(t)) <= delta.

    For delta < 1 this spends delta/2 on each tail; delta = 1 gives zero width.
    """
    radius = confidence_radius(lambda t: min(1.0, 2.0 * float(bound_fn(t))), delta)
    return estimate - radius, estimate + radius
