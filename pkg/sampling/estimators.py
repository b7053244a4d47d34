"""Horvitz-Thompson totals and the variance / bias ledger of rejective designs."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateDesignError, DesignError
from .poisson_binomial import first_order_inclusion, solve_canonical
from .population import Population, SampleDraw


@dataclass(frozen=True)
class VarianceProfile:
    d_N: float
    d_star_N: float
    theta_N: float
    sigma2_N: float
    poisson_var: float
    M_N: float
    c_p: float
    c_pi: float
    na_var: float

    def decomposition_residual(self) -> float:
        """Relative gap in poisson_var = sigma2_N + theta_N^2 d_N."""
        rhs = self.sigma2_N + self.theta_N**2 * self.d_N
        scale = max(abs(self.poisson_var), abs(rhs), np.finfo(float).tiny)
        return abs(self.poisson_var - rhs) / scale


def _weights(w) -> np.ndarray:
    return np.asarray(getattr(w, "probs", w), dtype=np.float64)


def ht_total(pop: Population, weights, draw: SampleDraw) -> float:
    """sum over the sample of x_i / w_i, with 0/0 = 0."""
    w = _weights(weights)
    idx = np.asarray(draw.selected, dtype=np.intp)
    x = pop.values[idx]
    ws = w[idx]
    zero = ws == 0.0
    if np.any(zero & (x != 0.0)):
        raise DesignError("Zero design weight on a selected unit with a non-zero value.")
    terms = np.divide(x, ws, out=np.zeros_like(x), where=~zero)
    return math.fsum(terms.tolist())


def ht_pair(pop: Population, p, pi, draw: SampleDraw) -> Tuple[float, float]:
    """(pi-weighted, p-weighted) totals on the same draw."""
    return ht_total(pop, pi, draw), ht_total(pop, p, draw)


def fixed_size_variance(pop: Population, pi, pi_ij) -> float:
    """sum_{i<j} (x_i/pi_i - x_j/pi_j)^2 (pi_i pi_j - pi_ij)."""
    pi = _weights(pi)
    pi_ij = np.asarray(pi_ij, dtype=np.float64)
    ratio = pop.values / pi
    diff = ratio[:, None] - ratio[None, :]
    terms = diff**2 * (np.outer(pi, pi) - pi_ij)
    upper = terms[np.triu_indices(pi.size, k=1)]
    return math.fsum(upper.tolist())


def poisson_ht_variance(pop: Population, p) -> float:
    p = _weights(p)
    return math.fsum(((1.0 - p) / p * pop.values**2).tolist())


def na_variance(pop: Population, pi) -> float:
    return poisson_ht_variance(pop, pi)


def p_weighted_target(pop: Population, p, pi) -> float:
    """The total that the p-weighted statistic is unbiased for: sum (p_i/pi_i) x_i."""
    return math.fsum((_weights(p) / _weights(pi) * pop.values).tolist())


def variance_profile(pop: Population, p=None, pi=None, n: Optional[int] = None) -> VarianceProfile:
    """Full ledger; the missing weighting is derived through the exact kernel."""
    if p is None and pi is None:
        raise DesignError("variance_profile needs canonical p, first-order pi, or both.")
    if p is None:
        if n is None:
            raise DesignError("Deriving canonical p from pi needs the sample size n.")
        p = solve_canonical(_weights(pi), n).p
    if pi is None:
        if n is None:
            raise DesignError("Deriving pi from canonical p needs the sample size n.")
        pi = first_order_inclusion(_weights(p), n)
    p, pi, x = _weights(p), _weights(pi), pop.values
    if p.size != x.size or pi.size != x.size:
        raise DesignError("Weights and population differ in length.")

    d_N = math.fsum((p * (1.0 - p)).tolist())
    if d_N <= 0.0:
        raise DegenerateDesignError("d_N = 0: every unit is deterministic under the Poisson plan.")
    d_star = math.fsum((pi * (1.0 - pi)).tolist())
    theta = math.fsum((x * (1.0 - p)).tolist()) / d_N
    sigma2 = math.fsum((p * (1.0 - p) * (x / p - theta) ** 2).tolist())
    abs_x = np.abs(x)
    return VarianceProfile(
        d_N=d_N,
        d_star_N=d_star,
        theta_N=theta,
        sigma2_N=max(sigma2, 0.0),
        poisson_var=poisson_ht_variance(pop, p),
        M_N=(6.0 / d_N) * math.fsum((abs_x / pi).tolist()),
        c_p=float(np.max(abs_x / p)),
        c_pi=float(np.max(abs_x / pi)),
        na_var=na_variance(pop, pi),
    )


def swor_sigma2(pop: Population, n: int) -> float:
    """Closed form of sigma2_N under SWOR: (1-n/N)(N^2/n)(mean(x^2) - mean(x)^2)."""
    size = pop.size
    mean = pop.total() / size
    mean_sq = math.fsum((pop.values**2).tolist()) / size
    return (1.0 - n / size) * (size**2 / n) * (mean_sq - mean**2)


def variance_comparison(profile: VarianceProfile) -> Tuple[float, float, bool]:
    """NA variance term against (1 + 6/d_N)^{-1} times the Poisson one."""
    floor = profile.poisson_var / (1.0 + 6.0 / profile.d_N)
    return profile.na_var, floor, profile.na_var >= floor * (1.0 - 1e-12)


def ht_deviation_values(pop: Population, weights: Sequence[float], indicators: np.ndarray) -> np.ndarray:
    """HT total minus S_N for each row of an indicator matrix."""
    w = _weights(weights)
    ratio = np.divide(pop.values, w, out=np.zeros_like(pop.values), where=w != 0.0)
    return np.asarray(indicators, dtype=np.float64) @ ratio - pop.total()
