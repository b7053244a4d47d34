"""Exact Poisson-binomial machinery for Poisson and rejective (conditional Poisson) designs.

B(k) = P{sum eps_i = k} for independent Bernoulli(p_i). Leave-one-out and
leave-two-out quantities are obtained by convolving prefix and suffix pmfs,
never by dividing a Bernoulli factor out of the full pmf.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, logit, logsumexp

from .conf import setting
from .errors import ConvergenceError, DegenerateDesignError, DesignError

logger = logging.getLogger(__name__)

RENORMALIZE_EVERY = 64


@dataclass(frozen=True)
class PmfTable:
    probs: np.ndarray

    def __getitem__(self, k: int) -> float:
        if k < 0 or k >= self.probs.size:
            return 0.0
        return float(self.probs[k])

    def __len__(self) -> int:
        return int(self.probs.size)


@dataclass(frozen=True)
class RejectiveInclusions:
    first_order: np.ndarray
    second_order: Optional[np.ndarray]
    sample_size: int


@dataclass(frozen=True)
class CanonicalSolution:
    p: np.ndarray
    forced: tuple
    iterations: int
    residual: float


@dataclass(frozen=True)
class HajekDiagnostics:
    rel1: np.ndarray
    rel2: np.ndarray
    rel1_scaled_max: float
    rel2_scaled_max: float
    bias_slack: Optional[np.ndarray]
    bias_bound_holds: Optional[bool]
    odds_ratio: np.ndarray
    sandwich_low: float
    sandwich_high: float
    sandwich_holds: Optional[bool]
    d_N: float
    d_star: float


def _as_probs(p: Sequence[float], closed: bool = True) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise DesignError("Probabilities must be a vector.")
    if closed:
        bad = ~((arr >= 0.0) & (arr <= 1.0))
    else:
        bad = ~((arr > 0.0) & (arr < 1.0))
    if np.any(bad):
        interval = "[0,1]" if closed else "(0,1)"
        raise DesignError(f"Probabilities must lie in {interval}.")
    return arr


def _use_log_domain(size: int) -> bool:
    return size > setting("SAMPLING_LOG_DOMAIN_ABOVE_N", 2000)


def pmf_table(p: Sequence[float]) -> PmfTable:
    """pmf of sum eps_i by the O(N^2) convolution DP, one row in memory."""
    arr = _as_probs(p)
    if _use_log_domain(arr.size):
        return PmfTable(np.exp(log_pmf_table(arr)))
    row = np.zeros(arr.size + 1)
    row[0] = 1.0
    for k, pk in enumerate(arr, start=1):
        # in place, highest index first
        row[1:k + 1] = row[1:k + 1] * (1.0 - pk) + row[0:k] * pk
        row[0] *= 1.0 - pk
        if k % RENORMALIZE_EVERY == 0:
            row /= row.sum()
    row /= row.sum()
    return PmfTable(row)


def log_pmf_table(p: Sequence[float]) -> np.ndarray:
    arr = _as_probs(p)
    with np.errstate(divide="ignore"):
        log_p, log_q = np.log(arr), np.log1p(-arr)
    row = np.full(arr.size + 1, -np.inf)
    row[0] = 0.0
    for k in range(arr.size):
        shifted = row[:k + 1] + log_p[k]
        row[1:k + 2] = np.logaddexp(row[1:k + 2] + log_q[k], shifted)
        row[0] += log_q[k]
    return row


def _log_prefix_tables(arr: np.ndarray) -> np.ndarray:
    """Row k holds log P{eps_0 + ... + eps_{k-1} = j}, j = 0..N."""
    size = arr.size
    table = np.full((size + 1, size + 1), -np.inf)
    table[0, 0] = 0.0
    if _use_log_domain(size):
        with np.errstate(divide="ignore"):
            log_p, log_q = np.log(arr), np.log1p(-arr)
        for k in range(size):
            prev = table[k, :k + 1]
            table[k + 1, :k + 1] = prev + log_q[k]
            table[k + 1, 1:k + 2] = np.logaddexp(table[k + 1, 1:k + 2], prev + log_p[k])
        return table
    linear = np.zeros_like(table)
    linear[0, 0] = 1.0
    for k, pk in enumerate(arr):
        prev = linear[k, :k + 1]
        linear[k + 1, :k + 1] = prev * (1.0 - pk)
        linear[k + 1, 1:k + 2] += prev * pk
        linear[k + 1] /= linear[k + 1].sum()
    with np.errstate(divide="ignore"):
        return np.log(linear)


def suffix_log_tables(p: Sequence[float]) -> np.ndarray:
    """Row k holds log P{eps_k + ... + eps_{N-1} = j}; row N is the empty sum."""
    arr = _as_probs(p)
    return _log_prefix_tables(arr[::-1])[::-1]


def _leave_one_out_log(prefix: np.ndarray, suffix: np.ndarray, m: int) -> np.ndarray:
    """log B_{-i}(m) for every unit i."""
    size = prefix.shape[0] - 1
    if m < 0:
        return np.full(size, -np.inf)
    left = prefix[:size, :m + 1]
    right = suffix[1:size + 1, m::-1]
    return logsumexp(left + right, axis=1)


def size_probability(p: Sequence[float], n: int) -> float:
    arr = _as_probs(p)
    if n < 0 or n > arr.size:
        return 0.0
    if _use_log_domain(arr.size):
        return float(np.exp(log_pmf_table(arr)[n]))
    return pmf_table(arr)[n]


def local_limit_ratio(p: Sequence[float], n: int) -> float:
    """P{sum eps = n} * sqrt(2 pi d_N); tends to 1 as d_N grows."""
    arr = _as_probs(p)
    d_N = math.fsum(arr * (1.0 - arr))
    return size_probability(arr, n) * math.sqrt(2.0 * math.pi * d_N)


def _check_size(size: int, n: int, low: int = 1) -> None:
    if not (low <= n < size):
        raise DesignError(f"Sample size n={n} must satisfy {low} <= n < N={size}.")


def _log_size_mass(prefix: np.ndarray, n: int) -> float:
    log_b = prefix[-1, n]
    if not np.isfinite(log_b):
        raise DegenerateDesignError(f"P{{sum eps = {n}}} = 0: no sample of size {n} has positive probability.")
    return float(log_b)


def first_order_inclusion(p: Sequence[float], n: int) -> np.ndarray:
    """pi_i = p_i B_{-i}(n-1) / B(n)."""
    arr = _as_probs(p, closed=False)
    _check_size(arr.size, n)
    prefix = _log_prefix_tables(arr)
    suffix = _log_prefix_tables(arr[::-1])[::-1]
    log_b = _log_size_mass(prefix, n)
    log_pi = np.log(arr) + _leave_one_out_log(prefix, suffix, n - 1) - log_b
    return np.exp(log_pi)


def second_order_inclusion(p: Sequence[float], n: int) -> np.ndarray:
    """pi_ij = p_i p_j B_{-ij}(n-2) / B(n); diagonal carries pi_i."""
    arr = _as_probs(p, closed=False)
    _check_size(arr.size, n)
    size = arr.size
    log_b = _log_size_mass(_log_prefix_tables(arr), n)
    log_p = np.log(arr)
    table = np.zeros((size, size))
    for i in range(size - 1):
        rest = np.delete(arr, i)
        prefix = _log_prefix_tables(rest)
        suffix = _log_prefix_tables(rest[::-1])[::-1]
        loo = _leave_one_out_log(prefix, suffix, n - 2)
        # loo[k] excludes unit k of `rest`; units > i sit at k = j - 1
        j = np.arange(i + 1, size)
        table[i, j] = np.exp(log_p[i] + log_p[j] + loo[j - 1] - log_b)
        table[j, i] = table[i, j]
    np.fill_diagonal(table, first_order_inclusion(arr, n))
    return table


def rejective_inclusions(p: Sequence[float], n: int, second_order: bool = True) -> RejectiveInclusions:
    first = first_order_inclusion(p, n)
    second = second_order_inclusion(p, n) if second_order else None
    return RejectiveInclusions(first_order=first, second_order=second, sample_size=n)


def covariance_matrix(p: Sequence[float], n: int) -> np.ndarray:
    """Gamma_N = (pi_ij - pi_i pi_j); the diagonal is pi_i (1 - pi_i)."""
    second = second_order_inclusion(p, n)
    first = np.diag(second).copy()
    return second - np.outer(first, first)


def size_variance(cov: np.ndarray) -> float:
    return math.fsum(np.asarray(cov).ravel().tolist())


def _normalize_log_odds(log_odds: np.ndarray, n: int) -> np.ndarray:
    """Shift log-odds so that the probabilities sum to n; the design is unchanged."""
    def excess(shift):
        return math.fsum(expit(log_odds + shift)) - n

    lo = -float(np.max(log_odds)) - 40.0
    hi = -float(np.min(log_odds)) + 40.0
    shift = brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return log_odds + shift


def _initial_log_odds(target: np.ndarray) -> np.ndarray:
    """Zero-order log-odds corrected with the first-order Hajek relation."""
    base = logit(target)
    d_star = math.fsum(target * (1.0 - target))
    if d_star <= 0:
        return base
    pi_tilde = math.fsum(target**2 * (1.0 - target)) / d_star
    factor = 1.0 - (pi_tilde - target) / d_star
    if np.all(factor > 0):
        return base - np.log(factor)
    return base


def solve_canonical(
    target_pi: Sequence[float],
    n: int,
    max_iter: Optional[int] = None,
    tol: Optional[float] = None,
) -> CanonicalSolution:
    """Canonical p with sum p = n whose rejective design has the given first-order inclusions.

    Units with target 1 are forced into every sample and the reduced
    (N - f, n - f) problem is solved for the rest; they carry p = 1 in the result.
    """
    max_iter = max_iter or setting("SAMPLING_SOLVER_MAX_ITER", 500)
    tol = tol or setting("SAMPLING_SOLVER_TOL", 1e-13)
    target = np.asarray(target_pi, dtype=np.float64)
    if target.ndim != 1 or np.any(~np.isfinite(target)) or np.any(target <= 0.0) or np.any(target > 1.0):
        raise DesignError("Target inclusion probabilities must lie in (0,1].")
    gap = math.fsum(target) - n
    if abs(gap) > 1e-6:
        raise DesignError(f"Target inclusion probabilities sum to {math.fsum(target)!r}, expected n={n}.")

    forced = target >= 1.0
    free = np.flatnonzero(~forced)
    n_free = n - int(forced.sum())
    if not (1 <= n_free < free.size):
        raise DesignError(f"After forcing {int(forced.sum())} unit(s), n={n_free} is infeasible for {free.size} free unit(s).")

    goal = target[free]
    if abs(gap) > 1e-12:
        logger.warning("Target inclusions off n by %.3e; renormalizing before solving.", gap)
        goal = goal * (n_free / math.fsum(goal))
        if np.any(goal >= 1.0):
            raise DesignError("Renormalized targets reach 1; fix the input inclusion probabilities.")

    goal_logit = logit(goal)
    log_odds = _normalize_log_odds(_initial_log_odds(goal), n_free)
    pi = first_order_inclusion(expit(log_odds), n_free)
    residual = float(np.max(np.abs(pi - goal)))
    step = 0.5
    iterations = 0
    while residual > tol and iterations < max_iter:
        iterations += 1
        candidate = _normalize_log_odds(log_odds + step * (goal_logit - logit(pi)), n_free)
        cand_pi = first_order_inclusion(expit(candidate), n_free)
        cand_residual = float(np.max(np.abs(cand_pi - goal)))
        if cand_residual < residual:
            log_odds, pi, residual = candidate, cand_pi, cand_residual
            step = min(1.0, 2.0 * step)
        else:
            step *= 0.5
            if step < 1e-10:
                break
        logger.debug("solve_canonical iter=%d residual=%.3e step=%.3g", iterations, residual, step)

    if residual > max(tol, 1e-10):
        raise ConvergenceError("Canonical solver did not converge", residual, iterations)

    p = np.ones_like(target)
    p[free] = expit(log_odds)
    return CanonicalSolution(p=p, forced=tuple(int(i) for i in np.flatnonzero(forced)), iterations=iterations, residual=residual)


def hajek_residuals(p: Sequence[float], pi: Sequence[float], n: int) -> HajekDiagnostics:
    """Both sides of the first-order p/pi relations and the pairwise bias inequality."""
    p = np.asarray(p, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    d_N = math.fsum(p * (1.0 - p))
    d_star = math.fsum(pi * (1.0 - pi))
    p_tilde = math.fsum(p**2 * (1.0 - p)) / d_N if d_N > 0 else 0.0
    pi_tilde = math.fsum(pi**2 * (1.0 - pi)) / d_star if d_star > 0 else 0.0

    odds_ratio = (pi * (1.0 - p)) / (p * (1.0 - pi))
    rel1 = odds_ratio - (1.0 - (pi_tilde - pi) / d_star) if d_star > 0 else np.zeros_like(pi)
    rel2 = 1.0 / odds_ratio - (1.0 - (p_tilde - p) / d_N) if d_N > 0 else np.zeros_like(p)

    low = 1.0 - 2.0 / d_N if d_N > 0 else -np.inf
    high = 1.0 + 2.0 / d_N + 4.0 / d_N**2 if d_N > 0 else np.inf
    slack = None
    holds = None
    sandwich = None
    if d_N >= 1.0:
        slack = (6.0 / d_N) * (1.0 - pi) / pi - np.abs(1.0 / pi - 1.0 / p)
        holds = bool(np.all(slack >= -1e-12))
        sandwich = bool(np.all((odds_ratio >= low - 1e-12) & (odds_ratio <= high + 1e-12)))
    return HajekDiagnostics(
        rel1=rel1,
        rel2=rel2,
        rel1_scaled_max=float(np.max(np.abs(rel1)) * d_star),
        rel2_scaled_max=float(np.max(np.abs(rel2)) * d_N),
        bias_slack=slack,
        bias_bound_holds=holds,
        odds_ratio=odds_ratio,
        sandwich_low=low,
        sandwich_high=high,
        sandwich_holds=sandwich,
        d_N=d_N,
        d_star=d_star,
    )
