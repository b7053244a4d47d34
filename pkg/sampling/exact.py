"""Exhaustive enumeration of small sampling plans.

Samples are bitmasks (bit i set <=> unit i selected) kept in ascending order,
so every table, tail and distance computed here is reproducible bit for bit.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO

import numpy as np
from scipy.special import logsumexp, rel_entr

from .conf import setting
from .errors import AbsoluteContinuityError, DesignError, EnumerationCapError
from .estimators import _weights
from .poisson_binomial import pmf_table
from .population import Population, SampleDraw
from .schemes import SchemeKind, SchemeSpec

logger = logging.getLogger(__name__)

MAX_MASK_BITS = 62
CHUNK = 1 << 16


@dataclass(frozen=True)
class PlanTable:
    masks: np.ndarray
    probabilities: np.ndarray
    population_size: int
    label: str = "exact"

    def __post_init__(self):
        order = np.argsort(self.masks, kind="stable")
        masks = np.asarray(self.masks, dtype=np.int64)[order]
        probs = np.asarray(self.probabilities, dtype=np.float64)[order]
        if masks.size and np.any(np.diff(masks) == 0):
            raise DesignError("Plan support contains duplicate samples.")
        masks.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "probabilities", probs)

    def __len__(self) -> int:
        return int(self.masks.size)

    def support(self):
        for mask, prob in zip(self.masks.tolist(), self.probabilities.tolist()):
            yield tuple(i for i in range(self.population_size) if mask >> i & 1), prob

    def total_mass(self) -> float:
        return math.fsum(self.probabilities.tolist())

    def _bit_chunks(self):
        shifts = np.arange(self.population_size, dtype=np.int64)
        for start in range(0, len(self), CHUNK):
            block = self.masks[start:start + CHUNK]
            yield start, ((block[:, None] >> shifts) & 1).astype(np.float64)

    def indicators(self) -> np.ndarray:
        shifts = np.arange(self.population_size, dtype=np.int64)
        return ((self.masks[:, None] >> shifts) & 1).astype(bool)

    def linear_statistic(self, coefficients) -> np.ndarray:
        """sum over each sample of coefficients[i]."""
        coef = np.asarray(coefficients, dtype=np.float64)
        out = np.empty(len(self))
        for start, bits in self._bit_chunks():
            out[start:start + bits.shape[0]] = bits @ coef
        return out

    def marginals(self) -> np.ndarray:
        first = np.zeros(self.population_size)
        for start, bits in self._bit_chunks():
            first += self.probabilities[start:start + bits.shape[0]] @ bits
        return first

    def pair_marginals(self) -> np.ndarray:
        second = np.zeros((self.population_size, self.population_size))
        for start, bits in self._bit_chunks():
            weighted = bits * self.probabilities[start:start + bits.shape[0], None]
            second += bits.T @ weighted
        return second

    def probability_of(self, units: Iterable[int]) -> float:
        mask = sum(1 << i for i in units)
        pos = np.searchsorted(self.masks, mask)
        if pos < len(self) and self.masks[pos] == mask:
            return float(self.probabilities[pos])
        return 0.0


def _check_bits(size: int) -> None:
    if size > MAX_MASK_BITS:
        raise EnumerationCapError(f"N={size} exceeds the {MAX_MASK_BITS}-unit bitmask limit.")


def _all_subset_probabilities(p: np.ndarray) -> np.ndarray:
    """Poisson probabilities of every mask 0..2^N-1, in mask order."""
    probs = np.ones(1)
    for pi in p:
        probs = np.concatenate([probs * (1.0 - pi), probs * pi])
    return probs


def _combinations(size: int, n: int, cap: int) -> np.ndarray:
    count = math.comb(size, n)
    if count > cap:
        raise EnumerationCapError(f"C({size},{n}) = {count} samples exceeds the enumeration cap {cap}.")
    combos = np.fromiter(
        itertools.chain.from_iterable(itertools.combinations(range(size), n)),
        dtype=np.int64,
        count=count * n,
    )
    return combos.reshape(count, n)


def _masks(combos: np.ndarray) -> np.ndarray:
    return np.left_shift(np.int64(1), combos).sum(axis=1)


def enumerate_plan(spec: SchemeSpec, cap: Optional[int] = None, max_poisson_n: Optional[int] = None) -> PlanTable:
    cap = cap or setting("SAMPLING_ENUMERATION_CAP", 2_000_000)
    max_poisson_n = max_poisson_n or setting("SAMPLING_ENUMERATION_MAX_N", 20)
    size = spec.population_size
    _check_bits(size)
    p = spec.probs

    if spec.kind is SchemeKind.POISSON:
        if size > max_poisson_n:
            raise EnumerationCapError(f"Poisson plan over N={size} units has 2^{size} samples; limit is N <= {max_poisson_n}.")
        probs = _all_subset_probabilities(p)
        keep = np.flatnonzero(probs > 0.0)
        return PlanTable(keep.astype(np.int64), probs[keep], size, "poisson")

    if spec.sample_size == size:
        return PlanTable(np.array([(1 << size) - 1], dtype=np.int64), np.ones(1), size, spec.kind.value)

    n = spec.sample_size
    combos = _combinations(size, n, cap)
    masks = _masks(combos)
    if spec.kind is SchemeKind.SWOR:
        probs = np.full(masks.size, 1.0 / masks.size)
        return PlanTable(masks, probs, size, "swor")

    if spec.kind.rejective:
        log_odds = np.log(p) - np.log1p(-p)
        base = math.fsum(np.log1p(-p).tolist())
        mass = pmf_table(p)[n]
        log_probs = log_odds[combos].sum(axis=1) + base - math.log(mass)
        return PlanTable(masks, np.exp(log_probs), size, "rejective")

    # Rao-Sampford: P(s) proportional to sum_{i in s}(1 - pi_i) prod_{j in s} pi_j/(1 - pi_j)
    log_lambda = np.log(p) - np.log1p(-p)
    log_w = np.log((1.0 - p)[combos].sum(axis=1)) + log_lambda[combos].sum(axis=1)
    return PlanTable(masks, np.exp(log_w - logsumexp(log_w)), size, "rao-sampford")


def empirical_plan(draws: Iterable[SampleDraw], size: int) -> PlanTable:
    """Relative frequencies of the observed samples, labelled as empirical."""
    _check_bits(size)
    return plan_from_masks(np.fromiter((d.mask() for d in draws), dtype=np.int64), size)


def plan_from_masks(masks: np.ndarray, size: int) -> PlanTable:
    masks = np.asarray(masks, dtype=np.int64)
    if masks.size == 0:
        raise DesignError("No draws to tabulate.")
    unique, counts = np.unique(masks, return_counts=True)
    return PlanTable(unique, counts / masks.size, size, "empirical")


def ht_deviations(plan: PlanTable, pop: Population, weights) -> np.ndarray:
    w = _weights(weights)
    ratio = np.divide(pop.values, w, out=np.zeros_like(pop.values), where=w != 0.0)
    return plan.linear_statistic(ratio) - pop.total()


def exact_tail(plan: PlanTable, pop: Population, weights, t: float) -> float:
    """P{S_hat - S_N > t} under the plan."""
    dev = ht_deviations(plan, pop, weights)
    return math.fsum(plan.probabilities[dev > t].tolist())


def exact_tail_curve(plan: PlanTable, pop: Population, weights, thresholds) -> np.ndarray:
    dev = ht_deviations(plan, pop, weights)
    return tail_curve_from_values(dev, plan.probabilities, thresholds)


def tail_curve_from_values(values: np.ndarray, probabilities: np.ndarray, thresholds) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    sorted_values = values[order]
    suffix = np.concatenate([np.cumsum(probabilities[order][::-1])[::-1], [0.0]])
    cut = np.searchsorted(sorted_values, np.asarray(thresholds, dtype=np.float64), side="right")
    return np.minimum(suffix[cut], 1.0)


def _aligned(plan1: PlanTable, plan2: PlanTable):
    if plan1.population_size != plan2.population_size:
        raise DesignError("Plans are over populations of different sizes.")
    union = np.union1d(plan1.masks, plan2.masks)
    a = np.zeros(union.size)
    b = np.zeros(union.size)
    a[np.searchsorted(union, plan1.masks)] = plan1.probabilities
    b[np.searchsorted(union, plan2.masks)] = plan2.probabilities
    return a, b


def tv_distance(plan1: PlanTable, plan2: PlanTable) -> float:
    """sum_s |R1(s) - R2(s)|: no 1/2 factor, so the value lies in [0, 2]."""
    a, b = _aligned(plan1, plan2)
    return math.fsum(np.abs(a - b).tolist())


def kl_divergence(plan_r: PlanTable, plan_rtilde: PlanTable) -> float:
    """sum_s R(s) log(R(s)/R~(s)), natural log."""
    a, b = _aligned(plan_r, plan_rtilde)
    if np.any((a > 0.0) & (b <= 0.0)):
        raise AbsoluteContinuityError("KL(R || R~) is infinite: R charges a sample R~ never draws.")
    return max(math.fsum(rel_entr(a, b).tolist()), 0.0)


def pinsker_bound(kl: float) -> float:
    return math.sqrt(2.0 * kl)


def tail_transfer_bound(bound, tv: Optional[float] = None, kl: Optional[float] = None):
    """Tail bound for an approximating plan: bound + ||R~ - R||_1, or + sqrt(2 KL)."""
    if tv is None and kl is None:
        raise ValueError("tail_transfer_bound needs the L1 distance or the KL divergence.")
    slack = tv if tv is not None else pinsker_bound(kl)
    if kl is not None and tv is not None:
        slack = min(tv, pinsker_bound(kl))
    out = np.asarray(bound, dtype=np.float64) + slack
    return out if out.ndim else float(out)


def plan_to_csv(plan: PlanTable, stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["mask", "probability"])
    for mask, prob in zip(plan.masks.tolist(), plan.probabilities.tolist()):
        writer.writerow([mask, repr(prob)])


def exact_covariance(plan: PlanTable, f, g) -> float:
    """Cov(f(eps), g(eps)) under the plan, for functions of the indicator matrix rows."""
    ind = plan.indicators()
    fv = np.asarray(f(ind), dtype=np.float64)
    gv = np.asarray(g(ind), dtype=np.float64)
    w = plan.probabilities
    ef, eg = fv @ w, gv @ w
    return float(((fv - ef) * (gv - eg)) @ w)
