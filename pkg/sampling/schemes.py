"""Samplers for Poisson, rejective, SWOR and Rao-Sampford plans.

Seeding contract: a 64-bit master seed is the Philox key and the replication
index sits in the third 64-bit counter word. Each replication therefore owns
its own stream, and a draw depends only on (master seed, replication), never
on which worker produced it or in what order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
from cachetools import LRUCache, cached
from cachetools.keys import hashkey

from .conf import setting
from .errors import DesignError, RoundCapError
from .poisson_binomial import suffix_log_tables
from .population import DesignWeights, SampleDraw, WeightKind

logger = logging.getLogger(__name__)

PROBABILITY_GUARD = 1e-9
MAX_BATCH = 4096


class SchemeKind(str, Enum):
    POISSON = "poisson"
    REJECTIVE_REJECTION = "rejective-rejection"
    REJECTIVE_SEQUENTIAL = "rejective-sequential"
    SWOR = "swor"
    RAO_SAMPFORD = "rao-sampford"

    @property
    def fixed_size(self) -> bool:
        return self is not SchemeKind.POISSON

    @property
    def rejective(self) -> bool:
        return self in (SchemeKind.REJECTIVE_REJECTION, SchemeKind.REJECTIVE_SEQUENTIAL)


@dataclass(frozen=True)
class SchemeSpec:
    kind: SchemeKind
    weights: Optional[DesignWeights] = None
    sample_size: Optional[int] = None
    population_size: Optional[int] = None

    def __post_init__(self):
        kind = SchemeKind(self.kind)
        object.__setattr__(self, "kind", kind)
        size = self.population_size
        if self.weights is not None:
            if size is not None and size != self.weights.size:
                raise DesignError(f"Weights have {self.weights.size} entries but N={size}.")
            size = self.weights.size
        if size is None:
            raise DesignError("A scheme needs weights or a population size.")
        object.__setattr__(self, "population_size", size)

        n = self.sample_size
        if kind is SchemeKind.POISSON:
            if self.weights is None:
                raise DesignError("Poisson sampling needs inclusion probabilities.")
            return
        if n is None or not (0 < n <= size):
            raise DesignError(f"Fixed-size schemes need 0 < n <= N (got n={n}, N={size}).")
        if kind.rejective:
            if self.weights is None or self.weights.kind is not WeightKind.CANONICAL:
                raise DesignError("Rejective sampling needs canonical p weights.")
            object.__setattr__(self, "weights", self.weights.with_target(n))
        elif kind is SchemeKind.RAO_SAMPFORD:
            w = self.weights
            if w is None or w.kind is not WeightKind.FIRST_ORDER:
                raise DesignError("Rao-Sampford sampling needs first-order pi weights.")
            if np.any(w.probs >= 1.0):
                raise DesignError("Rao-Sampford sampling needs pi_i < 1.")
            if abs(math.fsum(w.probs) - n) > 1e-9:
                raise DesignError(f"Rao-Sampford inclusion probabilities must sum to n={n}.")

    @property
    def probs(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.population_size, self.sample_size / self.population_size)
        return self.weights.probs

    @classmethod
    def poisson(cls, probs, kind: WeightKind = WeightKind.CANONICAL) -> "SchemeSpec":
        return cls(SchemeKind.POISSON, DesignWeights(probs, kind))

    @classmethod
    def rejective(cls, p, n: int, algorithm: str = "auto") -> "SchemeSpec":
        weights = DesignWeights(p, WeightKind.CANONICAL, n)
        return cls(choose_rejective_kind(weights, algorithm), weights, n)

    @classmethod
    def swor(cls, size: int, n: int) -> "SchemeSpec":
        return cls(SchemeKind.SWOR, None, n, size)

    @classmethod
    def rao_sampford(cls, pi, n: int) -> "SchemeSpec":
        return cls(SchemeKind.RAO_SAMPFORD, DesignWeights(pi, WeightKind.FIRST_ORDER, n), n)


def choose_rejective_kind(weights: DesignWeights, algorithm: str = "auto") -> SchemeKind:
    if algorithm == "rejection":
        return SchemeKind.REJECTIVE_REJECTION
    if algorithm == "sequential":
        return SchemeKind.REJECTIVE_SEQUENTIAL
    if algorithm != "auto":
        raise DesignError(f"Unknown rejective algorithm '{algorithm}'.")
    if weights.dN() < setting("SAMPLING_SEQUENTIAL_BELOW_DN", 4.0):
        return SchemeKind.REJECTIVE_SEQUENTIAL
    return SchemeKind.REJECTIVE_REJECTION


def replication_stream(master_seed: int, replication: int) -> np.random.Generator:
    if not (0 <= master_seed < 2**64):
        raise DesignError("Master seed must be a 64-bit unsigned integer.")
    if replication < 0:
        raise DesignError("Replication index must be non-negative.")
    return np.random.Generator(np.random.Philox(key=master_seed, counter=replication << 128))


def poisson_draw(p, rng: np.random.Generator, seed_trace: str = "") -> SampleDraw:
    p = np.asarray(p, dtype=np.float64)
    return SampleDraw(rng.random(p.size) < p, seed_trace=seed_trace)


def rejective_draw_rejection(p, n: int, rng: np.random.Generator, seed_trace: str = "",
                             cap: Optional[int] = None) -> SampleDraw:
    """Redraw Poisson samples until the size equals n."""
    p = np.asarray(p, dtype=np.float64)
    cap = cap or setting("SAMPLING_REJECTION_CAP", 1_000_000)
    rounds = 0
    batch = 8
    while rounds < cap:
        batch = min(batch, cap - rounds)
        block = rng.random((batch, p.size)) < p
        hits = np.flatnonzero(block.sum(axis=1) == n)
        if hits.size:
            first = int(hits[0])
            return SampleDraw(block[first], seed_trace=seed_trace, rounds=rounds + first + 1)
        rounds += batch
        batch = min(2 * batch, MAX_BATCH)
    raise RoundCapError("rejective-rejection", rounds)


@cached(LRUCache(maxsize=64), key=lambda weights, n: hashkey(weights.fingerprint(), n))
def _sequential_table(weights: DesignWeights, n: int) -> tuple:
    """Conditional inclusion probabilities q[i][r] = p_i B_{i+1..}(r-1) / B_{i..}(r)."""
    p = weights.probs
    suffix = suffix_log_tables(p)
    size = p.size
    log_p = np.log(p)
    r = np.arange(1, n + 1)
    q = np.zeros((size, n + 1))
    with np.errstate(invalid="ignore"):
        for i in range(size):
            q[i, 1:] = np.exp(log_p[i] + suffix[i + 1, r - 1] - suffix[i, r])
    q = np.nan_to_num(q, nan=0.0)
    return tuple(tuple(row) for row in q.tolist())


def rejective_draw_sequential(p, n: int, rng: np.random.Generator, seed_trace: str = "") -> SampleDraw:
    """One pass over the units keeping the remaining quota; same law as the rejection sampler."""
    weights = p if isinstance(p, DesignWeights) else DesignWeights(p, WeightKind.CANONICAL)
    table = _sequential_table(weights, n)
    size = weights.size
    u = rng.random(size).tolist()
    chosen = []
    remaining = n
    for i in range(size):
        if remaining == 0:
            break
        if size - i == remaining:
            chosen.extend(range(i, size))
            break
        q = table[i][remaining]
        if q < -PROBABILITY_GUARD or q > 1.0 + PROBABILITY_GUARD:
            raise DesignError(f"Sequential sampler: conditional probability {q!r} at unit {i} is outside [0,1].")
        if u[i] < q:
            chosen.append(i)
            remaining -= 1
    return SampleDraw.from_selected(size, chosen, seed_trace=seed_trace)


def swor_draw(size: int, n: int, rng: np.random.Generator, seed_trace: str = "") -> SampleDraw:
    if not (0 < n <= size):
        raise DesignError(f"SWOR needs 0 < n <= N (got n={n}, N={size}).")
    return SampleDraw.from_selected(size, rng.choice(size, size=n, replace=False), seed_trace=seed_trace)


def rao_sampford_draw(pi, n: int, rng: np.random.Generator, seed_trace: str = "",
                      cap: Optional[int] = None) -> SampleDraw:
    """First unit with probability pi_i/n, then n-1 draws prop. to pi_i/(1-pi_i); restart on a repeat."""
    pi = np.asarray(pi, dtype=np.float64)
    cap = cap or setting("SAMPLING_REJECTION_CAP", 1_000_000)
    first_probs = pi / pi.sum()
    odds = pi / (1.0 - pi)
    rest_probs = odds / odds.sum()
    for rounds in range(1, cap + 1):
        first = rng.choice(pi.size, p=first_probs)
        rest = rng.choice(pi.size, size=n - 1, p=rest_probs)
        units = np.append(rest, first)
        if np.unique(units).size == n:
            return SampleDraw.from_selected(pi.size, units, seed_trace=seed_trace, rounds=rounds)
    raise RoundCapError("rao-sampford", cap)


def draw(spec: SchemeSpec, rng: np.random.Generator, seed_trace: str = "") -> SampleDraw:
    kind = spec.kind
    if kind is SchemeKind.POISSON:
        return poisson_draw(spec.probs, rng, seed_trace)
    if kind is SchemeKind.REJECTIVE_REJECTION:
        return rejective_draw_rejection(spec.probs, spec.sample_size, rng, seed_trace)
    if kind is SchemeKind.REJECTIVE_SEQUENTIAL:
        return rejective_draw_sequential(spec.weights, spec.sample_size, rng, seed_trace)
    if kind is SchemeKind.SWOR:
        return swor_draw(spec.population_size, spec.sample_size, rng, seed_trace)
    return rao_sampford_draw(spec.probs, spec.sample_size, rng, seed_trace)


def draw_replication(spec: SchemeSpec, master_seed: int, replication: int) -> SampleDraw:
    return draw(spec, replication_stream(master_seed, replication), f"{master_seed}:{replication}")


def sampler_for(spec: SchemeSpec) -> Callable[[int, int], SampleDraw]:
    """Reusable (master_seed, replication) -> draw callable with tables warmed up."""
    if spec.kind is SchemeKind.REJECTIVE_SEQUENTIAL:
        _sequential_table(spec.weights, spec.sample_size)

    def _draw(master_seed: int, replication: int) -> SampleDraw:
        return draw_replication(spec, master_seed, replication)

    return _draw
