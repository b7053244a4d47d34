"""Finite population, design weights and sample draws.

Everything here is immutable once built: arrays are copied and flagged
read-only, so instances can be shared freely between threads and processes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Sequence, TextIO, Tuple

import numpy as np

from .errors import DesignError, PopulationFormatError

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-9


def _frozen(values: Iterable[float], dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


class WeightKind(str, Enum):
    FIRST_ORDER = "pi"
    CANONICAL = "p"


@dataclass(frozen=True)
class Population:
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 1 or values.size == 0:
            raise PopulationFormatError("A population needs at least one unit.")
        if not np.all(np.isfinite(values)):
            raise PopulationFormatError("Population values must be finite (no NaN/Inf).")
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def total(self) -> float:
        return total(self)

    def mean(self) -> float:
        return self.total() / self.size


@dataclass(frozen=True)
class DesignWeights:
    probs: np.ndarray
    kind: WeightKind
    target_size: Optional[int] = None

    def __post_init__(self):
        probs = _frozen(self.probs)
        kind = WeightKind(self.kind)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "kind", kind)
        if probs.ndim != 1 or probs.size == 0:
            raise DesignError("Design weights must be a non-empty vector.")
        finite = bool(np.all(np.isfinite(probs)))
        if kind is WeightKind.CANONICAL and (not finite or np.any(probs <= 0.0) or np.any(probs >= 1.0)):
            raise DesignError("Canonical p must lie in (0,1).")
        if not finite or np.any(probs <= 0.0) or np.any(probs > 1.0):
            raise DesignError("Design weights must lie in (0,1].")
        if self.target_size is not None and kind is WeightKind.CANONICAL:
            gap = abs(math.fsum(probs) - self.target_size)
            if gap > SUM_TOLERANCE:
                raise DesignError(
                    f"Canonical weights must sum to n={self.target_size} (off by {gap:.3e})."
                )

    @property
    def size(self) -> int:
        return int(self.probs.size)

    def dN(self) -> float:
        """Variance of the Poisson sample size, sum of w_i(1 - w_i)."""
        return math.fsum(self.probs * (1.0 - self.probs))

    def with_target(self, n: int) -> "DesignWeights":
        return DesignWeights(self.probs, self.kind, n)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.value.encode())
        h.update(str(self.target_size).encode())
        h.update(np.ascontiguousarray(self.probs).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SampleDraw:
    indicators: np.ndarray
    selected: Tuple[int, ...] = field(default=())
    seed_trace: str = ""
    rounds: int = 1

    def __post_init__(self):
        ind = _frozen(self.indicators, dtype=bool)
        object.__setattr__(self, "indicators", ind)
        object.__setattr__(self, "selected", tuple(int(i) for i in np.flatnonzero(ind)))

    @classmethod
    def from_selected(cls, size: int, selected: Sequence[int], seed_trace: str = "", rounds: int = 1) -> "SampleDraw":
        ind = np.zeros(size, dtype=bool)
        ind[list(selected)] = True
        return cls(ind, seed_trace=seed_trace, rounds=rounds)

    @property
    def sample_size(self) -> int:
        return len(self.selected)

    def mask(self) -> int:
        return sum(1 << i for i in self.selected)


def total(pop: Population) -> float:
    """Exact-as-possible S_N (compensated summation)."""
    return math.fsum(pop.values.tolist())


def load_population(stream: TextIO) -> Tuple[Population, Dict[WeightKind, DesignWeights]]:
    from .serializers import PopulationRowSerializer

    reader = csv.DictReader(stream)
    header = [h.strip().lstrip("\ufeff") for h in (reader.fieldnames or [])]
    if not header:
        raise PopulationFormatError("Empty population file.")
    unknown = set(header) - {"x", "pi", "p"}
    if unknown:
        raise PopulationFormatError(f"Unknown column(s): {', '.join(sorted(unknown))}.")
    if "x" not in header:
        raise PopulationFormatError("Missing required column 'x'.")
    reader.fieldnames = header

    columns = {name: [] for name in header}
    for line_no, row in enumerate(reader, start=2):
        serializer = PopulationRowSerializer(data={k: (v or "").strip() for k, v in row.items() if k in columns})
        if not serializer.is_valid():
            field_name, messages = next(iter(serializer.errors.items()))
            raise PopulationFormatError(f"Line {line_no}, column '{field_name}': {messages[0]}")
        for name in header:
            columns[name].append(serializer.validated_data[name])

    if not columns["x"]:
        raise PopulationFormatError("Population file has a header but no rows.")

    pop = Population(columns["x"])
    weights = {}
    if "pi" in columns:
        weights[WeightKind.FIRST_ORDER] = DesignWeights(columns["pi"], WeightKind.FIRST_ORDER)
    if "p" in columns:
        weights[WeightKind.CANONICAL] = DesignWeights(columns["p"], WeightKind.CANONICAL)
    logger.debug("Loaded population N=%d with weight columns %s", pop.size, [k.value for k in weights])
    return pop, weights


def save_population(stream: TextIO, pop: Population, weights: Sequence[DesignWeights] = ()) -> None:
    """Write `x[,pi][,p]`; floats use repr so a reload is bit-exact."""
    by_kind = {w.kind: w for w in weights}
    cols = [("x", pop.values)]
    for kind in (WeightKind.FIRST_ORDER, WeightKind.CANONICAL):
        if kind in by_kind:
            if by_kind[kind].size != pop.size:
                raise DesignError(f"Column '{kind.value}' has {by_kind[kind].size} rows, expected {pop.size}.")
            cols.append((kind.value, by_kind[kind].probs))
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow([name for name, _ in cols])
    for i in range(pop.size):
        writer.writerow([repr(float(values[i])) for _, values in cols])


def population_from_text(text: str) -> Tuple[Population, Dict[WeightKind, DesignWeights]]:
    return load_population(io.StringIO(text))
