"""Replicated experiments checking sampling designs against exact laws and tail bounds.

Replication r always draws from the Philox stream (master_seed, r), and blocks
of replications are reduced in replication order, so a report depends on the
configuration alone and not on the worker count.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from scipy.stats import beta
from tqdm import tqdm

from .bounds import BoundKind, bound_curve, bound_exponent, confidence_radius, evaluate, poisson_tail_bound
from .conf import setting
from .errors import DesignError, EnumerationCapError
from .estimators import (
    VarianceProfile,
    fixed_size_variance,
    ht_total,
    p_weighted_target,
    poisson_ht_variance,
    swor_sigma2,
    variance_profile,
)
from .exact import PlanTable, enumerate_plan, exact_covariance, exact_tail_curve, plan_from_masks, tv_distance
from .poisson_binomial import first_order_inclusion, local_limit_ratio, second_order_inclusion, solve_canonical
from .population import Population, SampleDraw
from .schemes import SchemeKind, SchemeSpec, draw_replication

logger = logging.getLogger(__name__)

CHECKS = (
    "unbiasedness",
    "pathwise-bias",
    "local-limit",
    "variance-identity",
    "inclusion-oracle",
    "sampler-law",
    "envelope",
    "calibration",
    "crossover",
    "coverage",
    "na-covariance",
)

SE_LIMIT = 4.0
MIN_REPS_FOR_MEAN = 30
LOCAL_LIMIT_MIN_DN = 25.0
LOCAL_LIMIT_TOL = 0.1
IDENTITY_TOL = 1e-10
SWOR_TOL = 1e-12
ORACLE_TOL = 1e-10
SAMPLER_LAW_TOL = 0.02
SAMPLER_LAW_MIN_REPS = 100_000
SAMPLER_LAW_MAX_SUPPORT = 20
NA_EXACT_MAX_N = 10
SLOW_REJECTION_ROUNDS = 1_000
SECOND_ORDER_MAX_N = 400
FLOAT_SLACK = 1e-12

ProbePartition = Tuple[Tuple[int, ...], Tuple[int, ...]]


def default_thresholds(profile: VarianceProfile, count: int = 21) -> Tuple[float, ...]:
    """0 to four NA standard deviations, linearly spaced."""
    top = 4.0 * math.sqrt(profile.na_var) if profile.na_var > 0 else 1.0
    return tuple(np.linspace(0.0, top, count).tolist())


def grid_from_spec(spec: Tuple[float, float, int]) -> Tuple[float, ...]:
    lo, hi, count = spec
    return tuple(np.linspace(lo, hi, count).tolist())


def default_partitions(size: int) -> Tuple[ProbePartition, ...]:
    """Even against odd units, and the first two units on their own."""
    if size < 2:
        return ()
    evens = tuple(range(0, size, 2))
    odds = tuple(range(1, size, 2))
    return ((evens, odds), ((0,), (1,)))


@dataclass(frozen=True)
class ExperimentConfig:
    scheme: SchemeSpec
    population: Population
    replications: int
    thresholds: Tuple[float, ...]
    master_seed: int
    checks: FrozenSet[str] = frozenset(CHECKS)
    confidence_level: Optional[float] = None
    delta: float = 0.05
    constant_C: Optional[float] = None
    constant_D: Optional[float] = None
    partitions: Optional[Tuple[ProbePartition, ...]] = None
    workers: Optional[int] = None
    block_size: Optional[int] = None
    label: str = ""

    def __post_init__(self):
        if self.replications < 1:
            raise DesignError("An experiment needs at least one replication.")
        grid = tuple(float(t) for t in self.thresholds)
        if not grid:
            raise DesignError("The threshold grid is empty.")
        if any(b < a for a, b in zip(grid, grid[1:])) or not all(math.isfinite(t) for t in grid):
            raise DesignError("The threshold grid must be finite and sorted ascending.")
        object.__setattr__(self, "thresholds", grid)
        checks = frozenset(CHECKS if self.checks is None else self.checks)
        unknown = checks - set(CHECKS)
        if unknown:
            raise DesignError(f"Unknown check(s): {', '.join(sorted(unknown))}.")
        object.__setattr__(self, "checks", checks)
        level = setting("SAMPLING_CONFIDENCE_LEVEL", 0.95) if self.confidence_level is None else self.confidence_level
        if not (0.0 < level < 1.0):
            raise DesignError("The confidence level must lie in (0,1).")
        object.__setattr__(self, "confidence_level", float(level))
        if not (0.0 < self.delta < 1.0):
            raise DesignError("delta must lie in (0,1).")
        if not (0 <= self.master_seed < 2**64):
            raise DesignError("Master seed must be a 64-bit unsigned integer.")
        if self.population.size != self.scheme.population_size:
            raise DesignError(
                f"Population has {self.population.size} units but the scheme is over {self.scheme.population_size}."
            )
        if self.partitions is None:
            object.__setattr__(self, "partitions", default_partitions(self.population.size))
        if not self.label:
            object.__setattr__(self, "label", self.scheme.kind.value)


@dataclass(frozen=True)
class Design:
    """Canonical p and first-order pi of the scheme, plus its fixed size if any."""
    p: np.ndarray
    pi: np.ndarray
    n: Optional[int]


def resolve_design(spec: SchemeSpec) -> Design:
    kind = spec.kind
    if kind is SchemeKind.POISSON:
        return Design(spec.probs, spec.probs, None)
    n = spec.sample_size
    if kind.rejective:
        return Design(spec.probs, first_order_inclusion(spec.probs, n), n)
    if kind is SchemeKind.SWOR:
        return Design(spec.probs, spec.probs, n)
    return Design(solve_canonical(spec.probs, n).p, spec.probs, n)


@dataclass(frozen=True)
class TailEstimate:
    t: float
    events: int
    reps: int
    estimate: float
    cp_lower: float
    cp_upper: float


def clopper_pearson(events, reps: int, level: float) -> Tuple[np.ndarray, np.ndarray]:
    """Exact two-sided binomial limits at the given level."""
    events = np.asarray(events, dtype=np.int64)
    alpha = 1.0 - level
    lower = np.where(events > 0, beta.ppf(alpha / 2.0, np.maximum(events, 1), reps - events + 1), 0.0)
    upper = np.where(events < reps, beta.ppf(1.0 - alpha / 2.0, events + 1, np.maximum(reps - events, 1)), 1.0)
    return lower, upper


def tail_estimates(deviations, thresholds, level: Optional[float] = None) -> List[TailEstimate]:
    """Empirical P{D > t} with Clopper-Pearson limits, for each t."""
    level = setting("SAMPLING_CONFIDENCE_LEVEL", 0.95) if level is None else level
    values = np.sort(np.asarray(deviations, dtype=np.float64))
    reps = int(values.size)
    if reps < 1:
        raise DesignError("Tail estimates need at least one replication.")
    grid = np.asarray(thresholds, dtype=np.float64)
    events = reps - np.searchsorted(values, grid, side="right")
    lower, upper = clopper_pearson(events, reps, level)
    return [
        TailEstimate(float(t), int(k), reps, k / reps, float(lo), float(hi))
        for t, k, lo, hi in zip(grid.tolist(), events.tolist(), lower.tolist(), upper.tolist())
    ]


def empirical_tail(draws: Iterable[SampleDraw], pop: Population, weights, thresholds, reps: int,
                   level: Optional[float] = None) -> List[TailEstimate]:
    """Tail of HT - S_N over the first `reps` draws of a stream."""
    if reps < 1:
        raise DesignError("reps must be at least 1.")
    s_n = pop.total()
    devs = [ht_total(pop, weights, d) - s_n for d in itertools.islice(draws, reps)]
    if len(devs) < reps:
        raise DesignError(f"Draw stream ended after {len(devs)} of {reps} replications.")
    return tail_estimates(devs, thresholds, level)


def draw_stream(spec: SchemeSpec, master_seed: int, start: int = 0) -> Iterator[SampleDraw]:
    for replication in itertools.count(start):
        yield draw_replication(spec, master_seed, replication)


@dataclass(frozen=True)
class _BlockTask:
    spec: SchemeSpec
    ratio_pi: np.ndarray
    ratio_gap: np.ndarray
    master_seed: int
    start: int
    stop: int
    partitions: Tuple[ProbePartition, ...]
    keep_masks: bool


@dataclass(frozen=True)
class Simulation:
    ht_pi: np.ndarray
    gap: np.ndarray
    sizes: np.ndarray
    rounds: np.ndarray
    masks: Optional[np.ndarray]
    probe_values: np.ndarray

    @property
    def ht_p(self) -> np.ndarray:
        return self.ht_pi - self.gap

    @property
    def replications(self) -> int:
        return int(self.ht_pi.size)


def _probe_columns(ind: np.ndarray, partitions) -> np.ndarray:
    rows = ind.shape[0]
    if not partitions:
        return np.zeros((rows, 0, 2))
    cols = []
    for first, second in partitions:
        s1 = ind[:, list(first)].sum(axis=1)
        s2 = ind[:, list(second)].sum(axis=1)
        cols.append(np.stack([s1, s2], axis=1))
        cols.append(np.stack([s1 > 0, s2 > 0], axis=1))
    return np.stack(cols, axis=1).astype(np.float64)


def _run_block(task: _BlockTask):
    draws = [draw_replication(task.spec, task.master_seed, r) for r in range(task.start, task.stop)]
    ind = np.array([d.indicators for d in draws], dtype=bool)
    weights = ind.astype(np.float64)
    masks = np.array([d.mask() for d in draws], dtype=np.int64) if task.keep_masks else None
    return (
        weights @ task.ratio_pi,
        weights @ task.ratio_gap,
        ind.sum(axis=1),
        np.array([d.rounds for d in draws], dtype=np.int64),
        masks,
        _probe_columns(ind, task.partitions),
    )


def simulate(spec: SchemeSpec, pop: Population, design: Design, master_seed: int, reps: int,
             partitions: Sequence[ProbePartition] = (), workers: Optional[int] = None,
             block_size: Optional[int] = None, keep_masks: bool = False,
             progress: Optional[bool] = None) -> Simulation:
    """Draw `reps` replications in blocks, optionally across processes."""
    workers = workers or setting("SAMPLING_WORKERS", 1)
    block_size = block_size or setting("SAMPLING_BLOCK_SIZE", 5_000)
    progress = setting("SAMPLING_PROGRESS", False) if progress is None else progress
    x = pop.values
    ratio_pi = x / design.pi
    ratio_gap = ratio_pi - x / design.p
    tasks = [
        _BlockTask(spec, ratio_pi, ratio_gap, master_seed, start, min(start + block_size, reps),
                   tuple(partitions), keep_masks)
        for start in range(0, reps, block_size)
    ]
    bar = dict(total=len(tasks), desc=spec.kind.value, unit="block", file=sys.stderr,
               disable=not (progress and sys.stderr.isatty()))
    if workers == 1 or len(tasks) == 1:
        results = [_run_block(task) for task in tqdm(tasks, **bar)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_run_block, tasks), **bar))

    ht_pi, gap, sizes, rounds, masks, probes = zip(*results)
    return Simulation(
        ht_pi=np.concatenate(ht_pi),
        gap=np.concatenate(gap),
        sizes=np.concatenate(sizes),
        rounds=np.concatenate(rounds),
        masks=np.concatenate(masks) if keep_masks else None,
        probe_values=np.concatenate(probes),
    )


@dataclass(frozen=True)
class ProbeResult:
    name: str
    estimate: float
    std_error: float
    exact: Optional[float]
    flagged: bool


def _probe_names(partitions) -> List[str]:
    names = []
    for first, second in partitions:
        tag = f"{_block_label(first)}|{_block_label(second)}"
        names.extend([f"sum[{tag}]", f"any[{tag}]"])
    return names


def _block_label(units: Sequence[int]) -> str:
    if len(units) <= 3:
        return ",".join(str(u) for u in units)
    return f"{units[0]},{units[1]},...,{units[-1]}({len(units)})"


def _exact_probe(plan: PlanTable, first, second, kind: str) -> float:
    first, second = list(first), list(second)
    if kind == "sum":
        return exact_covariance(plan, lambda e: e[:, first].sum(axis=1), lambda e: e[:, second].sum(axis=1))
    return exact_covariance(plan, lambda e: e[:, first].any(axis=1), lambda e: e[:, second].any(axis=1))


def _probe_results(values: np.ndarray, partitions, plan: Optional[PlanTable]) -> List[ProbeResult]:
    names = _probe_names(partitions)
    reps = values.shape[0]
    out = []
    for k, name in enumerate(names):
        f, g = values[:, k, 0], values[:, k, 1]
        products = (f - f.mean()) * (g - g.mean())
        estimate = float(products.sum() / max(reps - 1, 1))
        se = float(products.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
        first, second = partitions[k // 2]
        exact = None
        if plan is not None and plan.population_size <= NA_EXACT_MAX_N:
            exact = _exact_probe(plan, first, second, "sum" if k % 2 == 0 else "any")
        flagged = estimate > SE_LIMIT * se if se > 0 else estimate > FLOAT_SLACK
        out.append(ProbeResult(name, estimate, se, exact, flagged))
    return out


def na_covariance_probe(spec: SchemeSpec, reps: int, partitions: Optional[Sequence[ProbePartition]] = None,
                        master_seed: Optional[int] = None, workers: Optional[int] = None) -> List[ProbeResult]:
    """Empirical covariances of increasing functions over disjoint unit blocks."""
    if reps < 1:
        raise DesignError("reps must be at least 1.")
    master_seed = setting("SAMPLING_MASTER_SEED", 20240101) if master_seed is None else master_seed
    partitions = default_partitions(spec.population_size) if partitions is None else tuple(partitions)
    for first, second in partitions:
        if set(first) & set(second):
            raise DesignError("Probe blocks must be disjoint.")
    pop = Population(np.zeros(spec.population_size))
    sim = simulate(spec, pop, Design(spec.probs, spec.probs, spec.sample_size), master_seed, reps,
                   partitions, workers)
    return _probe_results(sim.probe_values, partitions, _try_enumerate(spec))


def calibrate_constant(profile: VarianceProfile, estimates: Sequence[TailEstimate],
                       kind: BoundKind = BoundKind.REJECTIVE_BERNSTEIN) -> float:
    """Smallest C with C * kernel(t) >= Clopper-Pearson upper limit wherever events were seen."""
    ratios = [0.0]
    kernels = np.atleast_1d(evaluate(kind, profile, [e.t for e in estimates], C=1.0))
    for estimate, kernel in zip(estimates, kernels.tolist()):
        if estimate.events == 0:
            continue
        ratios.append(math.inf if kernel <= 0.0 else estimate.cp_upper / kernel)
    return max(ratios)


def crossover_point(profile: VarianceProfile, thresholds) -> Optional[float]:
    """First grid t past which the rejective exponent beats the NA exponent at every later t."""
    grid = np.asarray(thresholds, dtype=np.float64)
    above = np.atleast_1d(
        bound_exponent(BoundKind.REJECTIVE_BERNSTEIN, profile, grid)
        > bound_exponent(BoundKind.NA_BERNSTEIN, profile, grid)
    )
    if not above[-1]:
        return None
    below = np.flatnonzero(~above)
    return float(grid[below[-1] + 1]) if below.size else float(grid[0])


@dataclass(frozen=True)
class CheckResult:
    check: str
    name: str
    value: object
    asserted: bool = False
    passed: Optional[bool] = None
    t: Optional[float] = None


@dataclass(frozen=True)
class TailRow:
    t: float
    empirical: float
    events: int
    cp_lower: float
    cp_upper: float
    exact: Optional[float]
    bounds: Dict[str, float]
    envelope: Optional[bool]
    p_empirical: Optional[float] = None
    p_cp_upper: Optional[float] = None


@dataclass
class VerificationReport:
    label: str
    scheme: str
    population_size: int
    sample_size: Optional[int]
    replications: int
    master_seed: int
    tail_rows: List[TailRow] = field(default_factory=list)
    results: List[CheckResult] = field(default_factory=list)

    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if r.asserted and not r.passed]

    @property
    def passed(self) -> bool:
        return not self.failures()

    def records(self) -> Iterator[Tuple[str, Optional[float], str, object, bool, Optional[bool]]]:
        for row in self.tail_rows:
            yield "tail", row.t, "empirical", row.empirical, False, None
            yield "tail", row.t, "events", row.events, False, None
            yield "tail", row.t, "cp_lower", row.cp_lower, False, None
            yield "tail", row.t, "cp_upper", row.cp_upper, False, None
            if row.exact is not None:
                yield "tail", row.t, "exact", row.exact, False, None
            if row.p_empirical is not None:
                yield "tail", row.t, "p_empirical", row.p_empirical, False, None
                yield "tail", row.t, "p_cp_upper", row.p_cp_upper, False, None
            for kind, value in row.bounds.items():
                yield "tail", row.t, kind, value, False, None
            yield "tail", row.t, "envelope", row.envelope, False, None
        for r in self.results:
            yield r.check, r.t, r.name, r.value, r.asserted, r.passed


class _Ledger:
    def __init__(self):
        self.results: List[CheckResult] = []

    def note(self, check: str, name: str, value, t: Optional[float] = None) -> None:
        self.results.append(CheckResult(check, name, value, t=t))

    def require(self, check: str, name: str, value, condition: bool, t: Optional[float] = None) -> None:
        self.results.append(CheckResult(check, name, value, True, bool(condition), t))
        if not condition:
            logger.warning("Check %s/%s failed%s: %r", check, name, "" if t is None else f" at t={t!r}", value)

    def skip(self, check: str, reason: str) -> None:
        self.note(check, "skipped", reason)


@dataclass
class _Context:
    config: ExperimentConfig
    design: Design
    profile: VarianceProfile
    sim: Simulation
    plan: Optional[PlanTable]
    s_n: float
    ledger: _Ledger
    tail_pi: List[TailEstimate] = field(default_factory=list)
    tail_p: List[TailEstimate] = field(default_factory=list)
    tail_rows: List[TailRow] = field(default_factory=list)

    @property
    def kind(self) -> SchemeKind:
        return self.config.scheme.kind

    @property
    def uses_rejective_bounds(self) -> bool:
        return self.kind.rejective or self.kind is SchemeKind.SWOR

    @property
    def two_weightings(self) -> bool:
        return self.kind.rejective or self.kind is SchemeKind.RAO_SAMPFORD


def _try_enumerate(spec: SchemeSpec) -> Optional[PlanTable]:
    try:
        return enumerate_plan(spec)
    except EnumerationCapError as exc:
        logger.debug("No exact plan for %s: %s", spec.kind.value, exc)
        return None


def _check_unbiasedness(ctx: _Context) -> None:
    ledger, sim = ctx.ledger, ctx.sim
    reps = sim.replications
    mean = math.fsum(sim.ht_pi.tolist()) / reps
    se = float(np.std(sim.ht_pi, ddof=1)) / math.sqrt(reps) if reps > 1 else 0.0
    ledger.note("unbiasedness", "mean_ht", mean)
    ledger.note("unbiasedness", "total", ctx.s_n)
    ledger.note("unbiasedness", "std_error", se)
    gap = abs(mean - ctx.s_n)
    if se > 0.0:
        z = gap / se
    else:
        z = 0.0 if gap <= 1e-9 * max(1.0, abs(ctx.s_n)) else math.inf
    if reps >= MIN_REPS_FOR_MEAN:
        ledger.require("unbiasedness", "z_score", z, z <= SE_LIMIT)
    else:
        ledger.note("unbiasedness", "z_score", z)
    if ctx.two_weightings:
        target = p_weighted_target(ctx.config.population, ctx.design.p, ctx.design.pi)
        ledger.note("unbiasedness", "mean_ht_p", math.fsum(sim.ht_p.tolist()) / reps)
        ledger.note("unbiasedness", "p_weighted_target", target)
    if ctx.plan is not None:
        probs = ctx.plan.probabilities
        ratio = ctx.config.population.values / ctx.design.pi
        expected = math.fsum((probs * ctx.plan.linear_statistic(ratio)).tolist())
        gap = abs(expected - ctx.s_n)
        ledger.require("unbiasedness", "exact_mean_gap", gap, gap <= 1e-9 * max(1.0, abs(ctx.s_n)))


def _check_pathwise_bias(ctx: _Context) -> None:
    ledger = ctx.ledger
    if not ctx.two_weightings:
        ledger.skip("pathwise-bias", "pi and p coincide for this scheme")
        return
    gap = np.abs(ctx.sim.gap)
    m_n = ctx.profile.M_N
    violations = int(np.count_nonzero(gap > m_n * (1.0 + 1e-9)))
    ledger.note("pathwise-bias", "M_N", m_n)
    ledger.note("pathwise-bias", "max_gap", float(gap.max()))
    if ctx.profile.d_N >= 1.0:
        ledger.require("pathwise-bias", "violations", violations, violations == 0)
    else:
        ledger.note("pathwise-bias", "violations", violations)


def _check_local_limit(ctx: _Context) -> None:
    ledger, p = ctx.ledger, ctx.design.p
    total_p = math.fsum(p.tolist())
    n = ctx.design.n if ctx.design.n is not None else int(round(total_p))
    ratio = local_limit_ratio(p, n)
    d_n = ctx.profile.d_N
    ledger.note("local-limit", "d_N", d_n)
    on_mean = abs(total_p - n) <= 1e-9
    if d_n >= LOCAL_LIMIT_MIN_DN and on_mean:
        ledger.require("local-limit", "ratio", ratio, abs(ratio - 1.0) <= LOCAL_LIMIT_TOL)
    else:
        ledger.note("local-limit", "ratio", ratio)
    if ctx.kind is SchemeKind.POISSON:
        ledger.note("local-limit", "empirical_size_frequency", float(np.mean(ctx.sim.sizes == n)))


def _theoretical_variance(ctx: _Context) -> Optional[float]:
    pop, design = ctx.config.population, ctx.design
    if ctx.kind is SchemeKind.POISSON:
        return poisson_ht_variance(pop, design.p)
    if ctx.kind is SchemeKind.SWOR:
        size = pop.size
        return swor_sigma2(pop, design.n) * size / (size - 1) if size > 1 else 0.0
    if ctx.kind.rejective and pop.size <= SECOND_ORDER_MAX_N and design.n < pop.size:
        return fixed_size_variance(pop, design.pi, second_order_inclusion(design.p, design.n))
    return None


def _check_variance_identity(ctx: _Context) -> None:
    ledger, profile = ctx.ledger, ctx.profile
    residual = profile.decomposition_residual()
    ledger.require("variance-identity", "decomposition_residual", residual, residual <= IDENTITY_TOL)
    ledger.note("variance-identity", "sigma2_N", profile.sigma2_N)
    ledger.note("variance-identity", "theta_N", profile.theta_N)
    if ctx.kind is SchemeKind.SWOR:
        closed = swor_sigma2(ctx.config.population, ctx.design.n)
        rel = abs(closed - profile.sigma2_N) / max(abs(profile.sigma2_N), np.finfo(float).tiny)
        ledger.require("variance-identity", "swor_closed_form_gap", rel, rel <= SWOR_TOL)
    if ctx.sim.replications > 1:
        ledger.note("variance-identity", "empirical_variance", float(np.var(ctx.sim.ht_pi, ddof=1)))
    theory = _theoretical_variance(ctx)
    if theory is not None:
        ledger.note("variance-identity", "design_variance", theory)


def _check_inclusion_oracle(ctx: _Context) -> None:
    ledger = ctx.ledger
    if ctx.plan is None:
        ledger.skip("inclusion-oracle", "design too large to enumerate")
        return
    first = ctx.plan.marginals()
    gap = float(np.max(np.abs(first - ctx.design.pi)))
    ledger.require("inclusion-oracle", "first_order_gap", gap, gap <= ORACLE_TOL)
    if ctx.design.n is not None:
        size_gap = abs(math.fsum(ctx.design.pi.tolist()) - ctx.design.n)
        ledger.require("inclusion-oracle", "size_gap", size_gap, size_gap <= 1e-9)
        if ctx.kind.rejective and ctx.design.n < ctx.plan.population_size:
            second = second_order_inclusion(ctx.design.p, ctx.design.n)
            gap2 = float(np.max(np.abs(ctx.plan.pair_marginals() - second)))
            ledger.require("inclusion-oracle", "second_order_gap", gap2, gap2 <= ORACLE_TOL)


def _other_rejective(spec: SchemeSpec) -> SchemeSpec:
    other = (SchemeKind.REJECTIVE_SEQUENTIAL if spec.kind is SchemeKind.REJECTIVE_REJECTION
             else SchemeKind.REJECTIVE_REJECTION)
    return SchemeSpec(other, spec.weights, spec.sample_size)


def _check_sampler_law(ctx: _Context) -> None:
    """Empirical subset law against the exact plan; rejective designs run both samplers."""
    ledger, config = ctx.ledger, ctx.config
    if ctx.plan is None or ctx.sim.masks is None:
        ledger.skip("sampler-law", "design too large to enumerate")
        return
    size = ctx.plan.population_size
    ledger.note("sampler-law", "support_size", len(ctx.plan))
    assert_law = ctx.sim.replications >= SAMPLER_LAW_MIN_REPS and len(ctx.plan) <= SAMPLER_LAW_MAX_SUPPORT
    runs = [(config.scheme.kind, ctx.sim)]
    if ctx.kind.rejective:
        other = _other_rejective(config.scheme)
        # second sampler on its own key so the two runs are independent
        seed = (config.master_seed + 1) % 2**64
        runs.append((other.kind, simulate(other, config.population, ctx.design, seed, config.replications,
                                          workers=config.workers, block_size=config.block_size,
                                          keep_masks=True)))
    plans = []
    for kind, sim in runs:
        empirical = plan_from_masks(sim.masks, size)
        plans.append(empirical)
        name = "l1_distance" if len(runs) == 1 else f"l1_distance[{kind.value}]"
        l1 = tv_distance(empirical, ctx.plan)
        if assert_law:
            ledger.require("sampler-law", name, l1, l1 <= SAMPLER_LAW_TOL)
        else:
            ledger.note("sampler-law", name, l1)
        rounds = float(np.mean(sim.rounds))
        ledger.note("sampler-law", "mean_rounds" if len(runs) == 1 else f"mean_rounds[{kind.value}]", rounds)
        if rounds > SLOW_REJECTION_ROUNDS:
            logger.warning("Rejection sampler needs %.0f rounds per draw on average.", rounds)
    if len(plans) == 2:
        between = tv_distance(plans[0], plans[1])
        if assert_law:
            ledger.require("sampler-law", "l1_between_samplers", between, between <= SAMPLER_LAW_TOL)
        else:
            ledger.note("sampler-law", "l1_between_samplers", between)


def _asserted_kinds(ctx: _Context) -> List[BoundKind]:
    kinds = [BoundKind.NA_BENNETT, BoundKind.NA_BERNSTEIN]
    if ctx.kind is SchemeKind.POISSON:
        kinds = [BoundKind.POISSON_BENNETT, BoundKind.POISSON_BERNSTEIN] + kinds
    return kinds


def _check_envelope(ctx: _Context) -> None:
    config, ledger = ctx.config, ctx.ledger
    grid = np.asarray(config.thresholds)
    asserted = _asserted_kinds(ctx)
    reported = [BoundKind.REJECTIVE_BENNETT, BoundKind.REJECTIVE_BERNSTEIN,
                BoundKind.HT_PI_BENNETT, BoundKind.HT_PI_BERNSTEIN] if ctx.uses_rejective_bounds else []
    curves = {
        kind: bound_curve(kind, ctx.profile, grid, config.constant_C, config.constant_D)
        for kind in asserted + reported
    }
    for kind in reported:
        for flag in curves[kind].flags:
            ledger.note("envelope", f"{kind.value}.flag", flag)
    exact = exact_tail_curve(ctx.plan, config.population, ctx.design.pi, grid) if ctx.plan is not None else None
    misses = 0
    for j, est in enumerate(ctx.tail_pi):
        values = {kind.value: float(curves[kind].values[j]) for kind in asserted + reported}
        envelope = None
        if est.events > 0:
            checks = [values[k.value] >= est.cp_upper - FLOAT_SLACK for k in asserted]
            for kind, ok in zip(asserted, checks):
                ledger.require("envelope", f"{kind.value}>=cp_upper", values[kind.value], ok, est.t)
            envelope = all(checks)
        exact_t = None
        if exact is not None:
            exact_t = float(exact[j])
            for kind in asserted:
                ledger.require("envelope", f"{kind.value}>=exact", values[kind.value],
                               values[kind.value] >= exact_t - FLOAT_SLACK, est.t)
            misses += not (est.cp_lower - FLOAT_SLACK <= exact_t <= est.cp_upper + FLOAT_SLACK)
        p_est = ctx.tail_p[j] if ctx.tail_p else None
        ctx.tail_rows.append(TailRow(
            t=est.t, empirical=est.estimate, events=est.events, cp_lower=est.cp_lower, cp_upper=est.cp_upper,
            exact=exact_t, bounds=values, envelope=envelope,
            p_empirical=p_est.estimate if p_est else None, p_cp_upper=p_est.cp_upper if p_est else None,
        ))
    if exact is not None:
        ledger.note("envelope", "exact_outside_cp", misses)


def _check_calibration(ctx: _Context) -> None:
    ledger = ctx.ledger
    if not ctx.uses_rejective_bounds:
        ledger.skip("calibration", "no rejective bound for this scheme")
        return
    for kind in (BoundKind.REJECTIVE_BENNETT, BoundKind.REJECTIVE_BERNSTEIN):
        ledger.note("calibration", f"{kind.value}.C", calibrate_constant(ctx.profile, ctx.tail_p, kind))
    for kind in (BoundKind.HT_PI_BENNETT, BoundKind.HT_PI_BERNSTEIN):
        ledger.note("calibration", f"{kind.value}.C", calibrate_constant(ctx.profile, ctx.tail_pi, kind))


def _check_crossover(ctx: _Context) -> None:
    ledger, profile = ctx.ledger, ctx.profile
    if not ctx.uses_rejective_bounds:
        ledger.skip("crossover", "no rejective bound for this scheme")
        return
    regime = profile.theta_N**2 * profile.d_N >= 0.5 * profile.poisson_var
    ledger.note("crossover", "mean_shift_dominates", regime)
    ledger.note("crossover", "t_crossover", crossover_point(profile, ctx.config.thresholds))


def _check_coverage(ctx: _Context) -> None:
    ledger, config = ctx.ledger, ctx.config
    if ctx.kind is not SchemeKind.POISSON:
        ledger.skip("coverage", "coverage is checked for Poisson designs")
        return
    radius = confidence_radius(lambda t: poisson_tail_bound(ctx.profile, t, "bernstein"), config.delta / 2.0)
    covered = float(np.mean(np.abs(ctx.sim.ht_pi - ctx.s_n) <= radius))
    ledger.note("coverage", "radius", radius)
    ledger.require("coverage", "rate", covered, covered >= 1.0 - config.delta)


def _check_na_covariance(ctx: _Context) -> None:
    ledger = ctx.ledger
    if not ctx.config.partitions:
        ledger.skip("na-covariance", "fewer than two units")
        return
    for probe in _probe_results(ctx.sim.probe_values, ctx.config.partitions, ctx.plan):
        ledger.note("na-covariance", f"{probe.name}.std_error", probe.std_error)
        ledger.require("na-covariance", f"{probe.name}.estimate", probe.estimate, not probe.flagged)
        if probe.exact is not None:
            ledger.require("na-covariance", f"{probe.name}.exact", probe.exact, probe.exact <= FLOAT_SLACK)


_RUNNERS = {
    "unbiasedness": _check_unbiasedness,
    "pathwise-bias": _check_pathwise_bias,
    "local-limit": _check_local_limit,
    "variance-identity": _check_variance_identity,
    "inclusion-oracle": _check_inclusion_oracle,
    "sampler-law": _check_sampler_law,
    "envelope": _check_envelope,
    "calibration": _check_calibration,
    "crossover": _check_crossover,
    "coverage": _check_coverage,
    "na-covariance": _check_na_covariance,
}

_NEEDS_PLAN = {"unbiasedness", "inclusion-oracle", "sampler-law", "envelope", "na-covariance"}


def run_experiment(config: ExperimentConfig) -> VerificationReport:
    spec, pop = config.scheme, config.population
    design = resolve_design(spec)
    profile = variance_profile(pop, p=design.p, pi=design.pi)
    plan = _try_enumerate(spec) if config.checks & _NEEDS_PLAN else None
    partitions = config.partitions if "na-covariance" in config.checks else ()
    logger.info("Experiment %s: scheme=%s N=%d n=%s reps=%d seed=%d",
                config.label, spec.kind.value, pop.size, design.n, config.replications, config.master_seed)

    sim = simulate(spec, pop, design, config.master_seed, config.replications, partitions,
                   config.workers, config.block_size,
                   keep_masks=plan is not None and "sampler-law" in config.checks)
    s_n = pop.total()
    ctx = _Context(config, design, profile, sim, plan, s_n, _Ledger())
    ctx.tail_pi = tail_estimates(sim.ht_pi - s_n, config.thresholds, config.confidence_level)
    if ctx.two_weightings or ctx.uses_rejective_bounds:
        target = p_weighted_target(pop, design.p, design.pi)
        ctx.tail_p = tail_estimates(sim.ht_p - target, config.thresholds, config.confidence_level)

    for name in CHECKS:
        if name in config.checks:
            _RUNNERS[name](ctx)

    report = VerificationReport(
        label=config.label,
        scheme=spec.kind.value,
        population_size=pop.size,
        sample_size=design.n,
        replications=config.replications,
        master_seed=config.master_seed,
        tail_rows=ctx.tail_rows,
        results=ctx.ledger.results,
    )
    logger.info("Experiment %s finished: %s (%d asserted, %d failed)", config.label,
                "pass" if report.passed else "fail",
                sum(r.asserted for r in report.results), len(report.failures()))
    return report


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def report_to_csv(reports: Sequence[VerificationReport], stream: TextIO) -> None:
    """Long format, one row per (design, check, t, quantity)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["design", "check", "t", "name", "value", "asserted", "passed"])
    for report in reports:
        for check, t, name, value, asserted, passed in report.records():
            writer.writerow([report.label, check, _fmt(t), name, _fmt(value), _fmt(asserted), _fmt(passed)])


def report_summary(reports: Sequence[VerificationReport], stream: TextIO) -> None:
    """key=value lines; per-t quantities stay in the CSV."""
    lines = []
    for report in reports:
        prefix = report.label
        lines += [
            f"{prefix}.scheme={report.scheme}",
            f"{prefix}.N={report.population_size}",
            f"{prefix}.n={_fmt(report.sample_size)}",
            f"{prefix}.replications={report.replications}",
            f"{prefix}.master_seed={report.master_seed}",
        ]
        for r in report.results:
            if r.t is None:
                lines.append(f"{prefix}.{r.check}.{r.name}={_fmt(r.value)}")
        per_t = [r for r in report.results if r.asserted and r.t is not None]
        if per_t:
            lines.append(f"{prefix}.per_threshold.asserted={len(per_t)}")
            lines.append(f"{prefix}.per_threshold.failed={sum(not r.passed for r in per_t)}")
        lines.append(f"{prefix}.asserted={sum(r.asserted for r in report.results)}")
        lines.append(f"{prefix}.failed={len(report.failures())}")
        lines.append(f"{prefix}.status={'pass' if report.passed else 'fail'}")
    overall = all(r.passed for r in reports)
    lines.append(f"status={'pass' if overall else 'fail'}")
    stream.write("\n".join(lines) + "\n")
