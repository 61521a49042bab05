"""
Monte Carlo harness: common-random-number simulation, paired ratio
estimation, structural property checks and the lower-bound sweep.

Replications are simulated in blocks of `settings.block_size`. Block b draws
from three independent streams seeded with SeedSequence([master_seed, b, s]):
s = 0 arrivals, s = 1 preferred draws, s = 2 fallback ranks. Since arrivals
never depend on the policy, every policy sees the same sequences, and since
blocks are merged in block order the output does not depend on `jobs`.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import norm

from matching.config import settings
from matching.dispatch import POLICIES, PreferenceTable, simulate_block
from matching.errors import DimensionError, InstanceValidationError, UndefinedRatioError
from matching.instance import ExpectationGraph, ProbabilityLike, generate_lower_bound_instance, parse_probability, sample_sequences
from matching.oracle import CountOptimum, ExactExpectation, exact_dispatch_expectation, exact_opt_expectation
from matching.transport import FlowSolution, solution_violations, solve_tpp

logger = logging.getLogger(__name__)

EXACT_TOLERANCE = 1e-9
FAMILY_ALPHA = 0.0027


@dataclass
class SimulationResult:
    policy: str
    trials: int
    master_seed: int
    values: np.ndarray
    opt_values: Optional[np.ndarray] = None
    types: Optional[np.ndarray] = None
    preferred: Optional[np.ndarray] = None
    assigned: Optional[np.ndarray] = None


def block_generators(master_seed: int, block: int) -> Tuple[np.random.Generator, ...]:
    """Arrival, preferred-draw and fallback-rank generators of one block."""
    return tuple(np.random.default_rng(np.random.SeedSequence([master_seed, block, stream])) for stream in range(3))


def _simulate_block_task(task: Tuple[Any, ...]) -> Dict[str, np.ndarray]:
    instance, table, policy, master_seed, block, size, with_opt, record = task
    arrivals, preferred_rng, fallback_rng = block_generators(master_seed, block)
    n = instance.n
    types = sample_sequences(instance, arrivals, size)
    totals = np.asarray(table.totals, dtype=np.int64)
    preferred_draws = preferred_rng.integers(0, totals[types])
    fallback_ranks = fallback_rng.integers(0, np.arange(n, 0, -1, dtype=np.int64), size=(size, n))
    outcome = simulate_block(instance, table, types, preferred_draws, fallback_ranks, policy)

    part = {"values": outcome.values}
    if with_opt:
        optimum = CountOptimum(instance)
        opt_values = np.empty(size)
        for b, row in enumerate(types):
            opt_values[b] = optimum(np.bincount(row, minlength=instance.k))
        part["opt_values"] = opt_values
    if record:
        part["types"] = types.astype(np.int32)
        part["preferred"] = outcome.preferred.astype(np.int32)
        part["assigned"] = outcome.assigned.astype(np.int32)
    return part


def simulate(
    instance: ExpectationGraph,
    policy: str,
    trials: int,
    master_seed: int,
    *,
    flow: Optional[FlowSolution] = None,
    jobs: int = 1,
    with_opt: bool = False,
    record_traces: bool = False,
    block_size: Optional[int] = None,
    strict: bool = True,
) -> SimulationResult:
    """
    Simulates `trials` i.i.d. realizations under one policy.

    Args:
        instance: A valid expectation graph.
        policy: 'dispatch', 'greedy' or 'uniform'.
        trials: Number of replications, at least 1.
        master_seed: Seed of the whole experiment.
        flow: Flow for the preferred draws; solved when omitted.
        jobs: Worker processes; results are identical for every value.
        with_opt: Also compute OPT of every realization.
        record_traces: Keep (trials, n) arrays of types, preferred and assigned workers.
        block_size: Replications per block; defaults to the configured value.
        strict: Reject a supplied flow that is infeasible for the instance.

    Returns:
        A SimulationResult in replication order.
    """
    if trials < 1:
        raise ValueError(f"trials must be at least 1, got {trials}")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy '{policy}', expected one of {sorted(POLICIES)}")
    instance.require_valid()
    if flow is None:
        flow = solve_tpp(instance)
    elif flow.n != instance.n or flow.k != instance.k:
        raise DimensionError(f"flow is {flow.n} x {flow.k}, instance is {instance.n} x {instance.k}")
    elif strict:
        problems = solution_violations(instance, flow)
        if problems:
            raise InstanceValidationError(problems)

    table = PreferenceTable(flow)
    size = block_size or settings.block_size
    blocks = math.ceil(trials / size)
    tasks = [
        (instance, table, policy, master_seed, b, min(size, trials - b * size), with_opt, record_traces)
        for b in range(blocks)
    ]
    logger.info(f"Simulating {trials} trials of '{policy}' in {blocks} blocks with {jobs} job(s)")
    if jobs > 1 and blocks > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            parts = list(executor.map(_simulate_block_task, tasks))
    else:
        parts = [_simulate_block_task(task) for task in tasks]

    def merged(key: str) -> Optional[np.ndarray]:
        if key not in parts[0]:
            return None
        return np.concatenate([part[key] for part in parts])

    return SimulationResult(
        policy=policy,
        trials=trials,
        master_seed=master_seed,
        values=merged("values"),
        opt_values=merged("opt_values"),
        types=merged("types"),
        preferred=merged("preferred"),
        assigned=merged("assigned"),
    )


class RatioEstimate(BaseModel):
    model_config = ConfigDict(frozen=True)

    policy: str = Field(description="Policy that produced ALG.")
    alg_mean: float = Field(description="Estimate of E[ALG].")
    opt_mean: float = Field(description="Estimate of E[OPT] on the same realizations.")
    alg_se: float = Field(description="Standard error of alg_mean.")
    opt_se: float = Field(description="Standard error of opt_mean.")
    covariance: float = Field(description="Sample covariance of the paired (ALG, OPT) values.")
    ratio: float = Field(description="alg_mean / opt_mean.")
    ratio_ci: Tuple[float, float] = Field(description="Delta-method confidence interval of the ratio.")
    z: float = Field(description="Normal quantile used for the interval.")
    trials: int
    master_seed: int


def _sample_moments(alg: np.ndarray, opt: np.ndarray) -> Tuple[float, float, float, float, float]:
    count = len(alg)
    alg_mean = math.fsum(alg) / count
    opt_mean = math.fsum(opt) / count
    if count < 2:
        return alg_mean, opt_mean, 0.0, 0.0, 0.0
    da = alg - alg_mean
    do = opt - opt_mean
    var_alg = math.fsum(da * da) / (count - 1)
    var_opt = math.fsum(do * do) / (count - 1)
    covariance = math.fsum(da * do) / (count - 1)
    return alg_mean, opt_mean, var_alg, var_opt, covariance


def paired_ratio(
    policy: str, alg: np.ndarray, opt: np.ndarray, master_seed: int, confidence: float = 0.95
) -> RatioEstimate:
    """
    Ratio of paired means with a delta-method interval.

    Raises:
        UndefinedRatioError: If the OPT mean is zero.
    """
    count = len(alg)
    alg_mean, opt_mean, var_alg, var_opt, covariance = _sample_moments(alg, opt)
    if opt_mean <= 0:
        raise UndefinedRatioError("E[OPT] estimate is zero; the competitive ratio is undefined")
    ratio = alg_mean / opt_mean
    variance = (
        var_alg / opt_mean**2 - 2 * alg_mean * covariance / opt_mean**3 + alg_mean**2 * var_opt / opt_mean**4
    ) / count
    z = float(norm.ppf(0.5 + confidence / 2))
    half_width = z * math.sqrt(max(variance, 0.0))
    return RatioEstimate(
        policy=policy,
        alg_mean=alg_mean,
        opt_mean=opt_mean,
        alg_se=math.sqrt(var_alg / count),
        opt_se=math.sqrt(var_opt / count),
        covariance=covariance,
        ratio=ratio,
        ratio_ci=(ratio - half_width, ratio + half_width),
        z=z,
        trials=count,
        master_seed=master_seed,
    )


def estimate_ratio(
    instance: ExpectationGraph,
    policy: str,
    trials: int,
    master_seed: int,
    *,
    flow: Optional[FlowSolution] = None,
    jobs: int = 1,
    confidence: float = 0.95,
) -> RatioEstimate:
    """E[ALG] / E[OPT] estimated on common realizations."""
    result = simulate(instance, policy, trials, master_seed, flow=flow, jobs=jobs, with_opt=True)
    estimate = paired_ratio(policy, result.values, result.opt_values, master_seed, confidence)
    logger.info(f"Ratio for '{policy}': {estimate.ratio} CI {estimate.ratio_ci}")
    return estimate


class LemmaCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    lemma: str = Field(description="Property under test.")
    mode: str = Field(description="'empirical' or 'exact'.")
    statistic: str = Field(description="What `observed` measures.")
    observed: float
    expected: float
    tolerance: float
    passed: bool
    detail: str = ""


class LemmaReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    trials: int
    master_seed: int
    checks: List[LemmaCheck]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failures(self) -> List[LemmaCheck]:
        return [check for check in self.checks if not check.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([check.model_dump() for check in self.checks], columns=list(LemmaCheck.model_fields))


def _worst(values: np.ndarray, targets: np.ndarray) -> Tuple[float, float, float]:
    """(observed, expected, |deviation|) of the cell farthest from its target."""
    deviation = np.abs(values - targets)
    index = np.unravel_index(int(np.argmax(deviation)), deviation.shape)
    return float(values[index]), float(targets[index]), float(deviation[index])


def _assignment_uniformity(
    assigned: np.ndarray, n: int, min_group: int, set_max_n: int
) -> Tuple[np.ndarray, int, int, str]:
    """z-scores of every tested (time, condition, worker) cell."""
    trials = assigned.shape[0]
    scores: List[np.ndarray] = []
    skipped = 0
    if n <= set_max_n:
        bits = np.left_shift(np.int64(1), assigned.astype(np.int64))
        before = ((1 << n) - 1) - (np.cumsum(bits, axis=1) - bits)
        steps = np.broadcast_to(np.arange(n), assigned.shape)
        keep = steps < n - 1
        frame = pd.DataFrame({"t": steps[keep], "group": before[keep], "assigned": assigned[keep]})
        totals = frame.groupby(["t", "group"]).size()
        counts = frame.groupby(["t", "group", "assigned"]).size()
        for (t, group), total in totals.items():
            if total < min_group:
                skipped += 1
                continue
            members = [w for w in range(n) if group >> w & 1]
            m = len(members)
            observed = np.array([counts.get((t, group, w), 0) for w in members]) / total
            se = math.sqrt((1 / m) * (1 - 1 / m) / total)
            scores.append((observed - 1 / m) / se)
        condition = "exact available set"
    else:
        position = np.empty_like(assigned)
        position[np.arange(trials)[:, None], assigned] = np.arange(n)[None, :]
        for t in range(n - 1):
            m = n - t
            present = (position >= t).sum(axis=0)
            hits = np.bincount(assigned[:, t], minlength=n)
            tested = present >= min_group
            skipped += int((~tested).sum())
            se = np.sqrt((1 / m) * (1 - 1 / m) / present[tested])
            scores.append((hits[tested] / present[tested] - 1 / m) / se)
        condition = "availability of the worker"
    flat = np.concatenate(scores) if scores else np.empty(0)
    return flat, int(flat.size), skipped, condition


def check_lemmas(
    instance: ExpectationGraph,
    trials: int,
    master_seed: int,
    *,
    flow: Optional[FlowSolution] = None,
    jobs: int = 1,
    preferred_tolerance: float = 0.005,
    availability_tolerance: float = 0.01,
) -> LemmaReport:
    """
    Checks the structural properties DISPATCH relies on.

    Empirical checks run on `trials` simulated realizations; exact checks use
    the availability-set DP when n is within its bound. A supplied flow is
    used as-is, even if infeasible, so that corrupted flows can serve as
    negative controls.

    Returns:
        A LemmaReport; failures are report content, not exceptions.
    """
    instance.require_valid()
    if flow is None:
        flow = solve_tpp(instance)
    n, k = instance.n, instance.k
    result = simulate(instance, "dispatch", trials, master_seed, flow=flow, jobs=jobs, record_traces=True, strict=False)
    types = result.types.astype(np.int64)
    preferred = result.preferred.astype(np.int64)
    assigned = result.assigned.astype(np.int64)
    f = flow.flow_matrix
    checks: List[LemmaCheck] = []

    frequencies = np.bincount(preferred.ravel(), minlength=n) / preferred.size
    observed, expected, deviation = _worst(frequencies, np.full(n, 1 / n))
    checks.append(LemmaCheck(
        lemma="preferred_uniformity", mode="empirical", statistic="preferred frequency of the worst worker",
        observed=observed, expected=expected, tolerance=preferred_tolerance,
        passed=deviation <= preferred_tolerance, detail=f"{preferred.size} draws pooled over all steps",
    ))
    row_sums = flow.row_sums()
    row_error = max(abs(float(s - 1)) for s in row_sums)
    checks.append(LemmaCheck(
        lemma="preferred_uniformity", mode="exact", statistic="largest |row sum - 1| of the flow",
        observed=row_error, expected=0.0, tolerance=0.0, passed=all(s == 1 for s in row_sums),
        detail="row sums compared as exact rationals",
    ))

    scores, cells, skipped, condition = _assignment_uniformity(
        assigned, n, settings.min_group_count, settings.lemma_set_max_n
    )
    critical = max(3.0, float(norm.isf(FAMILY_ALPHA / (2 * cells)))) if cells else 3.0
    worst_score = float(np.abs(scores).max()) if cells else 0.0
    if skipped:
        logger.warning(f"Assignment uniformity skipped {skipped} cells below {settings.min_group_count} observations")
    checks.append(LemmaCheck(
        lemma="assignment_uniformity", mode="empirical", statistic="largest |z| over tested cells",
        observed=worst_score, expected=0.0, tolerance=critical, passed=worst_score <= critical,
        detail=f"conditioned on {condition}; {cells} cells tested, {skipped} skipped",
    ))

    position = np.empty_like(assigned)
    position[np.arange(trials)[:, None], assigned] = np.arange(n)[None, :]
    availability = np.stack([(position >= t).mean(axis=0) for t in range(n)])
    targets = np.repeat(((n - np.arange(n)) / n)[:, None], n, axis=1)
    observed, expected, deviation = _worst(availability, targets)
    checks.append(LemmaCheck(
        lemma="availability_uniformity", mode="empirical", statistic="P(w in AW_t) of the worst (t, w)",
        observed=observed, expected=expected, tolerance=availability_tolerance,
        passed=deviation <= availability_tolerance,
    ))

    matched_type = np.take_along_axis(types, position, axis=1)
    edge_counts = np.zeros((n, k))
    np.add.at(edge_counts, (np.broadcast_to(np.arange(n), matched_type.shape), matched_type), 1)
    edge_frequency = edge_counts / trials
    positive = f > 0
    se = np.sqrt(edge_frequency * (1 - edge_frequency) / trials)
    margin = (edge_frequency - 0.5 * f + 3 * se)[positive]
    checks.append(LemmaCheck(
        lemma="edge_bound", mode="empirical", statistic="min of P(I_wj=1) - f/2 + 3 SE",
        observed=float(margin.min()) if margin.size else 0.0, expected=0.0, tolerance=0.0,
        passed=bool((margin >= 0).all()),
    ))

    if n <= settings.exact_dp_max_n:
        checks.extend(_exact_checks(instance, flow, f))
    else:
        logger.warning(f"n={n} exceeds the DP bound {settings.exact_dp_max_n}; exact checks skipped")

    report = LemmaReport(trials=trials, master_seed=master_seed, checks=checks)
    logger.info(f"Lemma checks: {sum(c.passed for c in checks)}/{len(checks)} passed")
    return report


def _exact_checks(instance: ExpectationGraph, flow: FlowSolution, f: np.ndarray) -> List[LemmaCheck]:
    n = instance.n
    dp = exact_dispatch_expectation(instance, flow)
    checks = []

    assigned_mass = dp.step_edge_probabilities.sum(axis=2)
    observed, expected, deviation = _worst(assigned_mass, np.full((n, n), 1 / n))
    checks.append(LemmaCheck(
        lemma="assignment_uniformity", mode="exact", statistic="P(W^A_t = w) of the worst (t, w)",
        observed=observed, expected=expected, tolerance=EXACT_TOLERANCE, passed=deviation <= EXACT_TOLERANCE,
    ))

    targets = np.repeat(((n - np.arange(n)) / n)[:, None], n, axis=1)
    observed, expected, deviation = _worst(dp.availability, targets)
    checks.append(LemmaCheck(
        lemma="availability_uniformity", mode="exact", statistic="P(w in AW_t) of the worst (t, w)",
        observed=observed, expected=expected, tolerance=EXACT_TOLERANCE, passed=deviation <= EXACT_TOLERANCE,
    ))

    positive = f > 0
    bounds = [
        ("edge_bound", "min of P(I_wj=1) - f/2", dp.edge_probabilities - 0.5 * f),
        ("edge_bound_sharp", "min of P(I_wj=1) - (n+1)/(2n) f", dp.edge_probabilities - (n + 1) / (2 * n) * f),
    ]
    for lemma, statistic, gap in bounds:
        margin = float(gap[positive].min()) if positive.any() else 0.0
        checks.append(LemmaCheck(
            lemma=lemma, mode="exact", statistic=statistic, observed=margin, expected=0.0,
            tolerance=EXACT_TOLERANCE, passed=margin >= -EXACT_TOLERANCE,
        ))

    per_step = (n - np.arange(n))[:, None, None] / n**2 * f[None, :, :]
    gap = (dp.step_edge_probabilities - per_step)[:, positive]
    margin = float(gap.min()) if gap.size else 0.0
    checks.append(LemmaCheck(
        lemma="edge_bound_per_step", mode="exact", statistic="min of P(I^t_wj=1) - (n-t+1)/n^2 f",
        observed=margin, expected=0.0, tolerance=EXACT_TOLERANCE, passed=margin >= -EXACT_TOLERANCE,
    ))
    return checks


class InequalityCheck(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    left: float
    right: float
    passed: bool


class ExactSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    tpp: float = Field(description="TPP(G), the transportation optimum.")
    dispatch_value: float = Field(description="Exact E[DISPATCH].")
    dispatch_exact: Optional[str] = Field(default=None, description="E[DISPATCH] as a fraction; rational DP only.")
    rational: bool = Field(default=False, description="Whether E[DISPATCH] came from the rational DP.")
    opt_value: float = Field(description="Exact E[OPT].")
    ratio: Optional[float] = Field(description="E[DISPATCH] / E[OPT]; None when E[OPT] = 0.")
    inequalities: List[InequalityCheck]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.inequalities)


def exact_summary(
    instance: ExpectationGraph,
    flow: Optional[FlowSolution] = None,
    *,
    rational: bool = False,
    max_n: Optional[int] = None,
    dispatch: Optional[ExactExpectation] = None,
) -> ExactSummary:
    """
    TPP, exact E[DISPATCH], exact E[OPT] and the chain E[DISPATCH] >= TPP/2 >= E[OPT]/2.

    Args:
        instance: A valid expectation graph.
        flow: Flow guiding DISPATCH; solved when omitted.
        rational: Run the Fraction DP and report its exact value.
        max_n: DP size bound; the configured bound for the mode when omitted.
        dispatch: A DP result already computed for this flow.

    Raises:
        CapacityError: If n exceeds the DP bound.
    """
    if flow is None:
        flow = solve_tpp(instance)
    if dispatch is None:
        dispatch = exact_dispatch_expectation(instance, flow, rational=rational, max_n=max_n)
    dispatch_value = dispatch.value
    opt_value = exact_opt_expectation(instance).value
    tpp = flow.objective
    pairs = [
        ("E[DISPATCH] >= TPP/2", dispatch_value, 0.5 * tpp),
        ("TPP/2 >= E[OPT]/2", 0.5 * tpp, 0.5 * opt_value),
        ("E[DISPATCH] >= E[OPT]/2", dispatch_value, 0.5 * opt_value),
    ]
    return ExactSummary(
        tpp=tpp,
        dispatch_value=dispatch_value,
        dispatch_exact=None if dispatch.exact_value is None else str(dispatch.exact_value),
        rational=dispatch.rational,
        opt_value=opt_value,
        ratio=dispatch_value / opt_value if opt_value > 0 else None,
        inequalities=[
            InequalityCheck(name=name, left=left, right=right, passed=left >= right - EXACT_TOLERANCE)
            for name, left, right in pairs
        ],
    )


def lower_bound_closed_forms(n: int, p: ProbabilityLike) -> Dict[str, float]:
    """
    Analytic values for the lower-bound family.

    Returns:
        opt_closed_form n(1 - (1 - p/n)^n), online_upper_bound p(n+1)/2,
        ratio_upper_bound (their quotient) and ratio_limit p / (2(1 - e^-p)).
    """
    p = float(parse_probability(p))
    opt = n * -math.expm1(n * math.log1p(-p / n))
    online = 0.5 * p * (n + 1)
    return {
        "opt_closed_form": opt,
        "online_upper_bound": online,
        "ratio_upper_bound": online / opt,
        "ratio_limit": 0.5 * p / -math.expm1(-p),
    }


def theorem2_sweep(
    n_values: Sequence[int],
    p_values: Sequence[ProbabilityLike],
    trials: int,
    master_seed: int,
    *,
    jobs: int = 1,
) -> pd.DataFrame:
    """
    Estimates the DISPATCH ratio on the lower-bound family for every (n, p).

    Returns:
        One row per (n, p) with the paired estimate, the analytic columns and
        `within_bound` (alg_mean <= p(n+1)/2 + 3 alg_se).
    """
    if not n_values or not p_values:
        raise ValueError("n_values and p_values must be non-empty")
    rows = []
    for n in n_values:
        for p in p_values:
            exact_p = parse_probability(p)
            instance = generate_lower_bound_instance(n, exact_p)
            estimate = estimate_ratio(instance, "dispatch", trials, master_seed, jobs=jobs)
            closed = lower_bound_closed_forms(n, exact_p)
            rows.append({
                "n": n,
                "p": float(exact_p),
                "p_exact": str(exact_p),
                "trials": trials,
                "alg_mean": estimate.alg_mean,
                "alg_se": estimate.alg_se,
                "opt_mean": estimate.opt_mean,
                "opt_se": estimate.opt_se,
                "ratio": estimate.ratio,
                "ratio_lo": estimate.ratio_ci[0],
                "ratio_hi": estimate.ratio_ci[1],
                **closed,
                "within_bound": estimate.alg_mean <= closed["online_upper_bound"] + 3 * estimate.alg_se,
            })
            logger.info(f"Sweep n={n}, p={exact_p}: ratio {estimate.ratio}")
    return pd.DataFrame(rows)
