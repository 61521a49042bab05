"""
The DISPATCH online policy and its baselines.

Each arriving job of type j draws a preferred worker w with probability
f*_wj / r_j from the optimal transportation flow. If that worker is still
available it takes the job, otherwise a uniformly random available worker
does. Greedy and uniform baselines share the same state and trace types.
"""
import bisect
import itertools
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from matching.errors import (
    DimensionError,
    InstanceValidationError,
    InvalidArrivalError,
    SequenceExhaustedError,
)
from matching.instance import ArrivalSequence, ExpectationGraph, Matching
from matching.transport import FlowSolution, solution_violations

logger = logging.getLogger(__name__)

ForcedDraw = Tuple[int, Optional[int]]


class PreferenceTable:
    """
    Exact integer sampling tables for the preferred-worker draw.

    The weights of type j are the flow numerators F[:, j]; q_j(w) is
    F[w, j] / sum_w F[w, j]. A uniform integer in [0, total_j) located with
    bisect against the integer CDF reproduces q_j exactly.
    """

    def __init__(self, flow: FlowSolution):
        self.n = flow.n
        self.k = flow.k
        self.weights: List[Tuple[int, ...]] = [tuple(column) for column in zip(*flow.flow_numerators)]
        self.cumulative: List[List[int]] = [list(itertools.accumulate(column)) for column in self.weights]
        self.totals: List[int] = [column[-1] for column in self.cumulative]

    def total(self, job_type: int) -> int:
        return self.totals[job_type]

    def locate(self, job_type: int, draw: int) -> int:
        """Worker whose CDF interval contains `draw`."""
        return bisect.bisect_right(self.cumulative[job_type], draw)

    def probability(self, job_type: int, worker: int) -> Fraction:
        total = self.totals[job_type]
        if total == 0:
            raise InvalidArrivalError(f"type {job_type + 1} has no flow to sample from")
        return Fraction(self.weights[job_type][worker], total)

    def cumulative_matrix(self) -> np.ndarray:
        """(k, n) int64 matrix of per-type cumulative weights."""
        return np.array(self.cumulative, dtype=np.int64).reshape(self.k, self.n)


class AssignmentEvent(BaseModel):
    """One online step. Worker and type indices are 0-based; `t` counts from 1."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    t: int = Field(description="Time step, 1..n.")
    job_type: int = Field(description="Type of the arriving job.")
    available: Tuple[int, ...] = Field(description="Workers available before the assignment, ascending.")
    preferred: int = Field(description="Preferred worker W^P_t.")
    preferred_available: bool = Field(description="Whether the preferred worker was still available.")
    assigned: int = Field(description="Assigned worker W^A_t.")
    utility: float = Field(description="Utility of the assigned edge.")
    preferred_probability: Optional[Fraction] = Field(default=None, description="Exact probability of drawing the preferred worker.")

    def to_json_dict(self) -> Dict[str, object]:
        return {
            "t": self.t,
            "job_type": self.job_type + 1,
            "available": [w + 1 for w in self.available],
            "preferred": self.preferred + 1,
            "preferred_available": self.preferred_available,
            "assigned": self.assigned + 1,
            "utility": self.utility,
            "preferred_probability": None if self.preferred_probability is None else str(self.preferred_probability),
        }


@dataclass
class DispatchState:
    """Mutable online state; single owner."""

    instance: ExpectationGraph
    flow: FlowSolution
    table: PreferenceTable
    rng: np.random.Generator
    available: List[int] = field(default_factory=list)
    step: int = 1
    events: List[AssignmentEvent] = field(default_factory=list)

    @property
    def remaining(self) -> int:
        return len(self.available)

    def _check_arrival(self, job_type: int) -> None:
        if self.step > self.instance.n:
            raise SequenceExhaustedError(f"all {self.instance.n} workers are already assigned")
        if not 0 <= job_type < self.instance.k:
            raise InvalidArrivalError(f"job type {job_type + 1} is outside 1..{self.instance.k}")
        if self.instance.numerators[job_type] == 0:
            raise InvalidArrivalError(f"job type {job_type + 1} has probability 0")

    def _commit(self, job_type: int, preferred: int, assigned: int, probability: Optional[Fraction]) -> AssignmentEvent:
        event = AssignmentEvent(
            t=self.step,
            job_type=job_type,
            available=tuple(self.available),
            preferred=preferred,
            preferred_available=preferred in self.available,
            assigned=assigned,
            utility=float(self.instance.utilities[assigned][job_type]),
            preferred_probability=probability,
        )
        self.available.remove(assigned)
        self.step += 1
        self.events.append(event)
        return event


def new_dispatcher(instance: ExpectationGraph, flow: FlowSolution, seed: int, strict: bool = True) -> DispatchState:
    """
    Creates the online state for one realization.

    Args:
        instance: The expectation graph.
        flow: Flow guiding the preferred draws, normally the solve_tpp optimum.
        seed: Seed of the state's random stream.
        strict: Reject flows whose marginals differ from the instance.

    Raises:
        DimensionError: If the flow shape does not match the instance.
        InstanceValidationError: If strict and the flow is infeasible.
    """
    if flow.n != instance.n or flow.k != instance.k:
        raise DimensionError(f"flow is {flow.n} x {flow.k}, instance is {instance.n} x {instance.k}")
    if strict:
        problems = solution_violations(instance, flow)
        if problems:
            raise InstanceValidationError(problems)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    return DispatchState(
        instance=instance,
        flow=flow,
        table=PreferenceTable(flow),
        rng=rng,
        available=list(range(instance.n)),
    )


def step(state: DispatchState, job_type: int, forced: Optional[ForcedDraw] = None) -> AssignmentEvent:
    """
    Serves one arrival with DISPATCH.

    Args:
        state: Online state, updated in place.
        job_type: Type of the arriving job (0-based).
        forced: Optional (preferred, fallback) workers replacing both random
            draws; fallback may be None when the preferred worker is free.

    Returns:
        The AssignmentEvent of this step.

    Raises:
        SequenceExhaustedError: If n jobs have already been served.
        InvalidArrivalError: If the type is out of range or has p_j = 0.
    """
    state._check_arrival(job_type)
    total = state.table.total(job_type)
    if total == 0:
        raise InvalidArrivalError(f"job type {job_type + 1} receives no flow")

    if forced is None:
        # Both draws are always consumed so streams stay aligned across steps
        draw = int(state.rng.integers(0, total))
        rank = int(state.rng.integers(0, state.remaining))
        preferred = state.table.locate(job_type, draw)
        fallback = state.available[rank]
    else:
        preferred, fallback = forced
        if not 0 <= preferred < state.instance.n:
            raise ValueError(f"forced preferred worker {preferred + 1} is outside 1..{state.instance.n}")

    probability = state.table.probability(job_type, preferred)
    if preferred in state.available:
        assigned = preferred
    else:
        if fallback is None or fallback not in state.available:
            raise ValueError(f"forced fallback worker {fallback} is not available at step {state.step}")
        assigned = fallback
    return state._commit(job_type, preferred, assigned, probability)


def greedy_step(state: DispatchState, job_type: int) -> AssignmentEvent:
    """Highest-utility available worker; ties go to the lowest index."""
    state._check_arrival(job_type)
    utilities = state.instance.utilities
    assigned = max(state.available, key=lambda w: (utilities[w][job_type], -w))
    return state._commit(job_type, assigned, assigned, None)


def uniform_step(state: DispatchState, job_type: int) -> AssignmentEvent:
    state._check_arrival(job_type)
    total = state.table.total(job_type)
    if total > 0:
        state.rng.integers(0, total)
    assigned = state.available[int(state.rng.integers(0, state.remaining))]
    return state._commit(job_type, assigned, assigned, None)


def _play(
    instance: ExpectationGraph,
    flow: FlowSolution,
    seed: int,
    sequence: ArrivalSequence,
    serve: Callable[[DispatchState, int], AssignmentEvent],
) -> Tuple[Matching, List[AssignmentEvent]]:
    sequence.validate_for(instance)
    state = new_dispatcher(instance, flow, seed)
    for job_type in sequence.types:
        serve(state, job_type)
    assignment = [event.assigned for event in state.events]
    return Matching.build(instance, sequence, assignment), list(state.events)


def run(
    instance: ExpectationGraph,
    flow: FlowSolution,
    seed: int,
    sequence: ArrivalSequence,
    forced: Optional[Sequence[ForcedDraw]] = None,
) -> Tuple[Matching, List[AssignmentEvent]]:
    """
    Runs DISPATCH over a whole arrival sequence.

    Args:
        instance: The expectation graph.
        flow: Optimal transportation flow for the instance.
        seed: Seed of the random stream; ignored for forced steps.
        sequence: Arrivals j_1..j_n.
        forced: Optional per-step (preferred, fallback) draws.

    Returns:
        The perfect matching and the trace of AssignmentEvents.
    """
    if forced is None:
        return _play(instance, flow, seed, sequence, step)
    if len(forced) != len(sequence):
        raise DimensionError(f"{len(forced)} forced draws for {len(sequence)} arrivals")
    draws = iter(forced)
    return _play(instance, flow, seed, sequence, lambda state, j: step(state, j, next(draws)))


def greedy_policy(
    instance: ExpectationGraph, flow: FlowSolution, seed: int, sequence: ArrivalSequence
) -> Tuple[Matching, List[AssignmentEvent]]:
    return _play(instance, flow, seed, sequence, greedy_step)


def uniform_policy(
    instance: ExpectationGraph, flow: FlowSolution, seed: int, sequence: ArrivalSequence
) -> Tuple[Matching, List[AssignmentEvent]]:
    return _play(instance, flow, seed, sequence, uniform_step)


POLICIES: Dict[str, Callable[..., Tuple[Matching, List[AssignmentEvent]]]] = {
    "dispatch": run,
    "greedy": greedy_policy,
    "uniform": uniform_policy,
}


@dataclass
class BlockResult:
    """Vectorised outcome of B replications; arrays are (B, n) except values."""

    preferred: np.ndarray
    assigned: np.ndarray
    values: np.ndarray


def simulate_block(
    instance: ExpectationGraph,
    table: PreferenceTable,
    types: np.ndarray,
    preferred_draws: np.ndarray,
    fallback_ranks: np.ndarray,
    policy: str = "dispatch",
) -> BlockResult:
    """
    Runs a policy on B arrival sequences at once.

    Row b, step t behaves exactly like DispatchState.step with the forced
    pair (table.locate(j, preferred_draws[b, t]), rank fallback_ranks[b, t]
    among the available workers in ascending order).

    Args:
        instance: The expectation graph.
        table: Preferred-draw tables of the flow.
        types: (B, n) arrival types.
        preferred_draws: (B, n) integers, entry (b, t) in [0, total of types[b, t]).
        fallback_ranks: (B, n) integers, entry (b, t) in [0, n - t).
        policy: 'dispatch', 'greedy' or 'uniform'.

    Returns:
        A BlockResult with preferred and assigned workers and matching values.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy '{policy}', expected one of {sorted(POLICIES)}")
    types = np.asarray(types, dtype=np.int64)
    size, n = types.shape
    if n != instance.n:
        raise DimensionError(f"block has {n} steps, instance has n={instance.n}")
    utilities = instance.utility_matrix
    rows = np.arange(size)
    available = np.ones((size, n), dtype=bool)
    preferred = np.empty((size, n), dtype=np.int64)
    assigned = np.empty((size, n), dtype=np.int64)

    if policy == "dispatch":
        cumulative = table.cumulative_matrix()
        stride = int(cumulative.max()) + 1 if cumulative.size else 1
        flat = (cumulative + stride * np.arange(table.k, dtype=np.int64)[:, None]).ravel()

    for t in range(n):
        job_types = types[:, t]
        if policy == "greedy":
            scores = np.where(available, utilities[:, job_types].T, -np.inf)
            choice = np.argmax(scores, axis=1)
            preferred[:, t] = choice
            assigned[:, t] = choice
        else:
            if policy == "dispatch":
                keys = job_types * stride + preferred_draws[:, t]
                choice = np.searchsorted(flat, keys, side="right") - job_types * n
                hit = available[rows, choice]
            else:
                choice = None
                hit = np.zeros(size, dtype=bool)
            target = np.empty(size, dtype=np.int64)
            if choice is not None:
                target[hit] = choice[hit]
            miss = ~hit
            if miss.any():
                ranks = fallback_ranks[miss, t]
                target[miss] = np.argmax(np.cumsum(available[miss], axis=1) > ranks[:, None], axis=1)
            preferred[:, t] = target if choice is None else choice
            assigned[:, t] = target
        available[rows, assigned[:, t]] = False

    values = utilities[assigned, types].sum(axis=1)
    return BlockResult(preferred=preferred, assigned=assigned, values=values)


def events_to_jsonl(events: Sequence[AssignmentEvent]) -> str:
    """One JSON object per line, indices 1-based."""
    return "".join(json.dumps(event.to_json_dict(), sort_keys=False) + "\n" for event in events)
