"""
Offline and exact references.

- max_weight_perfect_matching: OPT on one realization.
- exact_dispatch_expectation: the exact law of DISPATCH by dynamic
  programming over availability bitmasks.
- exact_opt_expectation: E[OPT] by enumerating arrival-count vectors, since
  OPT only depends on how many jobs of each type arrived.
"""
import itertools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from matching.config import settings
from matching.errors import CapacityError, DimensionError
from matching.instance import ArrivalSequence, ExpectationGraph, Matching
from matching.transport import FlowSolution

logger = logging.getLogger(__name__)


@dataclass
class ExactExpectation:
    """
    Exact expectation with optional DISPATCH marginals.

    Array layout: edge_probabilities[w, j] = P(I_wj = 1),
    availability[t, w] = P(w in AW_t), step_edge_probabilities[t, w, j] =
    P(I^t_wj = 1), with t counted from 0.
    """

    value: float
    state_count: int
    edge_probabilities: Optional[np.ndarray] = None
    availability: Optional[np.ndarray] = None
    step_edge_probabilities: Optional[np.ndarray] = None
    rational: bool = False
    exact_value: Optional[Fraction] = None
    exact_edge_probabilities: Optional[List[List[Fraction]]] = None

    def to_json_dict(self, include_edges: bool = False) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"value": self.value, "state_count": self.state_count, "rational": self.rational}
        if self.exact_value is not None:
            payload["exact_value"] = str(self.exact_value)
        if include_edges and self.edge_probabilities is not None:
            payload["edge_probabilities"] = self.edge_probabilities.tolist()
            payload["availability"] = self.availability.tolist()
        if include_edges and self.exact_edge_probabilities is not None:
            payload["exact_edge_probabilities"] = [[str(x) for x in row] for row in self.exact_edge_probabilities]
        return payload


def _positive_assignment(utilities: np.ndarray, columns: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Optimal (job, worker) pairs restricted to jobs and workers with a positive edge.

    With non-negative utilities on a complete graph, a maximum-weight matching
    of this subgraph extends to an optimal perfect matching by pairing the
    leftover jobs and workers arbitrarily.
    """
    block = utilities[:, columns]
    jobs = np.flatnonzero(block.max(axis=0) > 0) if columns.size else np.empty(0, dtype=np.int64)
    if jobs.size == 0:
        return jobs, jobs
    workers = np.flatnonzero(block[:, jobs].max(axis=1) > 0)
    rows, cols = linear_sum_assignment(block[np.ix_(workers, jobs)].T, maximize=True)
    return jobs[rows], workers[cols]


def max_weight_perfect_matching(instance: ExpectationGraph, sequence: ArrivalSequence) -> Matching:
    """
    Maximum-utility perfect matching of the realization graph.

    Only jobs and workers touching a positive utility enter the assignment
    solve; the rest are paired in ascending order afterwards.

    Args:
        instance: The expectation graph.
        sequence: The realized arrivals.

    Returns:
        An optimal perfect Matching.
    """
    sequence.validate_for(instance)
    types = np.asarray(sequence.types, dtype=np.int64)
    assignment = np.full(instance.n, -1, dtype=np.int64)
    jobs, workers = _positive_assignment(instance.utility_matrix, types)
    assignment[jobs] = workers

    taken = set(int(w) for w in workers)
    leftover = iter(w for w in range(instance.n) if w not in taken)
    for t in np.flatnonzero(assignment < 0):
        assignment[t] = next(leftover)
    return Matching.build(instance, sequence, [int(w) for w in assignment])


class CountOptimum:
    """
    OPT as a function of per-type arrival counts, memoised per count vector.

    Only types with a positive utility column enter the assignment block, and
    the memo is keyed on their counts alone.
    """

    def __init__(self, instance: ExpectationGraph):
        self.n = instance.n
        self.k = instance.k
        self.utilities = instance.utility_matrix
        self.positive_types = np.flatnonzero(self.utilities.max(axis=0) > 0)
        self._cache: Dict[Tuple[int, ...], float] = {}

    def __len__(self) -> int:
        return len(self._cache)

    def __call__(self, counts: Sequence[int]) -> float:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.k,) or int(counts.sum()) != self.n:
            raise DimensionError(f"counts {tuple(counts.tolist())} do not describe {self.n} arrivals over {self.k} types")
        useful = counts[self.positive_types]
        key = tuple(useful.tolist())
        if key not in self._cache:
            columns = np.repeat(self.positive_types, useful)
            jobs, workers = _positive_assignment(self.utilities, columns)
            self._cache[key] = math.fsum(float(self.utilities[w, columns[j]]) for j, w in zip(jobs, workers))
        return self._cache[key]


def opt_value_for_counts(instance: ExpectationGraph, counts: Sequence[int]) -> float:
    """OPT of any realization with the given per-type arrival counts."""
    return CountOptimum(instance)(counts)


def _compositions(total: int, parts: int) -> Iterator[Tuple[int, ...]]:
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def exact_opt_expectation(instance: ExpectationGraph, max_vectors: Optional[int] = None) -> ExactExpectation:
    """
    E[OPT] by enumeration of arrival-count vectors over the support.

    Class (c_1..c_k) has probability n! / prod(c_j!) * prod(num_j^c_j) / D^n,
    computed in exact integer arithmetic.

    Raises:
        CapacityError: If the number of count vectors exceeds the bound.
    """
    instance.require_valid()
    bound = settings.opt_enum_max_vectors if max_vectors is None else max_vectors
    support = instance.support
    vector_count = math.comb(instance.n + len(support) - 1, len(support) - 1)
    if vector_count > bound:
        raise CapacityError(f"{vector_count} count vectors exceed the enumeration bound {bound}")

    total_weight = instance.denominator ** instance.n
    factorial_n = math.factorial(instance.n)
    optimum = CountOptimum(instance)
    terms = []
    weight_sum = 0
    for partial in _compositions(instance.n, len(support)):
        multinomial = factorial_n
        for c in partial:
            multinomial //= math.factorial(c)
        weight = multinomial
        for j, c in zip(support, partial):
            weight *= instance.numerators[j] ** c
        weight_sum += weight
        counts = [0] * instance.k
        for j, c in zip(support, partial):
            counts[j] = c
        terms.append(float(Fraction(weight, total_weight)) * optimum(counts))
    if weight_sum != total_weight:
        raise ArithmeticError(f"class weights sum to {weight_sum}, expected {total_weight}")
    value = math.fsum(terms)
    logger.info(f"E[OPT] = {value} over {vector_count} count vectors")
    return ExactExpectation(value=value, state_count=vector_count)


def sequence_opt_expectation(instance: ExpectationGraph, max_sequences: Optional[int] = None) -> ExactExpectation:
    """E[OPT] by enumerating every arrival sequence over the support."""
    instance.require_valid()
    bound = settings.opt_enum_max_vectors if max_sequences is None else max_sequences
    support = instance.support
    sequence_count = len(support) ** instance.n
    if sequence_count > bound:
        raise CapacityError(f"{sequence_count} sequences exceed the enumeration bound {bound}")
    total_weight = instance.denominator ** instance.n
    terms = []
    for types in itertools.product(support, repeat=instance.n):
        weight = math.prod(instance.numerators[j] for j in types)
        value = max_weight_perfect_matching(instance, ArrivalSequence(types=types)).value
        terms.append(float(Fraction(weight, total_weight)) * value)
    return ExactExpectation(value=math.fsum(terms), state_count=sequence_count)


def _preference_matrix(instance: ExpectationGraph, flow: FlowSolution) -> np.ndarray:
    """Q[w, j] = q_j(w), the preferred-draw law of type j."""
    numerators = flow.numerator_matrix.astype(float)
    totals = numerators.sum(axis=0)
    return np.divide(numerators, totals, out=np.zeros_like(numerators), where=totals > 0)


def _neumaier_add(total: np.ndarray, carry: np.ndarray, index: np.ndarray, terms: np.ndarray) -> None:
    """Compensated total[index] += terms; `index` must not repeat."""
    current = total[index]
    updated = current + terms
    carry[index] += np.where(np.abs(current) >= np.abs(terms), (current - updated) + terms, (terms - updated) + current)
    total[index] = updated


def _float_dispatch_dp(instance: ExpectationGraph, flow: FlowSolution) -> ExactExpectation:
    n, k = instance.n, instance.k
    q = _preference_matrix(instance, flow)
    p = np.array([float(x) for x in instance.probabilities])
    preferred_mass = q @ p

    masks = np.arange(1 << n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    sizes = bits.sum(axis=1)
    position = np.empty(1 << n, dtype=np.int64)
    layers = []
    for m in range(n, 0, -1):
        layer = np.flatnonzero(sizes == m)
        position[layer] = np.arange(layer.size)
        layers.append(layer)

    availability = np.zeros((n, n))
    step_edges = np.zeros((n, n, k))
    mass = np.ones(1)
    state_count = 0
    for t, layer in enumerate(layers):
        m = n - t
        member = bits[layer].astype(float)
        state_count += layer.size
        miss = (1.0 - member) @ q
        weighted = mass[:, None] * member
        availability[t] = mass @ member
        step_edges[t] = p[None, :] * (availability[t][:, None] * q + weighted.T @ miss / m)
        if t == n - 1:
            break
        transition = weighted * (preferred_mass[None, :] + (miss @ p)[:, None] / m)
        following = np.zeros(layers[t + 1].size)
        carry = np.zeros_like(following)
        # Each successor receives at most one term per removed worker
        for w in range(n):
            rows = np.flatnonzero(bits[layer, w])
            _neumaier_add(following, carry, position[layer[rows] ^ (1 << w)], transition[rows, w])
        mass = following + carry

    edges = np.array([[math.fsum(step_edges[:, w, j]) for j in range(k)] for w in range(n)])
    return ExactExpectation(
        value=_expected_value(instance, edges),
        state_count=int(state_count),
        edge_probabilities=edges,
        availability=availability,
        step_edge_probabilities=step_edges,
    )


def _rational_dispatch_dp(instance: ExpectationGraph, flow: FlowSolution) -> ExactExpectation:
    n, k = instance.n, instance.k
    support = instance.support
    probabilities = instance.probabilities
    columns = [sum(col) for col in zip(*flow.flow_numerators)]
    q = [
        [Fraction(flow.flow_numerators[w][j], columns[j]) if columns[j] else Fraction(0) for j in range(k)]
        for w in range(n)
    ]
    availability = [[Fraction(0)] * n for _ in range(n)]
    step_edges = [[[Fraction(0)] * k for _ in range(n)] for _ in range(n)]
    layer: Dict[int, Fraction] = {(1 << n) - 1: Fraction(1)}
    state_count = 0
    for t in range(n):
        following: Dict[int, Fraction] = defaultdict(Fraction)
        state_count += len(layer)
        for mask, mass in sorted(layer.items()):
            members = [w for w in range(n) if mask >> w & 1]
            absent = [w for w in range(n) if not mask >> w & 1]
            for w in members:
                availability[t][w] += mass
            for j in support:
                miss = sum((q[w][j] for w in absent), Fraction(0))
                for w in members:
                    share = mass * probabilities[j] * (q[w][j] + miss / len(members))
                    step_edges[t][w][j] += share
                    following[mask ^ (1 << w)] += share
        layer = following

    exact = [[sum((step_edges[t][w][j] for t in range(n)), Fraction(0)) for j in range(k)] for w in range(n)]
    edges = np.array([[float(x) for x in row] for row in exact])
    exact_value = sum(
        (Fraction(u) * x for urow, row in zip(instance.utilities, exact) for u, x in zip(urow, row)), Fraction(0)
    )
    return ExactExpectation(
        value=float(exact_value),
        exact_value=exact_value,
        state_count=state_count,
        edge_probabilities=edges,
        availability=np.array([[float(x) for x in row] for row in availability]),
        step_edge_probabilities=np.array([[[float(x) for x in row] for row in step] for step in step_edges]),
        rational=True,
        exact_edge_probabilities=exact,
    )


def _expected_value(instance: ExpectationGraph, edges: np.ndarray) -> float:
    return math.fsum((instance.utility_matrix * edges).ravel())


def exact_dispatch_expectation(
    instance: ExpectationGraph, flow: FlowSolution, rational: bool = False, max_n: Optional[int] = None
) -> ExactExpectation:
    """
    Exact law of DISPATCH by dynamic programming over availability sets.

    From state (t, S) with mass pi, type j arrives with probability p_j and
    worker w in S is assigned with probability q_j(w) + (sum of q_j over
    workers outside S) / |S|.

    Args:
        instance: The expectation graph.
        flow: Flow guiding the preferred draws.
        rational: Use exact Fraction arithmetic (small n only).
        max_n: Largest n accepted; defaults to the configured bound.

    Returns:
        ExactExpectation with edge probabilities, availability marginals and
        per-step edge probabilities.

    Raises:
        CapacityError: If n exceeds the bound for the chosen mode.
    """
    instance.require_valid()
    if flow.n != instance.n or flow.k != instance.k:
        raise DimensionError(f"flow is {flow.n} x {flow.k}, instance is {instance.n} x {instance.k}")
    limit = (settings.rational_dp_max_n if rational else settings.exact_dp_max_n) if max_n is None else max_n
    if instance.n > limit:
        mode = "rational" if rational else "float"
        raise CapacityError(f"n={instance.n} exceeds the {mode} DP bound {limit}")
    logger.info(f"Exact DISPATCH DP over {1 << instance.n} availability sets (rational={rational})")
    result = _rational_dispatch_dp(instance, flow) if rational else _float_dispatch_dp(instance, flow)
    logger.info(f"E[DISPATCH] = {result.value}")
    return result
