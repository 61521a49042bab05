"""
Exact solver for the transportation problem on the expectation graph.

Each worker supplies one unit and each job type j demands r_j = n * p_j.
Scaling by the shared denominator D turns this into an integer problem
(worker supply D, type demand n * numerators[j]) whose optimal vertices are
integral, so dividing the integral optimum by D gives an exact rational
optimum. The integer problem is solved as a min-cost flow with utilities
negated into costs, using successive shortest paths with potentials.
"""
import heapq
import logging
import math
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from matching.config import settings
from matching.errors import CapacityError, CertificateError, DimensionError
from matching.instance import ExpectationGraph

logger = logging.getLogger(__name__)

COST_EPSILON = 1e-12
CERTIFICATE_TOLERANCE = 1e-9

FractionLike = Union[Fraction, int, str]


class FlowSolution(BaseModel):
    """Optimal flow f*_wj = flow_numerators[w][j] / flow_denominator with its duals."""

    model_config = ConfigDict(frozen=True)

    flow_numerators: Tuple[Tuple[int, ...], ...] = Field(description="n x k integer flow numerators.")
    flow_denominator: int = Field(description="Common positive denominator of the flow.")
    objective: float = Field(description="TPP(G) = sum of u_wj * f_wj.")
    worker_potentials: Optional[Tuple[float, ...]] = Field(default=None, description="Dual value a_w of each worker supply row.")
    type_potentials: Optional[Tuple[float, ...]] = Field(default=None, description="Dual value b_j of each job-type demand column.")
    dual_objective: Optional[float] = Field(default=None, description="sum a_w + sum r_j b_j; equals the objective at optimality.")

    @property
    def n(self) -> int:
        return len(self.flow_numerators)

    @property
    def k(self) -> int:
        return len(self.flow_numerators[0]) if self.flow_numerators else 0

    @property
    def numerator_matrix(self) -> np.ndarray:
        return np.array(self.flow_numerators, dtype=np.int64).reshape(self.n, self.k)

    @property
    def flow(self) -> Tuple[Tuple[Fraction, ...], ...]:
        return tuple(tuple(Fraction(x, self.flow_denominator) for x in row) for row in self.flow_numerators)

    @property
    def flow_matrix(self) -> np.ndarray:
        return self.numerator_matrix / float(self.flow_denominator)

    def row_sums(self) -> List[Fraction]:
        return [Fraction(sum(row), self.flow_denominator) for row in self.flow_numerators]

    def column_sums(self) -> List[Fraction]:
        return [Fraction(sum(col), self.flow_denominator) for col in zip(*self.flow_numerators)]

    def to_json_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {
            "objective": self.objective,
            "flow_numerators": [list(row) for row in self.flow_numerators],
            "flow_denominator": self.flow_denominator,
            "flow": [[str(f) for f in row] for row in self.flow],
        }
        if self.worker_potentials is not None:
            payload["worker_potentials"] = list(self.worker_potentials)
            payload["type_potentials"] = list(self.type_potentials)
            payload["dual_objective"] = self.dual_objective
        return payload

    @classmethod
    def from_flow(cls, instance: ExpectationGraph, flow: Sequence[Sequence[FractionLike]]) -> "FlowSolution":
        """
        Wraps a hand-specified flow (no optimality certificate).

        Args:
            instance: Instance the flow belongs to; used for the objective.
            flow: n x k matrix of exact rationals ('1/2', 1, Fraction).

        Returns:
            A FlowSolution over the least common denominator.
        """
        fractions = [[Fraction(str(x)) if not isinstance(x, Fraction) else x for x in row] for row in flow]
        if len(fractions) != instance.n or any(len(row) != instance.k for row in fractions):
            raise DimensionError(f"flow must be {instance.n} x {instance.k}")
        denominator = 1
        for row in fractions:
            for f in row:
                denominator = denominator * f.denominator // math.gcd(denominator, f.denominator)
        numerators = tuple(tuple(int(f * denominator) for f in row) for row in fractions)
        return cls(
            flow_numerators=numerators,
            flow_denominator=denominator,
            objective=_objective(instance.utility_matrix, np.array(numerators, dtype=np.int64), denominator),
        )


def _objective(utilities: np.ndarray, numerators: np.ndarray, denominator: int) -> float:
    terms = (float(utilities[w, j]) * int(numerators[w, j]) for w, j in zip(*np.nonzero(numerators)))
    return math.fsum(terms) / denominator


class _Arc:
    """Residual arc; `capacity` is the remaining residual capacity."""

    __slots__ = ("head", "capacity", "cost", "reverse")

    def __init__(self, head: int, capacity: int, cost: float):
        self.head = head
        self.capacity = capacity
        self.cost = cost
        self.reverse: Optional["_Arc"] = None


class _ScaledNetwork:
    """
    source -> workers (cap D) -> job types (cost -u_wj) -> sink (cap n * numerators[j]).

    Vertex ids: source 0, workers 1..n, types n+1..n+k, sink n+k+1. Adjacency
    lists are kept in ascending head order so that searches break ties by
    the lowest vertex index.
    """

    def __init__(self, instance: ExpectationGraph):
        self.n = instance.n
        self.k = instance.k
        self.source = 0
        self.sink = self.n + self.k + 1
        self.adj: List[List[_Arc]] = [[] for _ in range(self.sink + 1)]
        self.supply = instance.denominator
        utilities = instance.utility_matrix

        for w in range(self.n):
            self._add_arc(self.source, 1 + w, self.supply, 0.0)
        for w in range(self.n):
            for j in range(self.k):
                self._add_arc(1 + w, 1 + self.n + j, self.supply, -float(utilities[w, j]))
        for j in range(self.k):
            self._add_arc(1 + self.n + j, self.sink, self.n * instance.numerators[j], 0.0)
        for arcs in self.adj:
            arcs.sort(key=lambda arc: arc.head)

        # Shortest distances in the initial DAG give feasible potentials
        self.potential = [0.0] * (self.sink + 1)
        for j in range(self.k):
            self.potential[1 + self.n + j] = min(-float(utilities[w, j]) for w in range(self.n))
        self.potential[self.sink] = min(self.potential[1 + self.n + j] for j in range(self.k))
        self.epsilon = COST_EPSILON * max(1.0, float(np.max(utilities)) if utilities.size else 1.0)

    def _add_arc(self, tail: int, head: int, capacity: int, cost: float) -> None:
        forward = _Arc(head, capacity, cost)
        backward = _Arc(tail, 0, -cost)
        forward.reverse = backward
        backward.reverse = forward
        self.adj[tail].append(forward)
        self.adj[head].append(backward)

    def _reduced_cost(self, tail: int, arc: _Arc) -> float:
        return arc.cost + self.potential[tail] - self.potential[arc.head]

    def dijkstra(self) -> List[float]:
        dist = [math.inf] * len(self.adj)
        done = [False] * len(self.adj)
        dist[self.source] = 0.0
        heap = [(0.0, self.source)]
        while heap:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            for arc in self.adj[u]:
                if arc.capacity <= 0 or done[arc.head]:
                    continue
                candidate = d + max(0.0, self._reduced_cost(u, arc))
                if candidate < dist[arc.head] - self.epsilon:
                    dist[arc.head] = candidate
                    heapq.heappush(heap, (candidate, arc.head))
        return dist

    def augment_admissible(self) -> int:
        """
        Pushes flow along zero-reduced-cost paths until none is left.

        Returns:
            Units pushed in this phase.
        """
        size = len(self.adj)
        dead = [False] * size
        pointer = [0] * size
        pushed = 0
        while True:
            stack = [self.source]
            on_stack = [False] * size
            on_stack[self.source] = True
            path: List[_Arc] = []
            while stack and stack[-1] != self.sink:
                u = stack[-1]
                arcs = self.adj[u]
                advanced = False
                while pointer[u] < len(arcs):
                    arc = arcs[pointer[u]]
                    v = arc.head
                    if arc.capacity > 0 and not dead[v] and not on_stack[v] and self._reduced_cost(u, arc) <= self.epsilon:
                        path.append(arc)
                        stack.append(v)
                        on_stack[v] = True
                        advanced = True
                        break
                    pointer[u] += 1
                if not advanced:
                    dead[u] = True
                    on_stack[u] = False
                    stack.pop()
                    if path:
                        path.pop()
            if not stack:
                return pushed
            bottleneck = min(arc.capacity for arc in path)
            for arc in path:
                arc.capacity -= bottleneck
                arc.reverse.capacity += bottleneck
            pushed += bottleneck

    def solve(self) -> int:
        total = self.n * self.supply
        sent = 0
        phases = 0
        while sent < total:
            dist = self.dijkstra()
            if math.isinf(dist[self.sink]):
                raise CertificateError(f"scaled problem infeasible after routing {sent} of {total} units")
            for v, d in enumerate(dist):
                if not math.isinf(d):
                    self.potential[v] += d
            pushed = self.augment_admissible()
            if pushed == 0:
                raise CertificateError("shortest-path phase made no progress")
            sent += pushed
            phases += 1
            logger.debug(f"Phase {phases}: pushed {pushed} units, {sent}/{total} routed")
        return phases

    def flow_numerators(self) -> np.ndarray:
        flows = np.zeros((self.n, self.k), dtype=np.int64)
        for w in range(self.n):
            for arc in self.adj[1 + w]:
                if self.n < arc.head <= self.n + self.k:
                    flows[w, arc.head - self.n - 1] = arc.reverse.capacity
        return flows


def _dual_values(utilities: np.ndarray, numerators: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Shortest-path duals of the residual worker/type graph for a fixed flow.

    Arcs w -> j cost -u_wj always exist; arcs j -> w cost +u_wj exist where
    the flow is positive. A virtual root reaches every node at cost 0. The
    returned a_w = d_w, b_j = -d_j satisfy a_w + b_j >= u_wj with equality
    on positive-flow edges.
    """
    n, k = utilities.shape
    positive = numerators > 0
    d_w = np.zeros(n)
    d_j = np.zeros(k)
    tolerance = COST_EPSILON * max(1.0, float(np.max(utilities)) if utilities.size else 1.0)
    for _ in range(n + k + 2):
        new_j = np.minimum(d_j, (d_w[:, None] - utilities).min(axis=0))
        new_w = np.minimum(d_w, np.where(positive, new_j[None, :] + utilities, np.inf).min(axis=1))
        changed = np.any(new_j < d_j - tolerance) or np.any(new_w < d_w - tolerance)
        d_w, d_j = new_w, new_j
        if not changed:
            return d_w, -d_j
    raise CertificateError("residual graph has a negative cycle; flow is not optimal")


def certificate_slack(instance: ExpectationGraph, solution: FlowSolution) -> Dict[str, float]:
    """
    Measures how well the stored duals certify optimality.

    Returns:
        Dictionary with 'dual_infeasibility' (largest u_wj - a_w - b_j),
        'complementary_slackness' (largest |a_w + b_j - u_wj| on positive
        flow) and 'duality_gap' (|dual objective - objective|).
    """
    if solution.worker_potentials is None or solution.type_potentials is None:
        raise CertificateError("solution carries no dual values")
    utilities = instance.utility_matrix
    a = np.asarray(solution.worker_potentials)
    b = np.asarray(solution.type_potentials)
    reduced = a[:, None] + b[None, :] - utilities
    positive = solution.numerator_matrix > 0
    r = np.array([float(x) for x in instance.expected_counts])
    dual_objective = math.fsum(a) + math.fsum(r * b)
    return {
        "dual_infeasibility": float(max(0.0, -reduced.min())),
        "complementary_slackness": float(np.abs(reduced[positive]).max()) if positive.any() else 0.0,
        "duality_gap": abs(dual_objective - solution.objective),
    }


def solution_violations(instance: ExpectationGraph, solution: FlowSolution) -> List[str]:
    """
    Lists exact feasibility violations of a flow for an instance.

    Row sums must equal 1 and column sums must equal r_j with zero tolerance.
    """
    problems: List[str] = []
    if solution.n != instance.n or solution.k != instance.k:
        return [f"flow is {solution.n} x {solution.k}, instance is {instance.n} x {instance.k}"]
    if solution.flow_denominator <= 0:
        return [f"flow denominator must be positive, got {solution.flow_denominator}"]
    for w, row in enumerate(solution.flow_numerators):
        for j, x in enumerate(row):
            if x < 0:
                problems.append(f"flow w{w + 1}->t{j + 1} is negative")
    for w, total in enumerate(solution.row_sums()):
        if total != 1:
            problems.append(f"worker w{w + 1} ships {total}, expected 1")
    for j, (total, r) in enumerate(zip(solution.column_sums(), instance.expected_counts)):
        if total != r:
            problems.append(f"type t{j + 1} receives {total}, expected r={r}")
    recomputed = _objective(instance.utility_matrix, solution.numerator_matrix, solution.flow_denominator)
    if not math.isclose(solution.objective, recomputed, rel_tol=1e-12, abs_tol=1e-12):
        problems.append(f"objective {solution.objective} differs from recomputed {recomputed}")
    return problems


def solve_tpp(instance: ExpectationGraph, max_scaled_supply: Optional[int] = None) -> FlowSolution:
    """
    Solves TPP(G) exactly and certifies the optimum with dual values.

    Args:
        instance: A valid expectation graph.
        max_scaled_supply: Bound on n * D; defaults to the configured value.

    Returns:
        The optimal FlowSolution with worker and type potentials.

    Raises:
        InstanceValidationError: If the instance is invalid.
        CapacityError: If the scaled problem exceeds the size bound.
        CertificateError: If optimality cannot be certified.
    """
    instance.require_valid()
    bound = settings.max_scaled_supply if max_scaled_supply is None else max_scaled_supply
    total_supply = instance.n * instance.denominator
    if total_supply > bound:
        raise CapacityError(f"scaled supply n*D = {total_supply} exceeds the bound {bound}")

    logger.info(f"Solving transportation problem n={instance.n}, k={instance.k}, D={instance.denominator}")
    network = _ScaledNetwork(instance)
    phases = network.solve()
    numerators = network.flow_numerators()

    common = math.gcd(instance.denominator, *[int(x) for x in numerators.ravel()])
    numerators = numerators // common
    denominator = instance.denominator // common

    utilities = instance.utility_matrix
    worker_potentials, type_potentials = _dual_values(utilities, numerators)
    r = np.array([float(x) for x in instance.expected_counts])
    solution = FlowSolution(
        flow_numerators=tuple(tuple(int(x) for x in row) for row in numerators),
        flow_denominator=int(denominator),
        objective=_objective(utilities, numerators, denominator),
        worker_potentials=tuple(float(x) for x in worker_potentials),
        type_potentials=tuple(float(x) for x in type_potentials),
        dual_objective=math.fsum(worker_potentials) + math.fsum(r * type_potentials),
    )

    problems = solution_violations(instance, solution)
    if problems:
        raise CertificateError(f"solver produced an infeasible flow: {problems}")
    slack = certificate_slack(instance, solution)
    scale = max(1.0, float(np.max(utilities)))
    if max(slack.values()) > CERTIFICATE_TOLERANCE * scale * max(1, instance.n):
        raise CertificateError(f"optimality certificate failed: {slack}")
    logger.info(f"TPP objective {solution.objective} after {phases} phases")
    return solution


def tpp_upper_bound(instance: ExpectationGraph) -> float:
    """TPP(G), the upper bound on E[OPT]."""
    return solve_tpp(instance).objective
