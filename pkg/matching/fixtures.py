"""
The worked five-worker, three-type example, embedded as a golden fixture.

Indices are 0-based here; the published example numbers workers and types
from 1.
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional

from matching.dispatch import AssignmentEvent, run
from matching.errors import MatchingError
from matching.instance import ArrivalSequence, ExpectationGraph, Matching
from matching.oracle import max_weight_perfect_matching
from matching.transport import FlowSolution, solution_violations, solve_tpp

logger = logging.getLogger(__name__)

EXAMPLE_TPP = 8.0
EXAMPLE_DISPATCH_VALUE = 6.0
EXAMPLE_OPT_VALUE = 8.0

EXAMPLE_UTILITIES = (
    (2.0, 0.0, 0.0),
    (1.0, 1.0, 0.0),
    (0.0, 3.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
)

PUBLISHED_FLOW = (
    ("1", "0", "0"),
    ("1", "0", "0"),
    ("0", "1", "0"),
    ("1/2", "0", "1/2"),
    ("0", "1/2", "1/2"),
)

# w1's unit is moved onto type 1 so its row ships 3/2; column sums are unchanged
CORRUPTED_FLOW = (
    ("3/2", "0", "0"),
    ("1/2", "0", "0"),
    ("0", "1", "0"),
    ("1/2", "0", "1/2"),
    ("0", "1/2", "1/2"),
)

EXAMPLE_SEQUENCE = (2, 0, 1, 1, 2)

# (preferred, fallback) per step; only the last preferred worker is taken
FORCED_DRAWS = ((3, None), (1, None), (2, None), (4, None), (3, 0))

EXPECTED_TRACE = (
    {"t": 1, "job_type": 2, "preferred": 3, "preferred_available": True, "assigned": 3, "utility": 1.0, "preferred_probability": Fraction(1, 2)},
    {"t": 2, "job_type": 0, "preferred": 1, "preferred_available": True, "assigned": 1, "utility": 1.0, "preferred_probability": Fraction(2, 5)},
    {"t": 3, "job_type": 1, "preferred": 2, "preferred_available": True, "assigned": 2, "utility": 3.0, "preferred_probability": Fraction(2, 3)},
    {"t": 4, "job_type": 1, "preferred": 4, "preferred_available": True, "assigned": 4, "utility": 1.0, "preferred_probability": Fraction(1, 3)},
    {"t": 5, "job_type": 2, "preferred": 3, "preferred_available": False, "assigned": 0, "utility": 0.0, "preferred_probability": Fraction(1, 2)},
)


def example_instance() -> ExpectationGraph:
    return ExpectationGraph(n=5, k=3, denominator=10, numerators=(5, 3, 2), utilities=EXAMPLE_UTILITIES)


def example_sequence() -> ArrivalSequence:
    return ArrivalSequence(types=EXAMPLE_SEQUENCE)


def published_flow() -> FlowSolution:
    return FlowSolution.from_flow(example_instance(), PUBLISHED_FLOW)


def corrupted_flow() -> FlowSolution:
    return FlowSolution.from_flow(example_instance(), CORRUPTED_FLOW)


@dataclass
class ExampleReproduction:
    """Outcome of replaying the worked example; `mismatches` is empty on success."""

    tpp: float
    published_objective: float
    events: List[AssignmentEvent] = field(default_factory=list)
    matching: Optional[Matching] = None
    optimum: Optional[Matching] = None
    mismatches: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.mismatches

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "tpp": self.tpp,
            "published_objective": self.published_objective,
            "dispatch_value": None if self.matching is None else self.matching.value,
            "opt_value": None if self.optimum is None else self.optimum.value,
            "passed": self.passed,
            "mismatches": self.mismatches,
        }


def _close(left: float, right: float) -> bool:
    return math.isclose(left, right, rel_tol=1e-9, abs_tol=1e-9)


def reproduce_example(flow: Optional[FlowSolution] = None) -> ExampleReproduction:
    """
    Replays the worked example with forced randomness and compares every
    published number.

    Args:
        flow: Flow to replay with; defaults to the published one.

    Returns:
        ExampleReproduction listing any mismatches.
    """
    instance = example_instance()
    sequence = example_sequence()
    flow = published_flow() if flow is None else flow
    tpp = solve_tpp(instance).objective
    outcome = ExampleReproduction(tpp=tpp, published_objective=flow.objective)

    if not _close(tpp, EXAMPLE_TPP):
        outcome.mismatches.append(f"TPP: expected {EXAMPLE_TPP}, got {tpp}")
    for problem in solution_violations(instance, flow):
        outcome.mismatches.append(f"flow: {problem}")
    if not _close(flow.objective, tpp):
        outcome.mismatches.append(f"flow objective: expected {tpp}, got {flow.objective}")

    try:
        matching, events = run(instance, flow, 0, sequence, forced=FORCED_DRAWS)
    except (MatchingError, ValueError) as e:
        outcome.mismatches.append(f"trace: replay failed: {e}")
    else:
        outcome.events = events
        outcome.matching = matching
        for expected, event in zip(EXPECTED_TRACE, events):
            for key, value in expected.items():
                observed = getattr(event, key)
                if observed != value:
                    outcome.mismatches.append(f"step {expected['t']} {key}: expected {value}, got {observed}")
        if not _close(matching.value, EXAMPLE_DISPATCH_VALUE):
            outcome.mismatches.append(f"DISPATCH value: expected {EXAMPLE_DISPATCH_VALUE}, got {matching.value}")

    outcome.optimum = max_weight_perfect_matching(instance, sequence)
    if not _close(outcome.optimum.value, EXAMPLE_OPT_VALUE):
        outcome.mismatches.append(f"OPT value: expected {EXAMPLE_OPT_VALUE}, got {outcome.optimum.value}")

    logger.info(f"Example reproduction finished with {len(outcome.mismatches)} mismatch(es)")
    return outcome
