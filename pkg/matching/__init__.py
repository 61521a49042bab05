"""
dispatch-matching: the DISPATCH policy for maximum weighted online perfect
bipartite matching with i.i.d. arrivals, its transportation-problem solver,
exact oracles and a Monte Carlo harness.
"""
from matching.dispatch import POLICIES, AssignmentEvent, DispatchState, greedy_policy, new_dispatcher, run, step, uniform_policy
from matching.harness import RatioEstimate, check_lemmas, estimate_ratio, exact_summary, simulate, theorem2_sweep
from matching.instance import (
    ArrivalSequence,
    ExpectationGraph,
    Matching,
    generate_lower_bound_instance,
    generate_random_instance,
    load,
    save,
    validate,
)
from matching.oracle import ExactExpectation, exact_dispatch_expectation, exact_opt_expectation, max_weight_perfect_matching
from matching.transport import FlowSolution, solve_tpp, tpp_upper_bound

__all__ = [
    "ArrivalSequence",
    "AssignmentEvent",
    "DispatchState",
    "ExactExpectation",
    "ExpectationGraph",
    "FlowSolution",
    "Matching",
    "POLICIES",
    "RatioEstimate",
    "check_lemmas",
    "estimate_ratio",
    "exact_dispatch_expectation",
    "exact_opt_expectation",
    "exact_summary",
    "generate_lower_bound_instance",
    "generate_random_instance",
    "greedy_policy",
    "load",
    "max_weight_perfect_matching",
    "new_dispatcher",
    "run",
    "save",
    "simulate",
    "solve_tpp",
    "step",
    "theorem2_sweep",
    "tpp_upper_bound",
    "uniform_policy",
    "validate",
]
