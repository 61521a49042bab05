import json
from fractions import Fraction

import numpy as np
import pytest

from matching import fixtures
from matching.dispatch import (
    POLICIES,
    PreferenceTable,
    events_to_jsonl,
    greedy_policy,
    greedy_step,
    new_dispatcher,
    run,
    simulate_block,
    step,
    uniform_policy,
)
from matching.errors import DimensionError, InstanceValidationError, InvalidArrivalError, SequenceExhaustedError
from matching.instance import ArrivalSequence, ExpectationGraph, generate_lower_bound_instance, sample_sequences
from matching.transport import FlowSolution, solve_tpp
from oracles import random_small_instance


def test_new_dispatcher_starts_with_everyone_available(example, example_flow):
    state = new_dispatcher(example, example_flow, 42)
    assert state.available == [0, 1, 2, 3, 4]
    assert state.step == 1


def test_new_dispatcher_rejects_wrong_shape(example):
    flow = FlowSolution(flow_numerators=((1, 0),) * 5, flow_denominator=1, objective=0.0)
    with pytest.raises(DimensionError):
        new_dispatcher(example, flow, 0)


def test_new_dispatcher_rejects_infeasible_flow(example):
    with pytest.raises(InstanceValidationError):
        new_dispatcher(example, fixtures.corrupted_flow(), 0)


def test_equal_seeds_give_equal_traces(example, example_flow, example_sequence):
    _, first = run(example, example_flow, 11, example_sequence)
    _, second = run(example, example_flow, 11, example_sequence)
    assert first == second


def test_example_trace_with_forced_draws(example, example_flow, example_sequence):
    matching, events = run(example, example_flow, 0, example_sequence, forced=fixtures.FORCED_DRAWS)
    assert matching.assignment == (3, 1, 2, 4, 0)
    assert matching.value == 6.0
    assert [e.preferred_probability for e in events] == [
        Fraction(1, 2), Fraction(2, 5), Fraction(2, 3), Fraction(1, 3), Fraction(1, 2)
    ]
    last = events[-1]
    assert last.available == (0,)
    assert last.preferred == 3
    assert not last.preferred_available
    assert last.assigned == 0
    assert last.utility == 0.0


def test_single_worker_is_always_preferred():
    instance = ExpectationGraph(n=1, k=2, denominator=2, numerators=(1, 1), utilities=((3.0, 1.0),))
    flow = solve_tpp(instance)
    for seed in range(5):
        state = new_dispatcher(instance, flow, seed)
        event = step(state, seed % 2)
        assert event.preferred == 0
        assert event.assigned == 0
        assert event.preferred_probability == 1


def test_preferred_draw_for_type_three(example_flow):
    table = PreferenceTable(example_flow)
    assert table.weights[2] == (0, 0, 0, 1, 1)
    assert table.total(2) == 2
    rng = np.random.default_rng(2024)
    draws = rng.integers(0, table.total(2), size=200_000)
    workers = np.array([table.locate(2, int(d)) for d in draws])
    assert set(np.unique(workers)) == {3, 4}
    assert abs((workers == 3).mean() - 0.5) <= 0.005
    assert abs((workers == 4).mean() - 0.5) <= 0.005


def test_preference_probabilities_are_exact(example_flow):
    table = PreferenceTable(example_flow)
    assert table.probability(0, 0) == Fraction(2, 5)
    assert table.probability(1, 4) == Fraction(1, 3)
    assert sum(table.probability(0, w) for w in range(5)) == 1


def test_step_beyond_n_is_rejected(example, example_flow, example_sequence):
    state = new_dispatcher(example, example_flow, 3)
    for j in example_sequence.types:
        step(state, j)
    with pytest.raises(SequenceExhaustedError):
        step(state, 0)


def test_zero_probability_and_unknown_types_are_rejected():
    instance = ExpectationGraph(n=2, k=3, denominator=2, numerators=(1, 1, 0), utilities=((1.0, 0.0, 1.0), (0.0, 1.0, 1.0)))
    state = new_dispatcher(instance, solve_tpp(instance), 0)
    with pytest.raises(InvalidArrivalError):
        step(state, 2)
    with pytest.raises(InvalidArrivalError):
        step(state, 7)
    assert state.step == 1


def test_greedy_breaks_ties_by_index(example, example_flow, example_sequence):
    _, events = greedy_policy(example, example_flow, 0, example_sequence)
    assert events[0].job_type == 2
    assert events[0].assigned == 3


def test_uniform_single_worker():
    instance = ExpectationGraph(n=1, k=1, denominator=1, numerators=(1,), utilities=((2.0,),))
    matching, _ = uniform_policy(instance, solve_tpp(instance), 5, ArrivalSequence(types=(0,)))
    assert matching.assignment == (0,)


@pytest.mark.parametrize("policy", sorted(POLICIES))
@pytest.mark.parametrize("seed", range(5))
def test_policies_build_perfect_matchings(policy, seed):
    instance = random_small_instance(seed, max_n=6, max_k=4, max_den=8)
    flow = solve_tpp(instance)
    rng = np.random.default_rng(seed)
    sequence = ArrivalSequence(types=tuple(int(j) for j in sample_sequences(instance, rng, 1)[0]))
    matching, events = POLICIES[policy](instance, flow, seed, sequence)
    assert matching.violations(instance, sequence) == []
    assert matching.value >= 0
    for event in events:
        assert event.assigned in event.available
        if event.preferred_available:
            assert event.assigned == event.preferred


def _replay(instance, flow, types, draws, ranks, policy):
    table = PreferenceTable(flow)
    state = new_dispatcher(instance, flow, 0)
    for t, j in enumerate(types):
        fallback = state.available[int(ranks[t])]
        if policy == "dispatch":
            step(state, int(j), forced=(table.locate(int(j), int(draws[t])), fallback))
        elif policy == "greedy":
            greedy_step(state, int(j))
        else:
            step(state, int(j), forced=(fallback, fallback))
    return [e.assigned for e in state.events], [e.preferred for e in state.events]


@pytest.mark.parametrize("policy", ["dispatch", "greedy", "uniform"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_block_engine_matches_forced_replay(policy, seed):
    instance = random_small_instance(seed + 30, max_n=6, max_k=4, max_den=8, min_den=4)
    flow = solve_tpp(instance)
    table = PreferenceTable(flow)
    rng = np.random.default_rng(seed)
    size, n = 40, instance.n
    types = sample_sequences(instance, rng, size)
    draws = rng.integers(0, np.asarray(table.totals)[types])
    ranks = rng.integers(0, np.arange(n, 0, -1), size=(size, n))
    block = simulate_block(instance, table, types, draws, ranks, policy)
    for b in range(size):
        assigned, preferred = _replay(instance, flow, types[b], draws[b], ranks[b], policy)
        assert list(block.assigned[b]) == assigned
        if policy == "dispatch":
            assert list(block.preferred[b]) == preferred
        value = sum(instance.utilities[w][j] for w, j in zip(assigned, types[b]))
        assert block.values[b] == pytest.approx(value, abs=1e-12)


def test_block_engine_on_lower_bound_prefers_own_worker():
    instance = generate_lower_bound_instance(5, "1/2")
    flow = solve_tpp(instance)
    table = PreferenceTable(flow)
    rng = np.random.default_rng(9)
    types = sample_sequences(instance, rng, 200)
    draws = rng.integers(0, np.asarray(table.totals)[types])
    ranks = rng.integers(0, np.arange(5, 0, -1), size=(200, 5))
    block = simulate_block(instance, table, types, draws, ranks)
    diagonal = types < 5
    assert (block.preferred[diagonal] == types[diagonal]).all()


def test_trace_lines_are_one_based(example, example_flow, example_sequence):
    _, events = run(example, example_flow, 0, example_sequence, forced=fixtures.FORCED_DRAWS)
    lines = events_to_jsonl(events).splitlines()
    assert len(lines) == 5
    first = json.loads(lines[0])
    assert first == {
        "t": 1,
        "job_type": 3,
        "available": [1, 2, 3, 4, 5],
        "preferred": 4,
        "preferred_available": True,
        "assigned": 4,
        "utility": 1.0,
        "preferred_probability": "1/2",
    }


def test_online_runs_match_exact_value_on_lower_bound(lower_bound_2):
    flow = solve_tpp(lower_bound_2)
    rng = np.random.default_rng(12)
    values = []
    for seed in range(4000):
        sequence = ArrivalSequence(types=tuple(int(j) for j in sample_sequences(lower_bound_2, rng, 1)[0]))
        matching, _ = run(lower_bound_2, flow, seed, sequence)
        values.append(matching.value)
    values = np.array(values)
    se = values.std(ddof=1) / np.sqrt(values.size)
    assert abs(values.mean() - 0.75) <= 3 * se
