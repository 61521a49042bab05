import math

import numpy as np
import pytest

from matching import fixtures
from matching.errors import CapacityError, UndefinedRatioError
from matching.harness import (
    check_lemmas,
    estimate_ratio,
    exact_summary,
    lower_bound_closed_forms,
    paired_ratio,
    simulate,
    theorem2_sweep,
)
from matching.instance import ArrivalSequence, ExpectationGraph, generate_lower_bound_instance, generate_random_instance
from matching.oracle import exact_dispatch_expectation, exact_opt_expectation, max_weight_perfect_matching
from matching.transport import solve_tpp
from oracles import tree_expectation


def test_single_trial_is_deterministic(example):
    first = simulate(example, "dispatch", 1, 5)
    second = simulate(example, "dispatch", 1, 5)
    assert first.values.shape == (1,)
    assert first.values.tolist() == second.values.tolist()


def test_results_do_not_depend_on_jobs(example):
    serial = simulate(example, "dispatch", 300, 17, jobs=1, block_size=64, with_opt=True, record_traces=True)
    parallel = simulate(example, "dispatch", 300, 17, jobs=2, block_size=64, with_opt=True, record_traces=True)
    assert np.array_equal(serial.values, parallel.values)
    assert np.array_equal(serial.opt_values, parallel.opt_values)
    assert np.array_equal(serial.assigned, parallel.assigned)


def test_policies_share_arrivals(example):
    runs = {
        policy: simulate(example, policy, 200, 3, block_size=50, with_opt=True, record_traces=True)
        for policy in ("dispatch", "greedy", "uniform")
    }
    types = runs["dispatch"].types
    for result in runs.values():
        assert np.array_equal(result.types, types)
        assert np.array_equal(result.opt_values, runs["dispatch"].opt_values)


def test_recorded_opt_values_match_offline_solver(example):
    result = simulate(example, "dispatch", 40, 8, with_opt=True, record_traces=True)
    for row, opt in zip(result.types, result.opt_values):
        sequence = ArrivalSequence(types=tuple(int(j) for j in row))
        assert opt == pytest.approx(max_weight_perfect_matching(example, sequence).value)


def test_example_mean_matches_exact_value(example, example_flow):
    exact = exact_dispatch_expectation(example, example_flow).value
    result = simulate(example, "dispatch", 20_000, 1, flow=example_flow)
    se = result.values.std(ddof=1) / math.sqrt(result.values.size)
    assert abs(result.values.mean() - exact) <= 4 * se


@pytest.mark.slow
def test_example_mean_matches_exact_value_at_scale(example, example_flow):
    exact = exact_dispatch_expectation(example, example_flow).value
    result = simulate(example, "dispatch", 100_000, 2, flow=example_flow, jobs=2)
    se = result.values.std(ddof=1) / math.sqrt(result.values.size)
    assert abs(result.values.mean() - exact) <= 3 * se


def test_uniform_mean_matches_branch_walk(lower_bound_2):
    flow = solve_tpp(lower_bound_2)
    expected, _ = tree_expectation(lower_bound_2, flow, policy="uniform")
    result = simulate(lower_bound_2, "uniform", 20_000, 4, flow=flow)
    se = result.values.std(ddof=1) / math.sqrt(result.values.size)
    assert abs(result.values.mean() - float(expected)) <= 4 * se


def test_constant_utilities_give_ratio_one():
    instance = ExpectationGraph(n=3, k=2, denominator=2, numerators=(1, 1), utilities=((1.0, 1.0),) * 3)
    estimate = estimate_ratio(instance, "dispatch", 500, 0)
    assert estimate.ratio == 1.0
    assert estimate.ratio_ci == (1.0, 1.0)


def test_zero_utilities_leave_ratio_undefined():
    instance = ExpectationGraph(n=2, k=1, denominator=1, numerators=(1,), utilities=((0.0,), (0.0,)))
    with pytest.raises(UndefinedRatioError) as info:
        estimate_ratio(instance, "dispatch", 10, 0)
    assert info.value.exit_code == 2


def test_paired_ratio_interval_contains_ratio():
    rng = np.random.default_rng(0)
    opt = rng.uniform(1.0, 2.0, size=1000)
    alg = opt * rng.uniform(0.4, 0.9, size=1000)
    estimate = paired_ratio("dispatch", alg, opt, 0)
    assert estimate.ratio_ci[0] < estimate.ratio < estimate.ratio_ci[1]
    assert estimate.z == pytest.approx(1.959964, abs=1e-6)


@pytest.mark.parametrize("policy", ["dispatch", "greedy", "uniform"])
def test_policies_never_beat_the_offline_optimum(example, policy):
    result = simulate(example, policy, 500, 6, with_opt=True)
    assert (result.values <= result.opt_values + 1e-12).all()


def test_lemma_checks_pass_on_example(example):
    report = check_lemmas(example, 200_000, 0)
    assert report.passed, [check.model_dump() for check in report.failures()]
    lemmas = {(check.lemma, check.mode) for check in report.checks}
    assert ("assignment_uniformity", "exact") in lemmas
    assert ("edge_bound_per_step", "exact") in lemmas
    assert list(report.to_frame().columns)[:3] == ["lemma", "mode", "statistic"]


def test_lemma_checks_single_worker(single_edge):
    report = check_lemmas(single_edge, 100, 0)
    assert report.passed


def test_corrupted_flow_fails_preferred_uniformity(example):
    report = check_lemmas(example, 50_000, 0, flow=fixtures.corrupted_flow())
    failed = {(check.lemma, check.mode) for check in report.failures()}
    assert ("preferred_uniformity", "empirical") in failed
    assert ("preferred_uniformity", "exact") in failed


def test_exact_summary_on_example(example):
    summary = exact_summary(example)
    assert summary.passed
    assert summary.tpp == pytest.approx(8.0)
    assert summary.opt_value <= summary.tpp + 1e-9
    assert summary.ratio == pytest.approx(summary.dispatch_value / summary.opt_value)


def test_exact_summary_undefined_ratio():
    instance = ExpectationGraph(n=2, k=1, denominator=1, numerators=(1,), utilities=((0.0,), (0.0,)))
    summary = exact_summary(instance)
    assert summary.ratio is None
    assert summary.passed


def test_closed_forms():
    forms = lower_bound_closed_forms(100, "1/10")
    assert forms["opt_closed_form"] == pytest.approx(100 * (1 - 0.999**100), rel=1e-12)
    assert forms["opt_closed_form"] == pytest.approx(9.5208, abs=1e-4)
    assert forms["online_upper_bound"] == pytest.approx(5.05)
    large = lower_bound_closed_forms(200, "0.02")
    assert large["ratio_limit"] == pytest.approx(0.50502, abs=1e-5)
    assert large["ratio_upper_bound"] == pytest.approx(0.5075, abs=1e-4)
    assert lower_bound_closed_forms(3, "3/4")["opt_closed_form"] == pytest.approx(111 / 64)


def test_small_sweep():
    frame = theorem2_sweep([2, 3], ["1/2"], 400, 0)
    assert list(frame["n"]) == [2, 3]
    assert list(frame["p_exact"]) == ["1/2", "1/2"]
    assert frame["within_bound"].all()
    assert (frame["ratio_lo"] <= frame["ratio"]).all()


def test_sweep_rejects_empty_grid():
    with pytest.raises(ValueError):
        theorem2_sweep([], ["1/2"], 10, 0)


def test_simulate_rejects_unknown_policy(example):
    with pytest.raises(ValueError):
        simulate(example, "random", 10, 0)


@pytest.mark.slow
def test_lower_bound_ratio_at_scale():
    instance = generate_lower_bound_instance(200, "0.02")
    estimate = estimate_ratio(instance, "dispatch", 100_000, 0, jobs=2)
    assert abs(estimate.ratio - 0.50502) <= 0.02


@pytest.mark.slow
def test_sweep_ratio_tracks_closed_form():
    frame = theorem2_sweep([10, 50, 200], ["0.02", "1/10"], 50_000, 1, jobs=2)
    assert frame["within_bound"].all()
    for _, row in frame.iterrows():
        assert row["ratio_lo"] - 0.01 <= row["ratio_upper_bound"]


def test_exact_summary_uses_requested_dp(lower_bound_2, example):
    summary = exact_summary(lower_bound_2, rational=True)
    assert summary.rational
    assert summary.dispatch_exact == "3/4"
    assert exact_summary(lower_bound_2).dispatch_exact is None
    with pytest.raises(CapacityError):
        exact_summary(example, max_n=4)


def test_opt_mean_matches_exact_expectation(example):
    exact = exact_opt_expectation(example).value
    result = simulate(example, "dispatch", 20_000, 3, with_opt=True)
    se = result.opt_values.std(ddof=1) / math.sqrt(result.opt_values.size)
    assert abs(result.opt_values.mean() - exact) <= 4 * se


def _exact_check_instances():
    return [
        ("example", fixtures.example_instance()),
        ("lower_bound_2", generate_lower_bound_instance(2, "1/2")),
        ("lower_bound_5", generate_lower_bound_instance(5, "3/4")),
        ("random_a", generate_random_instance(4, 3, 10.0, 10, 11)),
        ("random_b", generate_random_instance(6, 4, 10.0, 12, 12)),
    ]


@pytest.mark.slow
@pytest.mark.parametrize("name,instance", _exact_check_instances())
def test_monte_carlo_matches_exact_values(name, instance):
    flow = solve_tpp(instance)
    dispatch = exact_dispatch_expectation(instance, flow).value
    opt = exact_opt_expectation(instance).value
    result = simulate(instance, "dispatch", 100_000, 5, flow=flow, with_opt=True, jobs=2)
    for values, exact in ((result.values, dispatch), (result.opt_values, opt)):
        se = values.std(ddof=1) / math.sqrt(values.size)
        assert abs(values.mean() - exact) <= 3 * se + 1e-9, name


@pytest.mark.slow
def test_large_sweep_ratio_falls_with_p():
    frame = theorem2_sweep([200], ["0.4", "0.2", "0.1", "0.05", "0.02"], 100_000, 0, jobs=2)
    assert frame["ratio"].is_monotonic_decreasing
    assert frame["within_bound"].all()
    sigma = (frame["ratio_hi"] - frame["ratio_lo"]) / (2 * 1.959964)
    assert ((frame["ratio"] - frame["ratio_upper_bound"]).abs() <= 3 * sigma).all()
