import json
from fractions import Fraction

import numpy as np
import pytest

from matching.errors import DimensionError, InstanceParseError, InstanceValidationError, InvalidArrivalError
from matching.instance import (
    ArrivalSequence,
    ExpectationGraph,
    Matching,
    dumps,
    generate_lower_bound_instance,
    generate_random_instance,
    load,
    loads,
    parse_probability,
    sample_sequence,
    save,
    validate,
)


def test_example_is_valid(example):
    assert validate(example) == []
    assert example.probabilities == (Fraction(1, 2), Fraction(3, 10), Fraction(1, 5))
    assert example.expected_counts == (Fraction(5, 2), Fraction(3, 2), Fraction(1))
    assert sum(example.expected_counts) == example.n


def test_distribution_not_summing_to_one():
    instance = ExpectationGraph(n=1, k=3, denominator=10, numerators=(5, 3, 1), utilities=((1.0, 1.0, 1.0),))
    violations = validate(instance)
    assert len(violations) == 1
    assert violations[0].field == "numerators"
    assert "9/10" in violations[0].message


def test_negative_utility_names_cell(example):
    rows = [list(row) for row in example.utilities]
    rows[0][0] = -1.0
    instance = example.model_copy(update={"utilities": tuple(tuple(r) for r in rows)})
    violations = validate(instance)
    assert len(violations) == 1
    assert violations[0].field == "utilities[w1][j1]"
    with pytest.raises(InstanceValidationError):
        instance.require_valid()


def test_zero_probability_type_is_a_warning():
    instance = ExpectationGraph(n=2, k=3, denominator=2, numerators=(1, 1, 0), utilities=((1.0, 0.0, 4.0), (0.0, 1.0, 4.0)))
    notes = validate(instance)
    assert [v.severity for v in notes] == ["warning"]
    assert instance.is_valid()
    assert instance.support == (0, 1)


def test_non_finite_utility_is_an_error():
    instance = ExpectationGraph(n=1, k=1, denominator=1, numerators=(1,), utilities=((float("nan"),),))
    assert not instance.is_valid()


def test_lower_bound_two_workers():
    instance = generate_lower_bound_instance(2, Fraction(1, 2))
    assert instance.k == 3
    assert instance.probabilities == (Fraction(1, 4), Fraction(1, 4), Fraction(1, 2))
    assert instance.utilities == ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))


def test_lower_bound_single_worker():
    instance = generate_lower_bound_instance(1, "1/2")
    assert instance.k == 2
    assert instance.probabilities == (Fraction(1, 2), Fraction(1, 2))
    assert instance.utilities == ((1.0, 0.0),)


@pytest.mark.parametrize("n, p", [(3, "3/4"), (6, "0.02"), (10, Fraction(1, 3))])
def test_lower_bound_structure(n, p):
    instance = generate_lower_bound_instance(n, p)
    u = instance.utility_matrix
    assert u.sum() == n
    assert np.array_equal(u[:, :n], np.eye(n))
    assert not u[:, n].any()
    assert sum(instance.probabilities) == 1
    assert sum(instance.expected_counts) == n


@pytest.mark.parametrize("p", ["0", "1", "3/2", "-1/4"])
def test_lower_bound_rejects_p_outside_open_interval(p):
    with pytest.raises(ValueError):
        generate_lower_bound_instance(3, p)


def test_parse_probability():
    assert parse_probability("0.02") == Fraction(1, 50)
    assert parse_probability("3/4") == Fraction(3, 4)
    assert parse_probability(1) == Fraction(1)
    with pytest.raises(ValueError):
        parse_probability("half")


def test_random_instance_is_deterministic():
    first = generate_random_instance(3, 2, 10, 10, 7)
    second = generate_random_instance(3, 2, 10, 10, 7)
    assert first == second
    assert validate(first) == []


def test_random_instance_degenerate_size():
    instance = generate_random_instance(1, 1, 5, 1, 0)
    assert instance.probabilities == (Fraction(1),)
    assert 0.0 <= instance.utilities[0][0] <= 5.0


@pytest.mark.parametrize("seed", range(10))
def test_random_instances_are_valid(seed):
    instance = generate_random_instance(4, 3, 2.5, 6, seed)
    assert instance.is_valid()
    assert all(p > 0 for p in instance.probabilities)


def test_random_instance_with_small_denominator_allows_zero_types():
    instance = generate_random_instance(3, 5, 1.0, 2, 4)
    assert instance.is_valid()
    assert sum(instance.numerators) == 2


def test_random_instance_rejects_bad_denominator():
    with pytest.raises(ValueError):
        generate_random_instance(2, 2, 1.0, 0, 0)


def test_save_load_round_trip(tmp_path, example):
    path = save(example, tmp_path / "fig1.json")
    restored = load(path)
    assert restored == example
    assert restored.probabilities == example.probabilities


def test_canonical_key_order(example):
    assert list(json.loads(dumps(example))) == ["n", "k", "denominator", "numerators", "utilities"]


def test_load_accepts_any_key_order(tmp_path, example):
    data = json.loads(dumps(example))
    shuffled = {key: data[key] for key in reversed(list(data))}
    path = tmp_path / "shuffled.json"
    path.write_text(json.dumps(shuffled))
    assert load(path) == example


def test_load_rejects_distribution_summing_to_two(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"n": 1, "k": 2, "denominator": 2, "numerators": [2, 2], "utilities": [[1, 1]]}))
    with pytest.raises(InstanceValidationError) as info:
        load(path)
    assert info.value.exit_code == 2


def test_load_missing_utilities_row_is_a_parse_error():
    text = json.dumps({"n": 2, "k": 1, "denominator": 1, "numerators": [1], "utilities": [[1.0]]})
    with pytest.raises(InstanceParseError):
        loads(text)


def test_load_rejects_float_probabilities():
    text = json.dumps({"n": 1, "k": 2, "denominator": 2, "numerators": [0.5, 1.5], "utilities": [[1, 1]]})
    with pytest.raises(InstanceParseError) as info:
        loads(text)
    assert info.value.field.startswith("numerators")


def test_load_reports_line_of_malformed_json():
    with pytest.raises(InstanceParseError) as info:
        loads('{\n  "n": 1,\n  "k": oops\n}')
    assert info.value.line == 3


def test_load_missing_file(tmp_path):
    with pytest.raises(InstanceParseError):
        load(tmp_path / "missing.json")


def test_sequence_validation(example):
    ArrivalSequence.from_one_based([3, 1, 2, 2, 3]).validate_for(example)
    with pytest.raises(DimensionError):
        ArrivalSequence(types=(0, 1)).validate_for(example)
    with pytest.raises(InvalidArrivalError):
        ArrivalSequence(types=(0, 1, 2, 3, 0)).validate_for(example)


def test_sequence_counts(example_sequence, example):
    assert example_sequence.one_based() == [3, 1, 2, 2, 3]
    assert example_sequence.counts(example.k) == (1, 2, 2)


def test_sampled_sequences_skip_zero_probability_types():
    instance = ExpectationGraph(n=3, k=3, denominator=2, numerators=(1, 0, 1), utilities=((1.0, 1.0, 1.0),) * 3)
    rng = np.random.default_rng(0)
    for _ in range(50):
        sequence = sample_sequence(instance, rng)
        assert 1 not in sequence.types
        sequence.validate_for(instance)


def test_matching_checks(example, example_sequence):
    matching = Matching.build(example, example_sequence, [3, 1, 2, 4, 0])
    assert matching.value == 6.0
    assert matching.violations(example, example_sequence) == []
    assert matching.indicators(example, example_sequence).sum() == 5

    broken = Matching(assignment=(3, 3, 2, 4, 0), value=6.0)
    assert broken.violations(example, example_sequence)
    wrong_value = Matching(assignment=(3, 1, 2, 4, 0), value=7.0)
    assert wrong_value.violations(example, example_sequence)
