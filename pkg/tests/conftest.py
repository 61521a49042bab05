import pytest

from matching import fixtures
from matching.instance import ExpectationGraph, generate_lower_bound_instance


@pytest.fixture
def example():
    return fixtures.example_instance()


@pytest.fixture
def example_flow():
    return fixtures.published_flow()


@pytest.fixture
def example_sequence():
    return fixtures.example_sequence()


@pytest.fixture
def lower_bound_2():
    return generate_lower_bound_instance(2, "1/2")


@pytest.fixture
def single_edge():
    return ExpectationGraph(n=1, k=1, denominator=1, numerators=(1,), utilities=((5.0,),))
