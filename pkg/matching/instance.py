"""
Problem instances: expectation graphs, arrival sequences and perfect matchings.

An expectation graph holds n workers, k job types, a non-negative utility
matrix and an exact rational distribution over job types (integer numerators
over one shared denominator D).
"""
import json
import logging
import math
import os
from fractions import Fraction
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, StrictInt, ValidationError, model_validator

from matching.errors import (
    DimensionError,
    InstanceParseError,
    InstanceValidationError,
    InvalidArrivalError,
)

logger = logging.getLogger(__name__)

ProbabilityLike = Union[Fraction, int, str]


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    field: str = Field(description="Name of the offending field or cell.")
    message: str = Field(description="Human-readable description of the violation.")
    severity: str = Field(default="error", description="'error' for invariant violations, 'warning' for notes.")

    def __str__(self) -> str:
        return f"[{self.severity}] {self.field}: {self.message}"


class ExpectationGraph(BaseModel):
    """
    Complete bipartite graph between workers and job types.

    Field order is the canonical serialization order of the instance file.
    Shape consistency is enforced on construction; value invariants are
    reported by violations() so that invalid instances can still be inspected.
    """

    model_config = ConfigDict(frozen=True)

    n: StrictInt = Field(description="Number of workers.")
    k: StrictInt = Field(description="Number of job types.")
    denominator: StrictInt = Field(description="Shared denominator D of the type probabilities.")
    numerators: Tuple[StrictInt, ...] = Field(description="Probability numerators; p_j = numerators[j] / D.")
    utilities: Tuple[Tuple[float, ...], ...] = Field(description="n x k utility matrix u_wj.")

    @model_validator(mode="after")
    def _check_shape(self) -> "ExpectationGraph":
        if len(self.numerators) != self.k:
            raise ValueError(f"numerators has {len(self.numerators)} entries, expected k={self.k}")
        if len(self.utilities) != self.n:
            raise ValueError(f"utilities has {len(self.utilities)} rows, expected n={self.n}")
        for w, row in enumerate(self.utilities):
            if len(row) != self.k:
                raise ValueError(f"utilities row {w + 1} has {len(row)} entries, expected k={self.k}")
        return self

    @property
    def probabilities(self) -> Tuple[Fraction, ...]:
        return tuple(Fraction(num, self.denominator) for num in self.numerators)

    @property
    def expected_counts(self) -> Tuple[Fraction, ...]:
        """r_j = n * p_j, always derived."""
        return tuple(self.n * p for p in self.probabilities)

    @property
    def utility_matrix(self) -> np.ndarray:
        matrix = np.array(self.utilities, dtype=float).reshape(self.n, self.k)
        matrix.setflags(write=False)
        return matrix

    @property
    def support(self) -> Tuple[int, ...]:
        """Job types that can actually arrive."""
        return tuple(j for j, num in enumerate(self.numerators) if num > 0)

    @property
    def cumulative_numerators(self) -> np.ndarray:
        return np.cumsum(np.asarray(self.numerators, dtype=np.int64))

    def violations(self) -> List[Violation]:
        """
        Lists every invariant violation of this instance.

        Returns:
            Error-level violations for broken invariants plus warning-level
            notes for job types that can never arrive. Empty when the
            instance is fully valid.
        """
        violations: List[Violation] = []
        if self.n < 1:
            violations.append(Violation(field="n", message=f"must be at least 1, got {self.n}"))
        if self.k < 1:
            violations.append(Violation(field="k", message=f"must be at least 1, got {self.k}"))
        if self.denominator < 1:
            violations.append(Violation(field="denominator", message=f"must be a positive integer, got {self.denominator}"))
            return violations

        for j, num in enumerate(self.numerators):
            if num < 0:
                violations.append(Violation(field=f"numerators[{j + 1}]", message=f"probability of type {j + 1} is negative ({num}/{self.denominator})"))
        total = Fraction(sum(self.numerators), self.denominator)
        if total != 1:
            violations.append(Violation(field="numerators", message=f"distribution sums to {total}, expected exactly 1"))

        for w, row in enumerate(self.utilities):
            for j, value in enumerate(row):
                if not math.isfinite(value):
                    violations.append(Violation(field=f"utilities[w{w + 1}][j{j + 1}]", message=f"utility is not finite ({value})"))
                elif value < 0:
                    violations.append(Violation(field=f"utilities[w{w + 1}][j{j + 1}]", message=f"utility is negative ({value})"))

        for j, num in enumerate(self.numerators):
            if num == 0:
                violations.append(Violation(field=f"numerators[{j + 1}]", message=f"type {j + 1} has probability 0 and is never sampled", severity="warning"))
        return violations

    def errors(self) -> List[Violation]:
        return [v for v in self.violations() if v.severity == "error"]

    def is_valid(self) -> bool:
        return not self.errors()

    def require_valid(self) -> "ExpectationGraph":
        """Raises InstanceValidationError unless every invariant holds."""
        errors = self.errors()
        if errors:
            raise InstanceValidationError(errors)
        return self


def validate(instance: ExpectationGraph) -> List[Violation]:
    return instance.violations()


class ArrivalSequence(BaseModel):
    """Realization j_1..j_n of job types, stored 0-based."""

    model_config = ConfigDict(frozen=True)

    types: Tuple[StrictInt, ...] = Field(description="Job type arriving at each time step (0-based).")

    @classmethod
    def from_one_based(cls, types: Sequence[int]) -> "ArrivalSequence":
        return cls(types=tuple(int(t) - 1 for t in types))

    def one_based(self) -> List[int]:
        return [t + 1 for t in self.types]

    def __len__(self) -> int:
        return len(self.types)

    def counts(self, k: int) -> Tuple[int, ...]:
        """Number of arrivals of each job type."""
        return tuple(int(c) for c in np.bincount(np.asarray(self.types, dtype=np.int64), minlength=k))

    def validate_for(self, instance: ExpectationGraph) -> "ArrivalSequence":
        """
        Checks that this sequence can occur under the given instance.

        Raises:
            DimensionError: If the length differs from n.
            InvalidArrivalError: If a type is out of range or has p_j = 0.
        """
        if len(self.types) != instance.n:
            raise DimensionError(f"sequence has {len(self.types)} arrivals, instance has n={instance.n} workers")
        for t, j in enumerate(self.types):
            if not 0 <= j < instance.k:
                raise InvalidArrivalError(f"arrival {t + 1} has type {j + 1}, outside 1..{instance.k}")
            if instance.numerators[j] == 0:
                raise InvalidArrivalError(f"arrival {t + 1} has type {j + 1}, which has probability 0")
        return self


def sample_sequences(instance: ExpectationGraph, rng: np.random.Generator, size: int) -> np.ndarray:
    """
    Draws `size` i.i.d. arrival sequences as a (size, n) integer matrix.

    Each type is drawn as a uniform integer in [0, D) located against the
    exact integer cumulative numerators.
    """
    draws = rng.integers(0, instance.denominator, size=(size, instance.n))
    return np.searchsorted(instance.cumulative_numerators, draws, side="right")


def sample_sequence(instance: ExpectationGraph, rng: np.random.Generator) -> ArrivalSequence:
    types = sample_sequences(instance, rng, 1)[0]
    return ArrivalSequence(types=tuple(int(j) for j in types))


class Matching(BaseModel):
    """Perfect matching between workers and the jobs of one realization."""

    model_config = ConfigDict(frozen=True)

    assignment: Tuple[StrictInt, ...] = Field(description="Worker assigned to the job arriving at each time step.")
    value: float = Field(description="Total utility of the matched edges.")

    @classmethod
    def build(cls, instance: ExpectationGraph, sequence: ArrivalSequence, assignment: Sequence[int]) -> "Matching":
        utilities = instance.utility_matrix
        value = math.fsum(float(utilities[w, j]) for w, j in zip(assignment, sequence.types))
        return cls(assignment=tuple(int(w) for w in assignment), value=value)

    def indicators(self, instance: ExpectationGraph, sequence: ArrivalSequence) -> np.ndarray:
        """I_wj = 1 iff worker w was matched to a job of type j."""
        matrix = np.zeros((instance.n, instance.k), dtype=np.int64)
        for w, j in zip(self.assignment, sequence.types):
            matrix[w, j] = 1
        return matrix

    def violations(self, instance: ExpectationGraph, sequence: ArrivalSequence) -> List[str]:
        problems = []
        if len(self.assignment) != instance.n:
            problems.append(f"assignment covers {len(self.assignment)} steps, expected {instance.n}")
        if sorted(self.assignment) != list(range(instance.n)):
            problems.append("assignment is not a permutation of the workers")
            return problems
        recomputed = Matching.build(instance, sequence, self.assignment).value
        if not math.isclose(self.value, recomputed, rel_tol=1e-12, abs_tol=1e-12):
            problems.append(f"value {self.value} differs from recomputed {recomputed}")
        return problems


def parse_probability(value: ProbabilityLike) -> Fraction:
    """Parses '3/4', '0.02', 1 or a Fraction into an exact rational."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ValueError(f"not a probability: {value!r}")
    if isinstance(value, float):
        return Fraction(repr(value))
    try:
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError) as e:
        raise ValueError(f"not an exact rational probability: {value!r}") from e


def generate_lower_bound_instance(n: int, p: ProbabilityLike) -> ExpectationGraph:
    """
    Builds the k = n+1 family where no online algorithm beats one half.

    Types 1..n arrive with probability p/n each and carry utility 1 only on
    their own worker; type n+1 arrives with probability 1-p and is worthless.

    Args:
        n: Number of workers, at least 1.
        p: Total probability mass of the diagonal types, strictly in (0, 1).

    Returns:
        The lower-bound expectation graph with shared denominator n * den(p).
    """
    p = parse_probability(p)
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if not 0 < p < 1:
        raise ValueError(f"p must lie strictly between 0 and 1, got {p}")
    denominator = n * p.denominator
    numerators = tuple([p.numerator] * n + [denominator - n * p.numerator])
    utilities = tuple(tuple(1.0 if w == j else 0.0 for j in range(n + 1)) for w in range(n))
    logger.info(f"Generated lower-bound instance n={n}, p={p}")
    return ExpectationGraph(n=n, k=n + 1, denominator=denominator, numerators=numerators, utilities=utilities)


def _random_composition(rng: np.random.Generator, total: int, parts: int) -> List[int]:
    if parts == 1:
        return [total]
    if total >= parts:
        cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
        return [int(x) for x in np.diff(np.concatenate(([0], cuts, [total])))]
    # Stars and bars; some parts are zero
    bars = np.sort(rng.choice(total + parts - 1, size=parts - 1, replace=False))
    return [int(x) for x in np.diff(np.concatenate(([-1], bars, [total + parts - 1]))) - 1]


def generate_random_instance(n: int, k: int, utility_bound: float, denominator: int, seed: int) -> ExpectationGraph:
    """
    Draws a reproducible random instance.

    Args:
        n: Number of workers.
        k: Number of job types.
        utility_bound: Utilities are uniform in [0, utility_bound].
        denominator: Shared probability denominator. When it is at least k
            every type gets positive probability.
        seed: Seed for numpy's default generator.

    Returns:
        A valid ExpectationGraph, identical for identical arguments.
    """
    if n < 1 or k < 1:
        raise ValueError(f"n and k must be at least 1, got n={n}, k={k}")
    if utility_bound <= 0:
        raise ValueError(f"utility_bound must be positive, got {utility_bound}")
    if denominator < 1:
        raise ValueError(f"denominator must be at least 1, got {denominator}")
    rng = np.random.default_rng(seed)
    utilities = rng.uniform(0.0, utility_bound, size=(n, k))
    numerators = _random_composition(rng, denominator, k)
    return ExpectationGraph(
        n=n,
        k=k,
        denominator=denominator,
        numerators=tuple(numerators),
        utilities=tuple(tuple(float(u) for u in row) for row in utilities),
    )


def to_json_dict(instance: ExpectationGraph) -> Dict[str, Any]:
    return instance.model_dump(mode="python")


def dumps(instance: ExpectationGraph) -> str:
    payload = to_json_dict(instance)
    payload["numerators"] = list(payload["numerators"])
    payload["utilities"] = [list(row) for row in payload["utilities"]]
    return json.dumps(payload, indent=2) + "\n"


def save(instance: ExpectationGraph, destination: Union[str, os.PathLike]) -> str:
    """
    Writes the canonical JSON form of an instance.

    Args:
        instance: The instance to persist.
        destination: Target file path.

    Returns:
        The path written.
    """
    destination = os.fspath(destination)
    try:
        with open(destination, "w", encoding="utf-8") as f:
            f.write(dumps(instance))
        logger.info(f"Saved instance n={instance.n}, k={instance.k} to {destination}")
        return destination
    except IOError as e:
        logger.error(f"Failed to save instance to {destination}: {e}")
        raise


def loads(text: str, strict: bool = True) -> ExpectationGraph:
    """
    Parses an instance document.

    Raises:
        InstanceParseError: Malformed JSON or wrongly shaped fields.
        InstanceValidationError: Well-formed but violating invariants
            (only when strict).
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise InstanceParseError(e.msg, line=e.lineno) from e
    if not isinstance(data, dict):
        raise InstanceParseError("top-level value must be a JSON object", line=1)
    missing = [key for key in ExpectationGraph.model_fields if key not in data]
    if missing:
        raise InstanceParseError("required field is missing", field=missing[0])
    try:
        instance = ExpectationGraph.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or None
        raise InstanceParseError(first["msg"], field=field) from e

    for note in instance.violations():
        if note.severity == "warning":
            logger.warning(f"Instance note: {note}")
    if strict:
        instance.require_valid()
    return instance


def load(source: Union[str, os.PathLike], strict: bool = True) -> ExpectationGraph:
    source = os.fspath(source)
    try:
        with open(source, "r", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        logger.error(f"Instance file not found: {source}")
        raise InstanceParseError(f"no such file: {source}")
    instance = loads(text, strict=strict)
    logger.info(f"Loaded instance n={instance.n}, k={instance.k} from {source}")
    return instance
