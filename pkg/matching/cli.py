"""
Command-line front end.

    dispatch-matching solve fig1.json --format json
    dispatch-matching exact --generate example
    dispatch-matching lowerbound --n 100,200 --p 0.02,0.1 --trials 100000
    dispatch-matching reproduce-example

Primary output goes to stdout or --out; diagnostics go to stderr. Exit codes:
0 ok, 1 mismatch, 2 parse or validation error, 3 capacity error,
4 statistical check failure.
"""
import argparse
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from matching import fixtures
from matching.config import settings
from matching.dispatch import POLICIES, events_to_jsonl
from matching.errors import InstanceParseError, MatchingError, exit_code_for
from matching.harness import block_generators, check_lemmas, estimate_ratio, exact_summary, theorem2_sweep
from matching.instance import (
    ArrivalSequence,
    ExpectationGraph,
    dumps,
    generate_lower_bound_instance,
    generate_random_instance,
    load,
    parse_probability,
    sample_sequences,
)
from matching.oracle import exact_dispatch_expectation, exact_opt_expectation, max_weight_perfect_matching
from matching.reports import csv_document, json_document, normalise, write_output
from matching.transport import solve_tpp

logger = logging.getLogger(__name__)

INSTANCE_COMMANDS = {"solve", "run", "simulate", "exact", "lemmas", "gen"}


class RunConfig(BaseModel):
    """Everything a command needs; dumped verbatim into report provenance."""

    model_config = ConfigDict(frozen=True)

    command: str
    instance_path: Optional[str] = Field(default=None, description="Instance file to load.")
    generator: Optional[str] = Field(default=None, description="Generator spec, e.g. 'lowerbound:n=3,p=3/4'.")
    policy: str = "dispatch"
    trials: int = Field(default=settings.default_trials, ge=1)
    master_seed: int = settings.default_seed
    output_format: str = Field(default="csv", pattern="^(csv|json)$")
    output_path: Optional[str] = None
    jobs: int = Field(default=1, ge=1)
    max_exact_n: Optional[int] = Field(default=None, description="Override of the DP size bound.")
    rational: Optional[bool] = Field(default=None, description="Exact rational DP for the exact command.")
    edges: Optional[bool] = Field(default=None, description="Include edge probabilities in exact output.")
    sequence: Optional[str] = Field(default=None, description="1-based arrival sequence given to run.")
    corrupted_flow: Optional[bool] = Field(default=None, description="Replay the example with the infeasible flow.")

    @model_validator(mode="after")
    def _one_instance_source(self) -> "RunConfig":
        if self.command in INSTANCE_COMMANDS:
            sources = [s for s in (self.instance_path, self.generator) if s is not None]
            if len(sources) != 1:
                raise ValueError(f"'{self.command}' needs exactly one of an instance path or --generate")
        return self

    def provenance(self, **extra: Any) -> Dict[str, Any]:
        # jobs and the output path never change results, so they stay out of the document
        dumped = self.model_dump(exclude={"jobs", "output_path"})
        values = {key: value for key, value in dumped.items() if value is not None}
        values.update(extra)
        return values


def parse_generator(spec: str) -> ExpectationGraph:
    """
    Builds an instance from a generator spec.

    Forms: 'example', 'lowerbound:n=3,p=3/4',
    'random:n=3,k=2,bound=10,den=10,seed=7'.
    """
    name, _, arguments = spec.partition(":")
    params: Dict[str, str] = {}
    for item in filter(None, arguments.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise InstanceParseError(f"expected key=value, got '{item}'", field="generate")
        params[key.strip()] = value.strip()
    try:
        if name == "example":
            return fixtures.example_instance()
        if name == "lowerbound":
            return generate_lower_bound_instance(int(params["n"]), parse_probability(params["p"]))
        if name == "random":
            return generate_random_instance(
                n=int(params["n"]),
                k=int(params["k"]),
                utility_bound=float(params.get("bound", 10)),
                denominator=int(params.get("den", 10)),
                seed=int(params.get("seed", 0)),
            )
    except KeyError as e:
        raise InstanceParseError(f"generator '{name}' is missing parameter {e}", field="generate") from e
    raise InstanceParseError(f"unknown generator '{name}'", field="generate")


def _instance(config: RunConfig) -> ExpectationGraph:
    if config.generator is not None:
        return parse_generator(config.generator)
    return load(config.instance_path)


def _emit(config: RunConfig, frame: pd.DataFrame, result: Any, **extra: Any) -> None:
    provenance = config.provenance(**extra)
    if config.output_format == "json":
        text = json_document(result, provenance)
    else:
        text = csv_document(frame, provenance)
    write_output(text, config.output_path)


def cmd_solve(config: RunConfig, args: argparse.Namespace) -> int:
    instance = _instance(config)
    solution = solve_tpp(instance)
    rows = [
        {
            "worker": w + 1,
            "job_type": j + 1,
            "utility": instance.utilities[w][j],
            "flow": float(f),
            "flow_exact": str(f),
        }
        for w, row in enumerate(solution.flow)
        for j, f in enumerate(row)
        if f
    ]
    _emit(config, pd.DataFrame(rows), solution.to_json_dict(), objective=solution.objective)
    return 0


def _parse_sequence(text: str, instance: ExpectationGraph) -> ArrivalSequence:
    try:
        types = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise InstanceParseError(f"sequence must be comma-separated integers: {e}", field="sequence") from e
    return ArrivalSequence.from_one_based(types).validate_for(instance)


def cmd_run(config: RunConfig, args: argparse.Namespace) -> int:
    instance = _instance(config)
    if config.sequence:
        sequence = _parse_sequence(config.sequence, instance)
    else:
        arrivals = block_generators(config.master_seed, 0)[0]
        sequence = ArrivalSequence(types=tuple(int(j) for j in sample_sequences(instance, arrivals, 1)[0]))
    flow = solve_tpp(instance)
    matching, events = POLICIES[config.policy](instance, flow, config.master_seed, sequence)
    optimum = max_weight_perfect_matching(instance, sequence)
    summary = {"sequence": sequence.one_based(), "value": matching.value, "opt_value": optimum.value}
    _emit_trace(config, events, summary)
    return 0


def _emit_trace(config: RunConfig, events: Sequence[Any], summary: Dict[str, Any]) -> None:
    provenance = config.provenance()
    if config.output_format == "json":
        tail = json.dumps({"summary": normalise(summary), "provenance": normalise(provenance)}) + "\n"
        write_output(events_to_jsonl(events) + tail, config.output_path)
        return
    frame = pd.DataFrame([event.to_json_dict() for event in events])
    if not frame.empty:
        frame["available"] = frame["available"].map(lambda ws: " ".join(str(w) for w in ws))
    scalars = {key: value for key, value in summary.items() if not isinstance(value, (list, dict))}
    write_output(csv_document(frame, {**provenance, **scalars}), config.output_path)


def cmd_simulate(config: RunConfig, args: argparse.Namespace) -> int:
    instance = _instance(config)
    estimate = estimate_ratio(instance, config.policy, config.trials, config.master_seed, jobs=config.jobs)
    row = estimate.model_dump()
    lo, hi = row.pop("ratio_ci")
    row.update(ratio_lo=lo, ratio_hi=hi)
    _emit(config, pd.DataFrame([row]), estimate)
    return 0


def cmd_exact(config: RunConfig, args: argparse.Namespace) -> int:
    instance = _instance(config)
    flow = solve_tpp(instance)
    dispatch = exact_dispatch_expectation(instance, flow, rational=bool(config.rational), max_n=config.max_exact_n)
    summary = exact_summary(instance, flow, dispatch=dispatch)
    rows: List[Dict[str, Any]] = [
        {"quantity": "TPP", "value": summary.tpp, "bound": np.nan, "status": ""},
        {"quantity": "E[DISPATCH]", "value": summary.dispatch_value, "bound": np.nan, "status": "", "exact": summary.dispatch_exact},
        {"quantity": "E[OPT]", "value": summary.opt_value, "bound": np.nan, "status": ""},
        {"quantity": "ratio", "value": np.nan if summary.ratio is None else summary.ratio, "bound": np.nan, "status": ""},
    ]
    rows += [
        {"quantity": check.name, "value": check.left, "bound": check.right, "status": "PASS" if check.passed else "FAIL"}
        for check in summary.inequalities
    ]
    result: Dict[str, Any] = summary.model_dump()
    if config.edges:
        result["dispatch"] = dispatch.to_json_dict(include_edges=True)
        result["opt"] = exact_opt_expectation(instance).to_json_dict()
    _emit(config, pd.DataFrame(rows), result)
    if not summary.passed:
        logger.error(f"Inequality chain failed: {[c.name for c in summary.inequalities if not c.passed]}")
        return 1
    return 0


def cmd_lemmas(config: RunConfig, args: argparse.Namespace) -> int:
    instance = _instance(config)
    report = check_lemmas(instance, config.trials, config.master_seed, jobs=config.jobs)
    frame = report.to_frame()
    _emit(config, frame, {"passed": report.passed, "checks": report.checks})
    for check in report.failures():
        logger.error(f"FAIL {check.lemma} ({check.mode}): {check.statistic} = {check.observed}, expected {check.expected} +/- {check.tolerance}")
    return 0 if report.passed else 4


def _split(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def cmd_lowerbound(config: RunConfig, args: argparse.Namespace) -> int:
    n_values = [int(x) for x in _split(args.n)]
    p_values = [parse_probability(x) for x in _split(args.p)]
    frame = theorem2_sweep(n_values, p_values, config.trials, config.master_seed, jobs=config.jobs)
    _emit(config, frame, frame, n=args.n, p=args.p)
    return 0


def cmd_gen(config: RunConfig, args: argparse.Namespace) -> int:
    write_output(dumps(_instance(config)), config.output_path)
    return 0


def cmd_reproduce_example(config: RunConfig, args: argparse.Namespace) -> int:
    flow = fixtures.corrupted_flow() if config.corrupted_flow else None
    outcome = fixtures.reproduce_example(flow)
    _emit_trace(config, outcome.events, outcome.to_json_dict())
    for mismatch in outcome.mismatches:
        sys.stderr.write(f"MISMATCH {mismatch}\n")
    return 0 if outcome.passed else 1


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "solve": cmd_solve,
    "run": cmd_run,
    "simulate": cmd_simulate,
    "exact": cmd_exact,
    "lemmas": cmd_lemmas,
    "lowerbound": cmd_lowerbound,
    "gen": cmd_gen,
    "reproduce-example": cmd_reproduce_example,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=settings.default_seed, help="Master seed (default %(default)s).")
    common.add_argument("--format", choices=["csv", "json"], default="csv", help="Output format.")
    common.add_argument("--out", default=None, help="Output file; stdout when omitted.")
    common.add_argument("--jobs", type=int, default=1, help="Worker processes for simulations.")
    common.add_argument("--log-level", default=settings.log_level, help="Log level for stderr diagnostics.")

    source = argparse.ArgumentParser(add_help=False)
    source.add_argument("path", nargs="?", default=None, help="Instance JSON file.")
    source.add_argument("--instance", default=None, help="Instance JSON file.")
    source.add_argument("--generate", default=None, help="Generator spec: example | lowerbound:n=,p= | random:n=,k=,bound=,den=,seed=")

    trials = argparse.ArgumentParser(add_help=False)
    trials.add_argument("--trials", type=int, default=settings.default_trials, help="Monte Carlo replications.")

    parser = argparse.ArgumentParser(prog="dispatch-matching", description="Online weighted matching with i.i.d. arrivals.")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("solve", parents=[common, source], help="Solve the transportation problem; columns worker, job_type, utility, flow, flow_exact.")

    run = commands.add_parser("run", parents=[common, source], help="Run one policy on one arrival sequence and print its trace.")
    run.add_argument("--policy", choices=sorted(POLICIES), default="dispatch")
    run.add_argument("--sequence", default=None, help="1-based job types, e.g. 3,1,2,2,3; sampled from --seed when omitted.")

    simulate = commands.add_parser("simulate", parents=[common, source, trials], help="Paired Monte Carlo ratio estimate; columns as RatioEstimate.")
    simulate.add_argument("--policy", choices=sorted(POLICIES), default="dispatch")

    exact = commands.add_parser("exact", parents=[common, source], help="Exact TPP, E[DISPATCH], E[OPT] and the inequality chain.")
    exact.add_argument("--max-n", type=int, default=None, help="Override the DP size bound.")
    exact.add_argument("--rational", action="store_true", help="Use the exact rational DP (small n).")
    exact.add_argument("--edges", action="store_true", help="Include edge probabilities in JSON output.")

    commands.add_parser("lemmas", parents=[common, source, trials], help="Statistical and exact property checks; one row per check.")

    lowerbound = commands.add_parser("lowerbound", parents=[common, trials], help="Lower-bound sweep; one row per (n, p).")
    lowerbound.add_argument("--n", required=True, help="Comma-separated worker counts.")
    lowerbound.add_argument("--p", required=True, help="Comma-separated probabilities, e.g. 0.02,1/10.")

    commands.add_parser("gen", parents=[common, source], help="Write the canonical instance JSON.")

    reproduce = commands.add_parser("reproduce-example", parents=[common], help="Replay the worked example with forced draws.")
    reproduce.add_argument("--corrupted-flow", action="store_true", help="Replay with a deliberately infeasible flow.")
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    path = getattr(args, "path", None)
    instance = getattr(args, "instance", None)
    if path is not None and instance is not None:
        raise ValueError("give the instance either as a positional path or with --instance, not both")
    return RunConfig(
        command=args.command,
        instance_path=path if path is not None else instance,
        generator=getattr(args, "generate", None),
        policy=getattr(args, "policy", "dispatch"),
        trials=getattr(args, "trials", settings.default_trials),
        master_seed=args.seed,
        output_format=args.format,
        output_path=args.out,
        jobs=args.jobs,
        max_exact_n=getattr(args, "max_n", None),
        rational=getattr(args, "rational", None),
        edges=getattr(args, "edges", None),
        sequence=getattr(args, "sequence", None),
        corrupted_flow=getattr(args, "corrupted_flow", None),
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = _config(args)
        return COMMANDS[config.command](config, args)
    except Exception as e:
        code = exit_code_for(e)
        if isinstance(e, (MatchingError, ValueError, OSError)):
            logger.error(f"{type(e).__name__}: {e}")
        else:
            logger.exception(f"Unexpected failure in '{args.command}': {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
