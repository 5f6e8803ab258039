"""Command-line entry point: ``ddp-grid validate|run|compare|generate``.

Exit codes are 0 on success, 1 when an input fails validation and 2 for
any other runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .errors import DDPError, ScenarioError
from .grid_operator import (
    compare,
    deployed_by_component,
    deployed_reduction,
    generate_system,
    load_command_sequence,
    qualified_payment,
    run_command_sequence,
    SequenceStep,
)
from .network import FaultEvent
from .scenario import Scenario, check_fault_refs, dump_scenario, faults_for, load_scenario, validate_file
from .simnet import DEFAULT_K, run

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
SEED_ENV = "DDP_GRID_SEED"


class _Invalid(Exception):
    """Bad user input detected after argument parsing."""


def parse_fault(text: str) -> FaultEvent:
    """Parse ``kind:args@iteration``.

    ``link_loss:9-14@5``, ``agent_loss:10@5``, ``load_disconnect:10=100@5``
    and ``<kind>:<value>@<iteration>`` for the scalar kinds.
    """
    try:
        head, at = text.rsplit("@", 1)
        kind, _, args = head.partition(":")
        it = int(at)
        if kind == "link_loss":
            i, j = args.split("-")
            return FaultEvent(kind, it, edge=(int(i), int(j)))
        if kind == "agent_loss":
            return FaultEvent(kind, it, user=int(args))
        if kind == "load_disconnect":
            user, clamp = args.split("=")
            return FaultEvent(kind, it, user=int(user), clamp_mw=float(clamp))
        return FaultEvent(kind, it, value=float(args))
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"bad fault {text!r}: expected kind:args@iteration") from exc


def _seeds(args: argparse.Namespace) -> list[Optional[int]]:
    if args.seed:
        return list(args.seed)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return [int(env)]
        except ValueError as exc:
            raise _Invalid(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return [None]


def _configure(args: argparse.Namespace, seed: Optional[int]) -> Scenario:
    scenario = load_scenario(args.scenario)
    faults = [parse_fault(f) for f in args.fault or ()]
    for f in faults:
        check_fault_refs(scenario, f)
    if faults:
        scenario = faults_for(scenario, faults)
    return scenario.with_overrides(seed=seed, max_iterations=args.max_iterations,
                                   packet_loss=args.packet_loss, mean_delay_ms=args.mean_delay_ms)


def _parallel(fn: Callable[..., Any], jobs: int, items: Sequence[Any]) -> list[Any]:
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


# run

def _run_one(args: argparse.Namespace, seed: Optional[int], stem: str) -> dict:
    scenario = _configure(args, seed)
    trace = run(scenario, args.mode, args.K)
    rate, payment = qualified_payment(trace)
    extra = {
        "scenario": scenario.name or str(args.scenario),
        "seed": scenario.seed,
        "deployed_reduction_mw": deployed_reduction(trace),
        "reduction_by_component": [{"users": c, "reduction_mw": r} for c, r in deployed_by_component(trace)],
        "incentive_rate": rate,
        "payment": payment,
    }
    csv_path, json_path = trace.write(args.out, stem, extra)
    summary = json.loads(json_path.read_text())
    summary["files"] = [str(csv_path), str(json_path)]
    return summary


def _run_sequence(args: argparse.Namespace, seed: Optional[int], stem: str) -> dict:
    scenario = _configure(args, seed)
    steps = run_command_sequence(scenario, load_command_sequence(args.sequence), args.K)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{stem}.sequence.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SequenceStep.CSV_COLUMNS)
        for s in steps:
            w.writerow(s.csv_row())
    return {"seed": scenario.seed, "steps": [s.__dict__ for s in steps], "files": [str(path)]}


def cmd_run(args: argparse.Namespace) -> int:
    seeds = _seeds(args)
    stems = ["trace" if len(seeds) == 1 else f"trace-seed{s}" for s in seeds]
    fn = _run_sequence if args.sequence else _run_one
    results = _parallel(fn, args.jobs, [(args, s, stem) for s, stem in zip(seeds, stems)])
    for res in results:
        if args.sequence:
            print(f"seed {res['seed']}")
            print("time,P_R,Ic,utility,payment,rounds")
            for s in res["steps"]:
                print(f"{s['time']:g},{s['required_mw']:g},{s['rate']:g},{s['utility']:g},{s['payment']:g},{s['rounds']}")
            continue
        util = res["consensus_utility"]
        print(f"seed: {res['seed']}")
        print(f"consensus utility: {util if util is not None else 'none (best ' + format(res['best_utility'], 'g') + ')'}")
        print(f"off set: {res['off_set']}")
        print(f"reduction: {res['deployed_reduction_mw']:g} MW")
        print(f"payment: ${res['payment']:,.2f} at {res['incentive_rate']:g} $/MWh")
        print(f"rounds: {res['rounds']} (converged at {res['convergence_iteration']})")
        print(f"simulated time: {res['simulated_time_ms']:g} ms")
    return EXIT_OK


# compare

def _compare_one(args: argparse.Namespace, seed: Optional[int]) -> dict:
    scenario = _configure(args, seed)
    result, _ = compare(scenario, args.mode, args.K)
    return {"seed": scenario.seed, **result.to_json()}


def cmd_compare(args: argparse.Namespace) -> int:
    results = _parallel(_compare_one, args.jobs, [(args, s) for s in _seeds(args)])
    for res in results:
        ip = res["performance_index"]
        print(f"seed {res['seed']}: centralized {res['centralized_utility']:g} in {res['centralized_time_ms']:.3f} ms, "
              f"distributed {res['distributed_utility']:g} in {res['distributed_time_ms']:g} ms, "
              f"ratio {res['utility_ratio']:.4f}, I_p {'n/a' if ip is None else format(ip, '.4f')}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# validate / generate

def cmd_validate(args: argparse.Namespace) -> int:
    status = EXIT_OK
    for path in args.paths:
        problems = validate_file(path)
        if problems:
            status = EXIT_INVALID
            for p in problems:
                print(f"{path}: invalid: {p}")
        else:
            print(f"{path}: valid")
    return status


def cmd_generate(args: argparse.Namespace) -> int:
    seed = _seeds(args)[0]
    scenario = generate_system(args.n, args.n_cp, seed=seed or 0, max_iterations=args.max_iterations)
    if args.out in (None, "-"):
        json.dump(scenario.to_json(), sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        dump_scenario(scenario, args.out)
        print(f"wrote {args.out}: {scenario.topology.n} agents, {scenario.topology.n_c} links")
    return EXIT_OK


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddp-grid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check scenario files")
    p.add_argument("paths", nargs="+", help="scenario file or bundled name")
    p.set_defaults(func=cmd_validate)

    def sim_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("scenario", help="scenario file, or 'three-agent' / 'ieee14'")
        p.add_argument("--mode", choices=("sync", "async"), default="sync")
        p.add_argument("--seed", type=_nonneg_int, action="append",
                       help=f"repeat for several seeds (default: ${SEED_ENV} or the scenario's)")
        p.add_argument("--max-iterations", type=_pos_int)
        p.add_argument("--packet-loss", type=float)
        p.add_argument("--mean-delay-ms", type=float)
        p.add_argument("-K", type=_pos_int, default=DEFAULT_K, help="stable rounds before an agent reports convergence")
        p.add_argument("--fault", action="append", metavar="KIND:ARGS@ITER")
        p.add_argument("--jobs", type=_pos_int, default=1, help="run seeds in parallel processes")

    p = sub.add_parser("run", help="simulate a scenario and write its trace")
    sim_options(p)
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--sequence", help="command sequence file, or 'ieee14-day'")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="centralized optimum against the distributed run")
    sim_options(p)
    p.add_argument("--out", help="also write compare.json here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("generate", help="write a random connected scenario")
    p.add_argument("n", type=int, help="number of agents")
    p.add_argument("n_cp", type=float, help="target links per agent")
    p.add_argument("--seed", type=_nonneg_int, action="append")
    p.add_argument("--max-iterations", type=_pos_int)
    p.add_argument("-o", "--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, _Invalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DDPError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
