"""Operator-side arithmetic, system generation and command sequences."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import CommandError, GenerationError, ScenarioError
from .knapsack import solve_centralized
from .model import (
    Coalition,
    LoadSector,
    OperatorCommand,
    StateVector,
    UserLoad,
    compute_capacity,
    mw_to_units,
    units_to_mw,
    units_to_utility,
)
from .network import NetworkConfig, Topology, components
from .scenario import Scenario
from .simnet import DEFAULT_K, RunTrace, SyncSimulation, run

__all__ = [
    "compute_capacity",
    "IncentiveSchedule",
    "dynamic_rate",
    "settle_payment",
    "performance_index",
    "PerfRecord",
    "LoadProfile",
    "generate_system",
    "deployed_state",
    "deployed_reduction",
    "deployed_by_component",
    "qualified_payment",
    "CommandSequence",
    "load_command_sequence",
    "SequenceStep",
    "run_command_sequence",
    "Comparison",
    "compare",
]


@dataclass(frozen=True)
class IncentiveSchedule:
    """Static rate, or a trigger rate plus a premium on reduction above a threshold."""

    mode: str = "static"
    rate: float = 0.0
    trigger_rate: float = 75.0
    slope: float = 0.15
    threshold_mw: float = 75.0

    def __post_init__(self) -> None:
        if self.mode not in ("static", "dynamic"):
            raise CommandError(f"unknown incentive mode {self.mode!r}")
        if min(self.rate, self.trigger_rate, self.slope, self.threshold_mw) < 0:
            raise CommandError("incentive parameters must be non-negative")

    @classmethod
    def static(cls, rate: float) -> "IncentiveSchedule":
        return cls("static", rate=rate)

    @classmethod
    def dynamic(cls, trigger_rate: float = 75.0, slope: float = 0.15, threshold_mw: float = 75.0) -> "IncentiveSchedule":
        return cls("dynamic", trigger_rate=trigger_rate, slope=slope, threshold_mw=threshold_mw)

    @classmethod
    def from_json(cls, obj: dict) -> "IncentiveSchedule":
        mode = obj.get("mode", "static")
        if mode == "static":
            return cls.static(float(obj.get("rate", 0.0)))
        return cls.dynamic(float(obj.get("trigger_rate", 75.0)), float(obj.get("slope", 0.15)),
                           float(obj.get("threshold_mw", 75.0)))


def dynamic_rate(schedule: IncentiveSchedule, reduction_mw: float) -> float:
    if reduction_mw < 0:
        raise CommandError("reduction must be non-negative")
    if schedule.mode == "static":
        return schedule.rate
    return schedule.trigger_rate + schedule.slope * max(0.0, reduction_mw - schedule.threshold_mw)


def settle_payment(rate: float, reduction_mw: float, duration_h: float) -> float:
    if rate < 0 or reduction_mw < 0 or duration_h < 0:
        raise CommandError("payment inputs must be non-negative")
    return rate * reduction_mw * duration_h


def performance_index(f_d: float, f_g: float, t_d: float, t_g: float) -> float:
    """Utility ratio times speed-up; above 1 means the distributed run wins."""
    if f_g == 0 or t_d == 0:
        raise ZeroDivisionError("performance index needs f_g > 0 and t_d > 0")
    return (f_d / f_g) * (t_g / t_d)


@dataclass(frozen=True)
class PerfRecord:
    f_d: float
    f_g: float
    t_d: float
    t_g: float

    @property
    def I_p(self) -> float:
        return performance_index(self.f_d, self.f_g, self.t_d, self.t_g)


# generated systems

@dataclass(frozen=True)
class LoadProfile:
    sector_counts: tuple[int, ...] = (1, 2, 3)
    baseline_min_mw: int = 10
    baseline_max_mw: int = 150
    baseline_step_mw: int = 5
    weights: tuple[float, ...] = (1.0, 10.0, 20.0)
    reduction_fraction: float = 0.10
    incentive_rate: float = 750.0

    def __post_init__(self) -> None:
        if not self.sector_counts or min(self.sector_counts) < 0:
            raise GenerationError("sector counts must be non-negative")
        if not 0 < self.baseline_min_mw <= self.baseline_max_mw or self.baseline_step_mw <= 0:
            raise GenerationError("bad baseline range")
        if not 0 <= self.reduction_fraction <= 1:
            raise GenerationError("reduction_fraction must lie in [0, 1]")


def _random_edges(n: int, n_c: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    order = rng.permutation(n) + 1
    edges = set()
    for k in range(1, n):
        parent = int(order[rng.integers(0, k)])
        child = int(order[k])
        edges.add((min(parent, child), max(parent, child)))
    extra = n_c - len(edges)
    if extra <= 0:
        return sorted(edges)
    max_edges = n * (n - 1) // 2
    if max_edges <= 200_000 or extra > max_edges // 2:
        pool = [(i, j) for i in range(1, n + 1) for j in range(i + 1, n + 1) if (i, j) not in edges]
        pick = rng.choice(len(pool), size=extra, replace=False)
        edges.update(pool[int(k)] for k in pick)
    else:
        while len(edges) < n_c:
            i, j = (int(v) for v in rng.integers(1, n + 1, size=2))
            if i != j:
                edges.add((min(i, j), max(i, j)))
    return sorted(edges)


def generate_system(n_agents: int, target_avg_links_per_agent: float,
                    load_profile: Optional[LoadProfile] = None, seed: int = 0,
                    max_iterations: Optional[int] = None) -> Scenario:
    """Random connected system with ``round(n_cp * n)`` links.

    A random recursive spanning tree guarantees connectivity; the remaining
    links are drawn uniformly from the non-edges.
    """
    if n_agents < 2:
        raise GenerationError("need at least two agents")
    n_c = round(target_avg_links_per_agent * n_agents)
    if n_c < n_agents - 1:
        raise GenerationError(f"n_cp={target_avg_links_per_agent} gives {n_c} links; a connected graph needs {n_agents - 1}")
    if n_c > n_agents * (n_agents - 1) // 2:
        raise GenerationError(f"{n_c} links exceed the complete graph on {n_agents} vertices")
    profile = load_profile or LoadProfile()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(2,))))
    edges = _random_edges(n_agents, n_c, rng)

    steps = np.arange(profile.baseline_min_mw, profile.baseline_max_mw + 1, profile.baseline_step_mw)
    users = []
    for uid in range(1, n_agents + 1):
        count = int(rng.choice(profile.sector_counts))
        weight = float(rng.choice(profile.weights))
        baselines = rng.choice(steps, size=count)
        users.append(UserLoad(uid, tuple(LoadSector(float(b), weight) for b in baselines)))
    co = Coalition(users)
    total = units_to_mw(co.total_baseline_units)
    reduction = float(round(total * profile.reduction_fraction))
    command = OperatorCommand.from_reduction(total, reduction, profile.incentive_rate, 1.0)
    return Scenario(
        users=co,
        topology=Topology.from_edges(co.user_ids, edges),
        command=command,
        seed=seed,
        max_iterations=max_iterations or max(100, 10 * n_agents),
        network=NetworkConfig(),
        name=f"generated-{n_agents}-{seed}",
    )


# deployment and settlement

def deployed_state(trace: RunTrace) -> StateVector:
    """Each user's own block taken from its own agent's final estimate.

    Clamped and lost users are reported with their bits on; their load is
    accounted through the clamp.
    """
    co = trace.world.users
    x = co.all_on()
    for uid, (a, b) in co.blocks.items():
        if uid not in trace.world.clamps and uid in trace.final:
            x = x.with_block(a, b - a, trace.final[uid].own.state.block(a, b - a))
    return x


def _reduction_units(trace: RunTrace, user_ids: Iterable[int]) -> int:
    co, clamps = trace.world.users, trace.world.clamps
    x = deployed_state(trace)
    total = 0
    for uid in user_ids:
        load = clamps[uid] if uid in clamps else co.block_load_units(x, uid)
        total += co.baseline_units[uid] - load
    return total


def deployed_reduction(trace: RunTrace, users: Optional[Coalition] = None) -> float:
    """Total MW shed when every user enacts its own block of its own estimate."""
    co = users or trace.world.users
    return units_to_mw(_reduction_units(trace, co.user_ids))


def deployed_by_component(trace: RunTrace) -> list[tuple[list[int], float]]:
    """Reduction per connected component of the surviving network."""
    w = trace.world
    return [(comp, units_to_mw(_reduction_units(trace, comp))) for comp in components(w.topology, w.active)]


def qualified_payment(trace: RunTrace, schedule: Optional[IncentiveSchedule] = None) -> tuple[float, float]:
    """(rate, payment) for a finished run.

    Only reduction up to the requested amount qualifies; without a request
    the whole deployed reduction does.
    """
    cmd = trace.world.command
    shed = deployed_reduction(trace)
    required = cmd.required_reduction_mw
    rate = dynamic_rate(schedule, required or 0.0) if schedule is not None else cmd.incentive_rate
    qualified = shed if required is None else min(shed, required)
    return rate, settle_payment(rate, max(qualified, 0.0), cmd.duration_h)


# command sequences

@dataclass(frozen=True)
class CommandSequence:
    running_load_mw: float
    steps: tuple[tuple[float, float], ...]
    schedule: IncentiveSchedule = field(default_factory=IncentiveSchedule)
    duration_h: float = 1.0

    def __post_init__(self) -> None:
        times = [t for t, _ in self.steps]
        if not times:
            raise CommandError("command sequence is empty")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise CommandError("command times must be strictly increasing")

    def commands(self) -> list[tuple[float, OperatorCommand]]:
        out = []
        for t, pr in self.steps:
            rate = dynamic_rate(self.schedule, pr)
            out.append((t, OperatorCommand.from_reduction(self.running_load_mw, pr, rate, self.duration_h)))
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CommandSequence":
        try:
            steps = tuple((float(c["time_h"]), float(c["required_reduction_mw"])) for c in obj["commands"])
            return cls(float(obj["running_load_mw"]), steps,
                       IncentiveSchedule.from_json(obj.get("incentive", {})), float(obj.get("duration_h", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad command sequence: {exc}") from exc


def load_command_sequence(source: Union[str, Path]) -> CommandSequence:
    if str(source) == "ieee14-day":
        text = resources.files("ddp_grid.data").joinpath("ieee14-day.json").read_text()
    else:
        text = Path(source).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return CommandSequence.from_json(obj)


@dataclass(frozen=True)
class SequenceStep:
    time: float
    required_mw: float
    rate: float
    utility: float
    deployed_mw: float
    payment: float
    rounds: int
    converged: bool
    tracking_latency_ms: float

    CSV_COLUMNS = ("time", "P_R", "Ic", "utility", "payment", "rounds")

    def csv_row(self) -> list:
        return [self.time, self.required_mw, self.rate, self.utility, self.payment, self.rounds]


def run_command_sequence(scenario: Scenario, sequence: CommandSequence, K: int = DEFAULT_K,
                         max_rounds: Optional[int] = None) -> list[SequenceStep]:
    """Broadcast each command in turn and let the agents re-converge from where they are."""
    limit = max_rounds or scenario.max_iterations
    commands = sequence.commands()
    sim = SyncSimulation(scenario.with_overrides(command=commands[0][1]), K)
    round_ms = sim.round_ticks / 100
    out = []
    for n, (t, cmd) in enumerate(commands):
        if n:
            sim.broadcast(cmd, at=t)
        start = sim.round
        rounds, converged = sim.run_until_converged(limit)
        trace = sim.trace(converged)
        rate, pay = qualified_payment(trace)
        x = deployed_state(trace)
        co, clamps = trace.world.users, trace.world.clamps
        latency = max(0, sim.last_change - start) * round_ms
        out.append(SequenceStep(t, cmd.required_reduction_mw, rate, units_to_utility(co.utility_units(x, clamps)),
                                deployed_reduction(trace), pay, rounds, converged, latency))
    return out


# centralized vs distributed

@dataclass(frozen=True)
class Comparison:
    f_g: float
    f_d: float
    t_g_ms: float
    t_d_ms: float
    rounds: int
    converged: bool

    @property
    def ratio(self) -> float:
        return self.f_d / self.f_g if self.f_g else 1.0

    @property
    def I_p(self) -> Optional[float]:
        if self.f_g == 0 or self.t_d_ms == 0:
            return None
        return performance_index(self.f_d, self.f_g, self.t_d_ms, self.t_g_ms)

    def to_json(self) -> dict:
        return {"centralized_utility": self.f_g, "distributed_utility": self.f_d,
                "centralized_time_ms": self.t_g_ms, "distributed_time_ms": self.t_d_ms,
                "utility_ratio": self.ratio, "performance_index": self.I_p,
                "rounds": self.rounds, "converged": self.converged}


def compare(scenario: Scenario, mode: str = "sync", K: int = DEFAULT_K) -> tuple[Comparison, RunTrace]:
    """Exact optimum with wall-clock time against a simulated distributed run."""
    t0 = time.perf_counter()
    sol = solve_centralized(scenario.users, scenario.command.capacity_mw)
    t_g = (time.perf_counter() - t0) * 1000.0
    trace = run(scenario, mode, K)
    co, clamps = trace.world.users, trace.world.clamps
    f_d = units_to_utility(co.utility_units(deployed_state(trace), clamps))
    t_d = trace.convergence_time_ms or trace.simulated_time_ms
    return Comparison(sol.utility, f_d, t_g, t_d, trace.rounds, trace.converged), trace
