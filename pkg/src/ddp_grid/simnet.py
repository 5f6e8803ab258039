"""Deterministic simulation of the agent network.

Two drivers share one world model:

* :class:`SyncSimulation` runs lock-step rounds (broadcast, ingest, update).
* :class:`AsyncSimulation` is an event loop over simulated time where each
  agent alternates information-discovery and state-update activations on its
  own clock and messages travel with random latency.

Randomness comes from PCG64 streams derived from the scenario seed with
``numpy.random.SeedSequence``: spawn key ``(0,)`` drives the network (loss
and latency draws) and ``(1, agent_id)`` drives each agent's clock phase.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Optional

import numpy as np

from .errors import InfeasibleScenarioError, ScenarioError
from .knapsack import block_table
from .model import Coalition, OperatorCommand, StateVector, mw_to_units, units_to_mw, units_to_utility
from .network import FaultEvent, Topology, is_connected, ms_to_ticks, ticks_to_ms
from .protocol import (
    HEADER_SIZE,
    AgentState,
    Estimate,
    ProtocolMessage,
    _advance,
    _clamp_key,
    _ingest,
    _update,
    decode_message,
    encode_message,
    init_agent,
    locally_converged,
    set_neighbors,
)
from .scenario import Scenario

log = logging.getLogger(__name__)

DEFAULT_K = 2


def network_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0,))))


def agent_rng(seed: int, agent_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, agent_id))))


@dataclass(frozen=True)
class World:
    """Everything the faults can change."""

    users: Coalition
    topology: Topology
    active: frozenset[int]
    clamps: Mapping[int, int]
    command: OperatorCommand
    packet_loss: float = 0.0
    mean_delay_ms: float = 0.0

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "World":
        return cls(scenario.users, scenario.topology, frozenset(scenario.users.user_ids),
                   MappingProxyType({}), scenario.command,
                   scenario.network.packet_loss, scenario.network.mean_delay_ms)

    @property
    def clamps_mw(self) -> dict[int, float]:
        return {u: units_to_mw(c) for u, c in self.clamps.items()}

    @cached_property
    def _adjacency(self) -> dict[int, tuple[int, ...]]:
        return {v: tuple(w for w in self.topology.neighbors(v) if w in self.active) for v in self.active}

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self._adjacency[v]

    def check_feasible(self) -> None:
        if self.command.capacity_units < sum(self.clamps.values()):
            raise InfeasibleScenarioError("capacity is below the clamped load")


def apply_fault(world: World, fault: FaultEvent) -> World:
    kind = fault.kind
    if kind == "link_loss":
        if not world.topology.has_edge(*fault.edge):
            raise ScenarioError(f"link_loss: no edge {fault.edge}")
        return replace(world, topology=world.topology.without_edges([fault.edge]))
    if kind == "load_disconnect":
        if fault.user not in world.users:
            raise ScenarioError(f"load_disconnect: unknown user {fault.user}")
        clamps = dict(world.clamps)
        clamps[fault.user] = mw_to_units(fault.clamp_mw)
        out = replace(world, clamps=MappingProxyType(clamps))
        out.check_feasible()
        return out
    if kind == "agent_loss":
        if fault.user not in world.active:
            raise ScenarioError(f"agent_loss: agent {fault.user} is not active")
        clamps = dict(world.clamps)
        clamps.setdefault(fault.user, world.users.baseline_units[fault.user])
        out = replace(world, active=world.active - {fault.user},
                      topology=world.topology.without_vertex(fault.user),
                      clamps=MappingProxyType(clamps))
        out.check_feasible()
        return out
    if kind == "packet_loss_rate":
        return replace(world, packet_loss=float(fault.value))
    if kind == "mean_delay_ms":
        return replace(world, mean_delay_ms=float(fault.value))
    if kind == "capacity_change":
        cmd = world.command
        reduction = None
        if cmd.running_load_mw is not None:
            reduction = max(0.0, cmd.running_load_mw - float(fault.value))
        out = replace(world, command=replace(cmd, capacity_mw=float(fault.value), required_reduction_mw=reduction))
        out.check_feasible()
        return out
    if kind == "incentive_change":
        return replace(world, command=replace(world.command, incentive_rate=float(fault.value)))
    raise ScenarioError(f"unknown fault kind {kind!r}")


class TraceRecord(NamedTuple):
    iteration: int
    agent_id: int
    J: float
    own_load_mw: float
    msgs_sent: int
    msgs_dropped: int


CSV_COLUMNS = TraceRecord._fields


@dataclass
class RunTrace:
    """Everything a run produced.

    ``rows`` holds ``(iteration, agent, utility units, own load units, sent,
    dropped)`` integers; :attr:`records` converts them to MW and utility.
    """

    mode: str
    rows: list[tuple[int, int, int, int, int, int]]
    rounds: int
    convergence_iteration: int
    converged: bool
    simulated_time_ms: float
    convergence_time_ms: float
    final: dict[int, AgentState]
    world: World
    fault_log: list[tuple[float, dict]] = field(default_factory=list)
    max_activation_gap: Optional[int] = None

    @property
    def records(self) -> list[TraceRecord]:
        return [TraceRecord(i, a, units_to_utility(u), units_to_mw(l), s, d) for i, a, u, l, s, d in self.rows]

    @property
    def active_states(self) -> dict[int, StateVector]:
        return {u: self.final[u].own.state for u in sorted(self.world.active)}

    def consensus_state(self) -> Optional[StateVector]:
        states = set(self.active_states.values())
        return states.pop() if len(states) == 1 else None

    @property
    def consensus_utility(self) -> Optional[float]:
        x = self.consensus_state()
        if x is None:
            return None
        return units_to_utility(self.world.users.utility_units(x, self.world.clamps))

    @property
    def best_utility(self) -> float:
        return max(self.final[u].own.utility for u in self.world.active)

    def utility_history(self) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for r in self.records:
            out.setdefault(r.agent_id, []).append(r.J)
        return out

    def write_csv(self, fh: io.TextIOBase) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i, a, u, l, s, d in self.rows:
            w.writerow([i, a, repr(units_to_utility(u)), repr(units_to_mw(l)), s, d])

    def csv_text(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    def summary(self) -> dict:
        x = self.consensus_state()
        return {
            "mode": self.mode,
            "converged": self.converged,
            "consensus": x is not None,
            "consensus_utility": self.consensus_utility,
            "best_utility": self.best_utility,
            "consensus_state": x.to_list() if x is not None else None,
            "off_set": sorted(self.world.users.off_set(x) - set(self.world.clamps)) if x is not None else None,
            "rounds": self.rounds,
            "convergence_iteration": self.convergence_iteration,
            "simulated_time_ms": self.simulated_time_ms,
            "convergence_time_ms": self.convergence_time_ms,
            "max_activation_gap": self.max_activation_gap,
            "faults": [{"at": at, **f} for at, f in self.fault_log],
        }

    def write(self, outdir: Path | str, stem: str = "trace", extra: Optional[dict] = None) -> tuple[Path, Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{stem}.csv"
        json_path = out / f"{stem}.summary.json"
        with open(csv_path, "w", newline="") as fh:
            self.write_csv(fh)
        summary = self.summary()
        if extra:
            summary.update(extra)
        json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


class _Base:
    mode = ""

    def __init__(self, scenario: Scenario, K: int = DEFAULT_K) -> None:
        if K < 1:
            raise ValueError("K must be >= 1")
        self.scenario = scenario
        self.K = K
        self.cost = scenario.network.cost
        self.world = World.from_scenario(scenario)
        self.world.check_feasible()
        self.net_rng = network_rng(scenario.seed)
        w = self.world
        self.agents: dict[int, AgentState] = {
            u: init_agent(u, w.users, w.command, None, w.neighbors(u)) for u in sorted(w.active)
        }
        self.rows: list[tuple[int, int, int, int, int, int]] = []
        self.fault_log: list[tuple[float, dict]] = []
        self._wire_cache: dict[int, tuple[bytes, StateVector, Estimate]] = {}
        self._load_cache: dict[int, tuple[Estimate, int]] = {}

    def apply(self, fault: FaultEvent, at: float = 0.0) -> None:
        """Apply a fault now and propagate topology changes into agent buffers."""
        before = self.world
        self.world = apply_fault(self.world, fault)
        self.fault_log.append((at, fault.to_json()))
        log.debug("fault %s at %s", fault.kind, at)
        for u in before.active - self.world.active:
            self.agents[u] = replace(self.agents[u], active=False)
        rewired = self.world.topology is not before.topology or self.world.active != before.active
        for u in self.world.active:
            st = replace(self.agents[u], stable_rounds=0)
            self.agents[u] = set_neighbors(st, self.world.neighbors(u)) if rewired else st

    def broadcast(self, command: OperatorCommand, at: float = 0.0) -> None:
        """Operator rebroadcast of a whole new command."""
        self.world = replace(self.world, command=command)
        self.world.check_feasible()
        for u in self.world.active:
            self.agents[u] = replace(self.agents[u], stable_rounds=0)
        self.fault_log.append((at, {"kind": "command", "capacity_mw": command.capacity_mw,
                                    "incentive_rate": command.incentive_rate}))

    def _wire(self, st: AgentState) -> tuple[ProtocolMessage, Estimate]:
        """Encode, decode and evaluate the agent's outgoing message once per send.

        Unchanged bodies reuse the previous decode and evaluation.
        """
        payload = encode_message(st)
        body = payload[HEADER_SIZE:]
        w = self.world
        hit = self._wire_cache.get(st.agent_id)
        if hit is not None and hit[0] == body and hit[2].clamp_key == _clamp_key(w.clamps):
            return ProtocolMessage(st.agent_id, st.iteration, st.own.utility, hit[1]), hit[2]
        msg = decode_message(payload, w.users.n_total)
        if msg.x == st.own.state and st.own.clamp_key == _clamp_key(w.clamps):
            # exact integer evaluation of this very x under these clamps
            est = st.own
        else:
            est = Estimate.of(w.users, msg.x, w.clamps)
        self._wire_cache[st.agent_id] = (body, msg.x, est)
        return msg, est

    def _drop(self, p: float) -> bool:
        if p <= 0:
            return False
        if p >= 1:
            return True
        return bool(self.net_rng.random() < p)

    def all_converged(self) -> bool:
        return all(locally_converged(self.agents[u], self.K) for u in self.world.active)

    def own_load_units(self, st: AgentState) -> int:
        uid = st.agent_id
        clamp = self.world.clamps.get(uid)
        if clamp is not None:
            return clamp
        hit = self._load_cache.get(uid)
        if hit is not None and hit[0] is st.own:
            return hit[1]
        co = self.world.users
        units = block_table(co, uid).split(co, st.own.state)[1]
        self._load_cache[uid] = (st.own, units)
        return units


class SyncSimulation(_Base):
    mode = "sync"

    def __init__(self, scenario: Scenario, K: int = DEFAULT_K) -> None:
        super().__init__(scenario, K)
        self.round = 0
        self.last_change = 0
        self.ticks = 0
        self.round_ticks = self.cost.round_ticks
        self._pending = sorted(
            (self._fault_round(f), n, f) for n, f in enumerate(scenario.faults)
        )

    def _fault_round(self, f: FaultEvent) -> int:
        if f.at_iteration is not None:
            return f.at_iteration
        return math.ceil(ms_to_ticks(f.at_time_ms) / self.round_ticks)

    def _fire_due(self, boundary: int) -> None:
        while self._pending and self._pending[0][0] <= boundary:
            at, _, f = self._pending.pop(0)
            self.apply(f, at)

    def step(self) -> bool:
        """Run one round; returns True when the state of any agent changed."""
        t = self.round + 1
        self._fire_due(t - 1)
        w = self.world
        co, cl, cap = w.users, w.clamps, w.command.capacity_units
        ck = _clamp_key(cl)
        active = sorted(w.active)
        agents, rows = self.agents, self.rows
        p = w.packet_loss
        inbox: dict[int, list[tuple[ProtocolMessage, Estimate]]] = {u: [] for u in active}
        sent = dict.fromkeys(active, 0)
        dropped = dict.fromkeys(active, 0)
        for s in active:
            nbrs = w.neighbors(s)
            if not nbrs:
                continue
            msg = self._wire(agents[s])
            sent[s] = len(nbrs)
            if p <= 0:
                for r in nbrs:
                    inbox[r].append(msg)
                continue
            for r in nbrs:
                if self._drop(p):
                    dropped[s] += 1
                else:
                    inbox[r].append(msg)
        changed = False
        for u in active:
            old = agents[u]
            new = _advance(old, inbox[u], co, cap, cl, ck)
            if new.own is not old.own:
                changed = True
            agents[u] = new
            rows.append((t, u, new.own.utility_units, self.own_load_units(new), sent[u], dropped[u]))
        self.round = t
        self.ticks += self.round_ticks
        if changed:
            self.last_change = t
        return changed

    def run(self, max_rounds: Optional[int] = None) -> RunTrace:
        limit = self.scenario.max_iterations if max_rounds is None else max_rounds
        converged = False
        while self.round < limit:
            self.step()
            if self.all_converged() and not self._pending:
                converged = True
                break
        return self.trace(converged)

    def run_until_converged(self, extra_rounds: int) -> tuple[int, bool]:
        """Continue from the current states; returns (rounds used, converged)."""
        start = self.round
        while self.round - start < extra_rounds:
            if self.all_converged() and not self._pending:
                return self.round - start, True
            self.step()
        return self.round - start, self.all_converged()

    def trace(self, converged: bool) -> RunTrace:
        return RunTrace(
            mode=self.mode,
            rows=list(self.rows),
            rounds=self.round,
            convergence_iteration=self.last_change,
            converged=converged,
            simulated_time_ms=ticks_to_ms(self.ticks),
            convergence_time_ms=ticks_to_ms(self.last_change * self.round_ticks),
            final=dict(self.agents),
            world=self.world,
            fault_log=list(self.fault_log),
        )


_ID, _SU = 0, 1


class AsyncSimulation(_Base):
    """Event-driven execution with per-agent clocks.

    Agent ``i`` runs information discovery at ``phase_i + k*T`` and state
    update ``t_ID`` later, with ``T = t_ID + t_SU``.  Phases are fixed, so the
    activation order repeats every period and each agent gets one activation
    of each kind in every ``2n`` consecutive scheduler steps.  ``P`` is the
    promised bound; values below ``2n`` cannot be honoured and are rejected.
    """

    mode = "async"

    def __init__(self, scenario: Scenario, K: int = DEFAULT_K, P: Optional[int] = None) -> None:
        super().__init__(scenario, K)
        n = len(self.world.active)
        self.P = 2 * n if P is None else P
        if self.P < 2 * n:
            raise ValueError(f"P={self.P} is below 2n={2 * n}; no schedule can satisfy it")
        self.t_id = ms_to_ticks(self.cost.t_id_ms)
        self.t_su = ms_to_ticks(self.cost.t_su_ms)
        self.period = self.t_id + self.t_su
        self.now = 0
        self.steps = 0
        self.max_gap = 0
        self._last_step: dict[tuple[int, int], int] = {}
        self._events: list[tuple[int, int, int]] = []
        for u in sorted(self.world.active):
            phase = int(agent_rng(scenario.seed, u).integers(0, max(self.period, 1)))
            heapq.heappush(self._events, (phase, _ID, u))
        self._mail: dict[int, list[tuple[int, int, tuple[ProtocolMessage, Estimate]]]] = {u: [] for u in self.world.active}
        self._seq = 0
        self._sent = dict.fromkeys(self.world.active, 0)
        self._dropped = dict.fromkeys(self.world.active, 0)
        self._pending = sorted(
            (self._fault_ticks(f), n, f) for n, f in enumerate(scenario.faults)
        )
        self._unconverged = set(self.world.active)
        self.last_change_iter = 0
        self.last_change_ticks = 0

    def _fault_ticks(self, f: FaultEvent) -> int:
        if f.at_time_ms is not None:
            return ms_to_ticks(f.at_time_ms)
        return f.at_iteration * self.period

    def _latency(self) -> int:
        d = self.world.mean_delay_ms
        if d <= 0:
            return 0
        return ms_to_ticks(float(self.net_rng.exponential(d)))

    def _refresh(self, u: int) -> None:
        if u in self.world.active and locally_converged(self.agents[u], self.K):
            self._unconverged.discard(u)
        else:
            self._unconverged.add(u)

    def _fire_due(self, now: int) -> None:
        while self._pending and self._pending[0][0] <= now:
            at, _, f = self._pending.pop(0)
            before = self.world.active
            self.apply(f, ticks_to_ms(at))
            for u in before - self.world.active:
                self._unconverged.discard(u)
            for u in self.world.active:
                self._refresh(u)

    def _activate(self, t: int, kind: int, u: int) -> None:
        self.steps += 1
        key = (u, kind)
        if key not in self._last_step:
            # an agent's clock starts at its first activation
            self._last_step[(u, _ID)] = self._last_step[(u, _SU)] = self.steps - 1
        self.max_gap = max(self.max_gap, self.steps - self._last_step[key])
        self._last_step[key] = self.steps
        w = self.world
        co, cl = w.users, w.clamps
        st = self.agents[u]
        if kind == _ID:
            box = self._mail[u]
            arrived = []
            while box and box[0][0] <= t:
                arrived.append(heapq.heappop(box)[2])
            st = _ingest(st, arrived, co, cl)
            nbrs = w.neighbors(u)
            if nbrs:
                msg = self._wire(st)
                for r in nbrs:
                    self._sent[u] += 1
                    if self._drop(w.packet_loss):
                        self._dropped[u] += 1
                        continue
                    self._seq += 1
                    heapq.heappush(self._mail[r], (t + self._latency(), self._seq, msg))
            self.agents[u] = st
            heapq.heappush(self._events, (t + self.t_id, _SU, u))
        else:
            new = _update(st, co, w.command.capacity_units, cl)
            if new.own is not st.own:
                self.last_change_iter = max(self.last_change_iter, new.iteration)
                self.last_change_ticks = t
            self.agents[u] = new
            self.rows.append((new.iteration, u, new.own.utility_units, self.own_load_units(new),
                              self._sent[u], self._dropped[u]))
            self._sent[u] = self._dropped[u] = 0
            heapq.heappush(self._events, (t + self.t_su, _ID, u))
        self._refresh(u)

    def run(self, max_iterations: Optional[int] = None) -> RunTrace:
        limit = self.scenario.max_iterations if max_iterations is None else max_iterations
        converged = False
        while self._events:
            t, kind, u = heapq.heappop(self._events)
            self._fire_due(t)
            if u not in self.world.active:
                continue
            self.now = t
            self._activate(t, kind, u)
            if kind == _SU:
                if not self._unconverged and not self._pending:
                    converged = True
                    break
                if all(self.agents[v].iteration >= limit for v in self.world.active):
                    break
        rounds = max((self.agents[v].iteration for v in self.world.active), default=0)
        end = self.now + (self.t_su if self.rows else 0)
        return RunTrace(
            mode=self.mode,
            rows=list(self.rows),
            rounds=rounds,
            convergence_iteration=self.last_change_iter,
            converged=converged,
            simulated_time_ms=ticks_to_ms(end),
            convergence_time_ms=ticks_to_ms(self.last_change_ticks + self.t_su if self.last_change_iter else 0),
            final=dict(self.agents),
            world=self.world,
            fault_log=list(self.fault_log),
            max_activation_gap=self.max_gap,
        )


def run_synchronous(scenario: Scenario, K: int = DEFAULT_K) -> RunTrace:
    return SyncSimulation(scenario, K).run()


def run_asynchronous(scenario: Scenario, K: int = DEFAULT_K, P: Optional[int] = None) -> RunTrace:
    return AsyncSimulation(scenario, K, P).run()


def run(scenario: Scenario, mode: str = "sync", K: int = DEFAULT_K) -> RunTrace:
    if mode == "sync":
        return run_synchronous(scenario, K)
    if mode == "async":
        return run_asynchronous(scenario, K)
    raise ValueError(f"unknown mode {mode!r}")


def surviving_connected(world: World) -> bool:
    return is_connected(world.topology, world.active)
