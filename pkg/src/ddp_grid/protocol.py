"""Per-agent state machine for distributed dynamic programming.

An agent keeps its own estimate of the optimal state plus the last estimate
heard from each neighbour.  Each iteration has two stages: copy neighbour
estimates into the buffers, then adopt the best candidate after
re-optimising the agent's own block.  All transitions return new values.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from operator import itemgetter
from typing import Iterable, Mapping, NamedTuple, Optional

from .errors import CodecError
from .knapsack import Solution, best_block, block_table, table_best
from .model import (
    Coalition,
    Number,
    OperatorCommand,
    StateVector,
    UsersLike,
    as_coalition,
    clamps_to_units,
    units_to_utility,
)

HEADER = struct.Struct("<IId")
HEADER_SIZE = HEADER.size  # 16


class Estimate(NamedTuple):
    """A state together with its exact utility and load."""

    state: StateVector
    utility_units: int
    load_units: int
    clamp_key: tuple = ()  # clamps the numbers were computed under

    @property
    def utility(self) -> float:
        return units_to_utility(self.utility_units)

    @classmethod
    def of(cls, co: Coalition, state: StateVector, clamps: Mapping[int, int] | None = None) -> "Estimate":
        util, load = co.evaluate_units(state, clamps)
        return cls(state, util, load, _clamp_key(clamps))


def _clamp_key(clamps: Mapping[int, int] | None) -> tuple:
    return tuple(sorted(clamps.items())) if clamps else ()


class NeighborBuffer(NamedTuple):
    estimate: Estimate
    last_heard: Optional[int] = None


@dataclass(frozen=True)
class AgentState:
    agent_id: int
    own: Estimate
    neighbors: Mapping[int, NeighborBuffer] = field(default_factory=dict)
    iteration: int = 0
    active: bool = True
    stable_rounds: int = 0
    dropped: int = 0
    settled_for: Optional[tuple] = None  # (capacity, clamps) the own block was last optimised under

    @property
    def x(self) -> StateVector:
        return self.own.state

    @property
    def J(self) -> float:
        return self.own.utility


class ProtocolMessage(NamedTuple):
    sender_id: int
    iteration: int
    J: float
    x: StateVector


def _best_own_block(co: Coalition, agent_id: int, base: StateVector, cap: int,
                    clamps: Mapping[int, int]) -> Optional[Solution]:
    base = co.canonical(base, clamps)
    load, util = co.load_units(base, clamps), co.utility_units(base, clamps)
    if agent_id in clamps or agent_id not in co:
        return Solution(base, util, load) if load <= cap else None
    return best_block(co, base, load, util, agent_id, cap)


def init_agent(agent_id: int, users: UsersLike, command: OperatorCommand,
               clamps: Mapping[int, Number] | None = None,
               neighbors: Iterable[int] = ()) -> AgentState:
    """Own block at its best feasible setting over an otherwise all-off vector."""
    co = as_coalition(users)
    cl = clamps_to_units(clamps)
    sol = _best_own_block(co, agent_id, co.all_off(), command.capacity_units, cl)
    if sol is None:
        sol = Solution(co.canonical(co.all_off(), cl), 0, co.load_units(co.all_off(), cl))
    own = Estimate(sol.state, sol.utility_units, sol.load_units, _clamp_key(cl))
    return AgentState(agent_id, own, {j: NeighborBuffer(own) for j in sorted(neighbors)})


def set_neighbors(state: AgentState, neighbors: Iterable[int]) -> AgentState:
    """Track a topology change: keep surviving buffers, seed new ones from the own estimate."""
    wanted = sorted(neighbors)
    if list(state.neighbors) == wanted:
        return state
    bufs = {j: state.neighbors.get(j, NeighborBuffer(state.own)) for j in wanted}
    return replace(state, neighbors=bufs)


_new_tuple = tuple.__new__  # named tuples without the keyword-handling constructor


def _evolve(obj, **changes):
    """``dataclasses.replace`` without re-running ``__init__``; hot path only."""
    out = object.__new__(type(obj))
    out.__dict__.update(obj.__dict__)
    out.__dict__.update(changes)
    return out


def _stage1(state: AgentState, msgs: Iterable[tuple[ProtocolMessage, Optional[Estimate]]],
            co: Coalition, cl: Mapping[int, int], ck: tuple) -> tuple[Mapping[int, NeighborBuffer], int]:
    """Buffers and drop count after ingesting ``(message, estimate or None)`` arrivals.

    A supplied estimate must have been evaluated from the same ``x``; it
    saves recomputing it once per receiver.
    """
    bufs = None
    dropped = state.dropped
    heard = state.iteration + 1
    n_total = co.n_total
    own = state.own
    for msg, est in msgs:
        x = msg.x
        old = state.neighbors.get(msg.sender_id) if bufs is None else bufs.get(msg.sender_id)
        if old is None or x.n != n_total:
            dropped += 1
            continue
        if est is None or est.clamp_key != ck or est.state.packed != x.packed:
            if x.packed == old.estimate.state.packed and old.estimate.clamp_key == ck:
                est = old.estimate
            elif x.packed == own.state.packed and own.clamp_key == ck:
                est = own
            else:
                est = Estimate.of(co, x, cl)
        if bufs is None:
            bufs = dict(state.neighbors)
        bufs[msg.sender_id] = _new_tuple(NeighborBuffer, (est, heard))
    return (state.neighbors if bufs is None else bufs), dropped


def _ingest(state: AgentState, msgs: Iterable[tuple[ProtocolMessage, Optional[Estimate]]],
            co: Coalition, cl: Mapping[int, int], ck: Optional[tuple] = None) -> AgentState:
    bufs, dropped = _stage1(state, msgs, co, cl, _clamp_key(cl) if ck is None else ck)
    if bufs is state.neighbors and dropped == state.dropped:
        return state
    return _evolve(state, neighbors=bufs, dropped=dropped)


def ingest_neighbor(state: AgentState, msg: ProtocolMessage, users: UsersLike,
                    clamps: Mapping[int, Number] | None = None) -> AgentState:
    """Information discovery: overwrite the sender's buffer with its estimate.

    The carried ``J`` is advisory; utility and load are recomputed from ``x``.
    Messages from non-neighbours are dropped and counted.
    """
    return _ingest(state, ((msg, None),), as_coalition(users), clamps_to_units(clamps))


def ingest_many(state: AgentState, msgs: Iterable[ProtocolMessage], users: UsersLike,
                clamps: Mapping[int, Number] | None = None) -> AgentState:
    return _ingest(state, ((m, None) for m in msgs), as_coalition(users), clamps_to_units(clamps))


def receive(state: AgentState, payload: bytes, users: UsersLike,
            clamps: Mapping[int, Number] | None = None) -> AgentState:
    """Decode a wire payload and ingest it; undecodable payloads are counted as drops."""
    co = as_coalition(users)
    try:
        msg = decode_message(payload, co.n_total)
    except CodecError:
        return replace(state, dropped=state.dropped + 1)
    return ingest_neighbor(state, msg, co, clamps)


_UTILITY = itemgetter(1)  # Estimate.utility_units


def _beats(a: Solution, b: Solution) -> bool:
    if a.utility_units != b.utility_units:
        return a.utility_units > b.utility_units
    if a.load_units != b.load_units:
        return a.load_units < b.load_units
    return a.state.preference_key() < b.state.preference_key()


def _stage2(state: AgentState, neighbors: Mapping[int, NeighborBuffer], co: Coalition, cap: int,
            cl: Mapping[int, int], ck: tuple) -> tuple[Estimate, int, tuple]:
    """New own estimate, stable-round count and settle key."""
    aid = state.agent_id
    own = state.own
    key = (cap, ck)
    own_x = own.state
    own_bits = own_x.packed
    bufs = neighbors.values()
    if state.settled_for == key:
        for buf in bufs:
            if buf.estimate.state.packed != own_bits:
                break
        else:
            # nothing new to consider and the own block is already optimal
            return own, state.stable_rounds + 1, key

    # a handful of candidates: a linear scan beats hashing kilobyte strings
    cands = [own]
    seen = [own_bits]
    for buf in bufs:
        bits = buf.estimate.state.packed
        if bits not in seen:
            seen.append(bits)
            cands.append(buf.estimate)
    if len(cands) > 1:
        cands.sort(key=_UTILITY, reverse=True)  # stable, so ties keep own first

    free_block = aid in co and aid not in cl
    top = 0
    if free_block:
        table = block_table(co, aid)
        top = table.max_value
    best: Optional[Solution] = None
    for est in cands:
        x, load, util = est.state, est.load_units, est.utility_units
        if best is not None and est.clamp_key == ck:
            # the own block can add at most its full value to the rest
            floor = best.utility_units
            if util + top < floor:
                break  # candidates are sorted by utility, so no later one can win either
            if free_block and util + top - table.split(co, x)[2] < floor:
                continue
        if cl:
            # clamped coordinates carry no value or load of their own, so
            # canonicalising never changes numbers computed under the same clamps
            x = co.canonical(x, cl)
            if est.clamp_key != ck:
                util, load = co.evaluate_units(x, cl)
        if free_block:
            sol = table_best(table, co, x, load, util, cap)
        else:
            sol = Solution(x, util, load) if load <= cap else None
        if sol is not None and (best is None or _beats(sol, best)):
            best = sol

    if best is None:
        best = _best_own_block(co, aid, co.all_off(), cap, cl)
        if best is None:
            off = co.canonical(co.all_off(), cl)
            util, load = co.evaluate_units(off, cl)
            best = Solution(off, util, load)

    if best.state.packed == own_bits and best.utility_units == own.utility_units and own.clamp_key == ck:
        return own, state.stable_rounds + 1, key
    return Estimate(best.state, best.utility_units, best.load_units, ck), 0, key


def _update(state: AgentState, co: Coalition, cap: int, cl: Mapping[int, int],
            ck: Optional[tuple] = None) -> AgentState:
    own, stable, key = _stage2(state, state.neighbors, co, cap, cl, _clamp_key(cl) if ck is None else ck)
    return _evolve(state, own=own, iteration=state.iteration + 1, stable_rounds=stable, settled_for=key)


def _advance(state: AgentState, msgs: Iterable[tuple[ProtocolMessage, Optional[Estimate]]],
             co: Coalition, cap: int, cl: Mapping[int, int], ck: tuple) -> AgentState:
    """Both stages of one synchronous iteration, building a single new state."""
    bufs, dropped = _stage1(state, msgs, co, cl, ck)
    own, stable, key = _stage2(state, bufs, co, cap, cl, ck)
    return _evolve(state, neighbors=bufs, dropped=dropped, own=own, iteration=state.iteration + 1,
                   stable_rounds=stable, settled_for=key)


def state_update(state: AgentState, users: UsersLike, command: OperatorCommand,
                 clamps: Mapping[int, Number] | None = None) -> AgentState:
    """State update: best feasible candidate after own-block re-optimisation.

    Candidates are the own estimate and every neighbour buffer.  Infeasible
    candidates that the own block cannot repair are discarded; if nothing
    survives the agent restarts from the all-off vector.
    """
    return _update(state, as_coalition(users), command.capacity_units, clamps_to_units(clamps))


def locally_converged(state: AgentState, K: int) -> bool:
    """Stable for ``K`` iterations and every neighbour agrees.

    A buffer only counts once a real message has refreshed it; the copies
    seeded at initialisation do not, so an agent that has never heard from
    a neighbour keeps running.  Buffers never expire.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if state.stable_rounds < K:
        return False
    own = state.own.state
    return all(buf.last_heard is not None and buf.estimate.state == own for buf in state.neighbors.values())


def message_from(state: AgentState) -> ProtocolMessage:
    return ProtocolMessage(state.agent_id, state.iteration, state.own.utility, state.own.state)


def payload_size(n_total: int) -> int:
    return HEADER_SIZE + (n_total + 7) // 8


def encode(msg: ProtocolMessage) -> bytes:
    """Little-endian header (sender u32, iteration u32, J f64) then packed bits."""
    if not (0 <= msg.sender_id < 2**32 and 0 <= msg.iteration < 2**32):
        raise CodecError("sender_id and iteration must fit in 32 bits")
    return HEADER.pack(msg.sender_id, msg.iteration, msg.J) + msg.x.packed


def encode_message(state: AgentState) -> bytes:
    return encode(message_from(state))


def decode_message(data: bytes, n_total: int) -> ProtocolMessage:
    if len(data) != payload_size(n_total):
        raise CodecError(f"expected {payload_size(n_total)} bytes for {n_total} coordinates, got {len(data)}")
    sender, iteration, J = HEADER.unpack_from(data)
    tail = n_total % 8
    if tail and data[-1] >> tail:
        raise CodecError("non-zero padding bits")
    return ProtocolMessage(sender, iteration, J, StateVector._from_packed(bytes(data[HEADER_SIZE:]), n_total))
