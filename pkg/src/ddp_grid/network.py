"""Communication topology, fault events and timing configuration."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional

from .errors import ScenarioError

TICKS_PER_MS = 100


def ms_to_ticks(ms: float) -> int:
    return int(round(ms * TICKS_PER_MS))


def ticks_to_ms(ticks: int) -> float:
    return ticks / TICKS_PER_MS


def _edge(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class Topology:
    vertices: tuple[int, ...]
    edges: frozenset[tuple[int, int]]

    @classmethod
    def from_edges(cls, vertices: Iterable[int], edges: Iterable[Iterable[int]]) -> "Topology":
        verts = tuple(sorted(vertices))
        if len(set(verts)) != len(verts):
            raise ScenarioError("duplicate vertices")
        known = set(verts)
        seen: set[tuple[int, int]] = set()
        for e in edges:
            i, j = (int(v) for v in e)
            if i == j:
                raise ScenarioError(f"self-loop at vertex {i}")
            if i not in known or j not in known:
                raise ScenarioError(f"edge ({i}, {j}) references an unknown vertex")
            key = _edge(i, j)
            if key in seen:
                raise ScenarioError(f"duplicate edge ({i}, {j})")
            seen.add(key)
        return cls(verts, frozenset(seen))

    @cached_property
    def adjacency(self) -> dict[int, tuple[int, ...]]:
        adj: dict[int, list[int]] = {v: [] for v in self.vertices}
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return {v: tuple(sorted(ns)) for v, ns in adj.items()}

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self.adjacency[v]

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def n_c(self) -> int:
        return len(self.edges)

    @property
    def n_cp(self) -> float:
        return self.n_c / self.n if self.n else 0.0

    def has_edge(self, i: int, j: int) -> bool:
        return _edge(i, j) in self.edges

    def without_edges(self, edges: Iterable[tuple[int, int]]) -> "Topology":
        drop = {_edge(*e) for e in edges}
        return Topology(self.vertices, self.edges - drop)

    def without_vertex(self, v: int) -> "Topology":
        return Topology(self.vertices, frozenset(e for e in self.edges if v not in e))

    def sorted_edges(self) -> list[list[int]]:
        return [list(e) for e in sorted(self.edges)]


def is_connected(topology: Topology, active_vertices: Optional[Iterable[int]] = None,
                 removed_edges: Iterable[tuple[int, int]] = ()) -> bool:
    """Breadth-first reachability over active vertices and surviving edges."""
    active = set(topology.vertices if active_vertices is None else active_vertices)
    if len(active) <= 1:
        return True
    removed = {_edge(*e) for e in removed_edges}
    adj: dict[int, list[int]] = {v: [] for v in active}
    for e in topology.edges:
        if e in removed or e[0] not in active or e[1] not in active:
            continue
        adj[e[0]].append(e[1])
        adj[e[1]].append(e[0])
    start = min(active)
    seen = {start}
    queue = deque([start])
    while queue:
        for w in adj[queue.popleft()]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return len(seen) == len(active)


def components(topology: Topology, active_vertices: Optional[Iterable[int]] = None) -> list[list[int]]:
    active = sorted(set(topology.vertices if active_vertices is None else active_vertices))
    alive = set(active)
    seen: set[int] = set()
    out = []
    for s in active:
        if s in seen:
            continue
        comp, queue = [s], deque([s])
        seen.add(s)
        while queue:
            for w in topology.neighbors(queue.popleft()):
                if w in alive and w not in seen:
                    seen.add(w)
                    comp.append(w)
                    queue.append(w)
        out.append(sorted(comp))
    return out


FAULT_KINDS = (
    "link_loss",
    "load_disconnect",
    "agent_loss",
    "packet_loss_rate",
    "mean_delay_ms",
    "capacity_change",
    "incentive_change",
)


@dataclass(frozen=True)
class FaultEvent:
    """A scheduled change to the world.

    ``at_iteration`` is a round boundary (fires after that many rounds);
    ``at_time_ms`` is used by the asynchronous simulator and defaults to
    ``at_iteration`` times the nominal round length.
    """

    kind: str
    at_iteration: Optional[int] = None
    at_time_ms: Optional[float] = None
    edge: Optional[tuple[int, int]] = None
    user: Optional[int] = None
    clamp_mw: Optional[float] = None
    value: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise ScenarioError(f"unknown fault kind {self.kind!r}")
        if self.at_iteration is None and self.at_time_ms is None:
            raise ScenarioError(f"{self.kind} fault needs at_iteration or at_time_ms")
        if self.at_iteration is not None and self.at_iteration < 0:
            raise ScenarioError("at_iteration must be >= 0")
        if self.kind == "link_loss":
            if self.edge is None or len(self.edge) != 2:
                raise ScenarioError("link_loss needs an edge")
            object.__setattr__(self, "edge", (int(self.edge[0]), int(self.edge[1])))
        elif self.kind in ("load_disconnect", "agent_loss"):
            if self.user is None:
                raise ScenarioError(f"{self.kind} needs a user")
            if self.kind == "load_disconnect" and (self.clamp_mw is None or self.clamp_mw < 0):
                raise ScenarioError("load_disconnect needs clamp_mw >= 0")
        else:
            if self.value is None:
                raise ScenarioError(f"{self.kind} needs a value")
            if self.kind == "packet_loss_rate" and not 0 <= self.value <= 1:
                raise ScenarioError("packet loss rate must lie in [0, 1]")
            if self.value < 0:
                raise ScenarioError(f"{self.kind} value must be >= 0")

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        for name in ("at_iteration", "at_time_ms", "user", "clamp_mw", "value"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        if self.edge is not None:
            out["edge"] = list(self.edge)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FaultEvent":
        try:
            return cls(
                kind=obj["kind"],
                at_iteration=obj.get("at_iteration"),
                at_time_ms=obj.get("at_time_ms"),
                edge=tuple(obj["edge"]) if "edge" in obj else None,
                user=obj.get("user", obj.get("agent")),
                clamp_mw=obj.get("clamp_mw"),
                value=obj.get("value"),
            )
        except KeyError as exc:
            raise ScenarioError(f"fault entry missing {exc}") from exc


@dataclass(frozen=True)
class CostModel:
    """Simulated per-round stage costs in milliseconds."""

    t_id_ms: float = 3.0
    t_su_ms: float = 1.0

    @property
    def round_ticks(self) -> int:
        return ms_to_ticks(self.t_id_ms) + ms_to_ticks(self.t_su_ms)


@dataclass(frozen=True)
class NetworkConfig:
    packet_loss: float = 0.0
    mean_delay_ms: float = 0.0
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self) -> None:
        if not 0 <= self.packet_loss <= 1:
            raise ScenarioError("packet_loss must lie in [0, 1]")
        if self.mean_delay_ms < 0:
            raise ScenarioError("mean_delay_ms must be >= 0")
