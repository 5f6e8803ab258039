"""Scenario aggregate and its JSON file format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Union

from .errors import CommandError, ScenarioError
from .model import Coalition, LoadSector, OperatorCommand, UserLoad
from .network import CostModel, FaultEvent, NetworkConfig, Topology

BUNDLED = ("three-agent", "ieee14")


@dataclass(frozen=True)
class Scenario:
    users: Coalition
    topology: Topology
    command: OperatorCommand
    faults: tuple[FaultEvent, ...] = ()
    seed: int = 0
    max_iterations: int = 100
    network: NetworkConfig = field(default_factory=NetworkConfig)
    name: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.users, Coalition):
            object.__setattr__(self, "users", Coalition(self.users))
        object.__setattr__(self, "faults", tuple(self.faults))
        if set(self.topology.vertices) != set(self.users.user_ids):
            raise ScenarioError("topology vertices must match user ids one-to-one")
        if not 0 <= self.seed < 2**64:
            raise ScenarioError("seed must be an unsigned 64-bit integer")
        if self.max_iterations < 1:
            raise ScenarioError("max_iterations must be positive")
        for f in self.faults:
            check_fault_refs(self, f)

    def with_overrides(self, **kw: Any) -> "Scenario":
        net = {k: kw.pop(k) for k in ("packet_loss", "mean_delay_ms") if kw.get(k) is not None}
        kw = {k: v for k, v in kw.items() if v is not None}
        out = replace(self, **kw)
        if net:
            out = replace(out, network=replace(out.network, **net))
        return out

    def to_json(self) -> dict:
        cmd: dict[str, Any] = {}
        if self.command.running_load_mw is not None:
            cmd["running_load_mw"] = self.command.running_load_mw
            cmd["required_reduction_mw"] = self.command.required_reduction_mw
        else:
            cmd["capacity_mw"] = self.command.capacity_mw
        cmd["incentive_rate_dollars_per_mwh"] = self.command.incentive_rate
        cmd["duration_h"] = self.command.duration_h
        return {
            "name": self.name,
            "users": [
                {"id": u.user_id, "sectors": [{"baseline_mw": s.baseline_mw, "weight": s.weight} for s in u.sectors]}
                for u in self.users
            ],
            "topology": {"edges": self.topology.sorted_edges()},
            "command": cmd,
            "faults": [f.to_json() for f in self.faults],
            "seed": self.seed,
            "max_iterations": self.max_iterations,
            "network": {
                "packet_loss": self.network.packet_loss,
                "mean_delay_ms": self.network.mean_delay_ms,
                "t_id_ms": self.network.cost.t_id_ms,
                "t_su_ms": self.network.cost.t_su_ms,
            },
        }


def check_fault_refs(scenario: Scenario, fault: FaultEvent) -> None:
    if fault.kind == "link_loss" and not scenario.topology.has_edge(*fault.edge):
        raise ScenarioError(f"link_loss references missing edge {fault.edge}")
    if fault.kind in ("load_disconnect", "agent_loss") and fault.user not in scenario.users:
        raise ScenarioError(f"{fault.kind} references unknown user {fault.user}")


def _need(obj: dict, key: str, where: str) -> Any:
    if key not in obj:
        raise ScenarioError(f"{where}: missing key {key!r}")
    return obj[key]


def _parse_command(obj: dict) -> OperatorCommand:
    if not isinstance(obj, dict):
        raise ScenarioError("command must be an object")
    rate = float(obj.get("incentive_rate_dollars_per_mwh", 0.0))
    duration = float(obj.get("duration_h", 1.0))
    try:
        if "running_load_mw" in obj:
            return OperatorCommand.from_reduction(
                obj["running_load_mw"], obj.get("required_reduction_mw", 0), rate, duration)
        return OperatorCommand(float(_need(obj, "capacity_mw", "command")), rate, duration,
                               required_reduction_mw=obj.get("required_reduction_mw"))
    except CommandError as exc:
        raise ScenarioError(f"command: {exc}") from exc


def scenario_from_json(obj: dict) -> Scenario:
    if not isinstance(obj, dict):
        raise ScenarioError("scenario must be a JSON object")
    users = []
    for n, u in enumerate(_need(obj, "users", "scenario")):
        where = f"users[{n}]"
        try:
            sectors = [LoadSector(float(_need(s, "baseline_mw", where)), float(_need(s, "weight", where)))
                       for s in u.get("sectors", [])]
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{where}: {exc}") from exc
        users.append(UserLoad(int(_need(u, "id", where)), tuple(sectors)))
    try:
        co = Coalition(users)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    topo = Topology.from_edges(co.user_ids, _need(_need(obj, "topology", "scenario"), "edges", "topology"))
    net = obj.get("network", {})
    network = NetworkConfig(
        packet_loss=float(net.get("packet_loss", 0.0)),
        mean_delay_ms=float(net.get("mean_delay_ms", 0.0)),
        cost=CostModel(float(net.get("t_id_ms", 3.0)), float(net.get("t_su_ms", 1.0))),
    )
    return Scenario(
        users=co,
        topology=topo,
        command=_parse_command(_need(obj, "command", "scenario")),
        faults=tuple(FaultEvent.from_json(f) for f in obj.get("faults", [])),
        seed=int(obj.get("seed", 0)),
        max_iterations=int(obj.get("max_iterations", 100)),
        network=network,
        name=str(obj.get("name", "")),
    )


def load_scenario(source: Union[str, Path]) -> Scenario:
    """Read a scenario file (or a bundled scenario name)."""
    if str(source) in BUNDLED:
        text = resources.files("ddp_grid.data").joinpath(f"{source}.json").read_text()
        where = str(source)
    else:
        path = Path(source)
        text = path.read_text()
        where = str(path)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{where}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return scenario_from_json(obj)


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("ddp_grid.data").joinpath(f"{name}.json")))


def dump_scenario(scenario: Scenario, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(scenario.to_json(), indent=2) + "\n")


def validate_file(path: Union[str, Path]) -> list[str]:
    """Problems found in a scenario file; empty when valid."""
    try:
        load_scenario(path)
    except (ScenarioError, OSError) as exc:
        return [str(exc)]
    except (ValueError, TypeError, KeyError, AttributeError) as exc:
        return [f"{path}: {exc}"]
    return []


def faults_for(scenario: Scenario, extra: Iterable[FaultEvent]) -> Scenario:
    return replace(scenario, faults=scenario.faults + tuple(extra))
