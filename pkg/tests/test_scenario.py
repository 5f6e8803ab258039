import json

import pytest

from ddp_grid import ScenarioError, load_scenario, scenario_from_json
from ddp_grid.scenario import bundled_path, dump_scenario, validate_file


def test_bundled(three, ieee14):
    assert three.command.capacity_mw == 60 and three.max_iterations == 10
    assert ieee14.command.capacity_mw == 620 and ieee14.command.incentive_rate == 500
    assert validate_file(bundled_path("ieee14")) == []


def test_json_round_trip(tmp_path, ieee14):
    path = tmp_path / "s.json"
    dump_scenario(ieee14, path)
    again = load_scenario(path)
    assert again.to_json() == ieee14.to_json()


def _broken(ieee14, tmp_path, mutate):
    obj = ieee14.to_json()
    mutate(obj)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(obj))
    return validate_file(path)


@pytest.mark.parametrize("mutate", [
    lambda o: o["topology"]["edges"].append([9, 14]),
    lambda o: o["command"].update(required_reduction_mw=800),
    lambda o: o["users"].pop(),
    lambda o: o.pop("users"),
    lambda o: o["users"][3]["sectors"][0].update(baseline_mw=-5),
    lambda o: o.update(max_iterations=0),
    lambda o: o["faults"].append({"kind": "link_loss", "at_iteration": 5, "edge": [1, 14]}),
    lambda o: o["faults"].append({"kind": "agent_loss", "at_iteration": 5, "user": 99}),
    lambda o: o.update(seed=-1),
])
def test_invalid_files(ieee14, tmp_path, mutate):
    assert _broken(ieee14, tmp_path, mutate)


def test_syntax_error_has_line(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{\n  "users": [,]\n}')
    (msg,) = validate_file(path)
    assert ":2:" in msg


def test_not_an_object():
    with pytest.raises(ScenarioError):
        scenario_from_json([1, 2])


def test_overrides(ieee14):
    s = ieee14.with_overrides(seed=4, packet_loss=0.2, max_iterations=None)
    assert s.seed == 4 and s.network.packet_loss == 0.2 and s.max_iterations == ieee14.max_iterations
