import numpy as np
import pytest

from ddp_grid import Coalition, LoadSector, OperatorCommand, Scenario, Topology, UserLoad, load_scenario
from ddp_grid.model import units_to_mw


def random_users(rng: np.random.Generator, n_users: int, max_sectors: int = 3,
                 allow_empty: bool = True) -> Coalition:
    users = []
    lo = 0 if allow_empty else 1
    for uid in range(1, n_users + 1):
        count = int(rng.integers(lo, max_sectors + 1))
        sectors = tuple(LoadSector(float(rng.integers(1, 31) * 5), float(rng.integers(0, 6)))
                        for _ in range(count))
        users.append(UserLoad(uid, sectors))
    return Coalition(users)


def random_connected_edges(rng: np.random.Generator, n: int, extra: float = 0.5) -> list[tuple[int, int]]:
    edges = {(int(rng.integers(1, v)), v) for v in range(2, n + 1)}
    target = len(edges) + int(rng.integers(0, int(extra * n) + 1))
    while len(edges) < min(target, n * (n - 1) // 2):
        i, j = sorted(int(v) for v in rng.choice(np.arange(1, n + 1), size=2, replace=False))
        edges.add((i, j))
    return sorted(edges)


def random_scenario(seed: int, max_n: int = 30, **overrides) -> Scenario:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_n + 1))
    co = random_users(rng, n)
    total = units_to_mw(co.total_baseline_units)
    reduction = round(total * float(rng.uniform(0.05, 0.6)))
    return Scenario(
        users=co,
        topology=Topology.from_edges(co.user_ids, random_connected_edges(rng, n)),
        command=OperatorCommand.from_reduction(total, reduction, 100.0),
        seed=seed,
        max_iterations=max(100, 10 * n),
        name=f"random-{seed}",
        **overrides,
    )


@pytest.fixture(scope="session")
def three():
    return load_scenario("three-agent")


@pytest.fixture(scope="session")
def ieee14():
    return load_scenario("ieee14")


# one summary line per acceptance criterion

_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1][len("test_criterion_"):]
    number, _, title = name.partition("_")
    if report.failed:
        _CRITERIA[number] = ("FAIL", title)
    elif report.when == "call" and number not in _CRITERIA:
        _CRITERIA[number] = ("PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        verdict, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {int(number):2d}: {verdict}  {title.replace('_', ' ')}")
