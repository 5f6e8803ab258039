import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddp_grid import (
    InfeasibleScenarioError,
    LoadSector,
    ProtocolError,
    SizeError,
    StateVector,
    UserLoad,
    evaluate_load,
    evaluate_utility,
    is_feasible,
    local_block_optimize,
    solve_bruteforce,
    solve_centralized,
)
from ddp_grid.model import Coalition, units_to_mw

from conftest import random_users


def oracle_instance(seed: int, max_sectors: int = 16):
    """Random users, capacity and clamps; many equal loads and weights so ties are common."""
    rng = np.random.default_rng(seed)
    while True:
        co = random_users(rng, int(rng.integers(1, 9)), max_sectors=4)
        if co.n_total <= max_sectors:
            break
    clamps = {}
    for uid in co.user_ids:
        if co.blocks[uid][1] > co.blocks[uid][0] and rng.random() < 0.1:
            clamps[uid] = float(rng.integers(0, 30) * 5)
    total = units_to_mw(co.total_baseline_units) + sum(clamps.values())
    capacity = sum(clamps.values()) + float(rng.integers(0, int(total) + 10))
    return co, capacity, clamps


def assert_same(co, capacity, clamps):
    dp = solve_centralized(co, capacity, clamps)
    bf = solve_bruteforce(co, capacity, clamps)
    assert dp.state == bf.state
    assert dp.utility_units == bf.utility_units and dp.load_units == bf.load_units
    return dp


class TestCentralized:
    def test_three_agent(self, three):
        sol = solve_centralized(three.users, 60)
        assert sol.utility == 220.0 and sol.load_mw == 60.0
        assert sol.state == three.users.state_from_blocks({1: [0], 2: [0, 1], 3: [1]})

    def test_ieee14(self, ieee14):
        sol = solve_centralized(ieee14.users, 620)
        assert sol.utility == 7120.0
        assert ieee14.users.off_set(sol.state) == {10, 14}

    def test_ieee14_clamped(self, ieee14):
        sol = solve_centralized(ieee14.users, 620, {10: 100})
        assert sol.utility == 7000.0
        assert ieee14.users.off_set(sol.state) - {10} == {11, 14}
        # clamped bits are reported on
        a, b = ieee14.users.blocks[10]
        assert sol.state.block(a, b - a) == 1

    def test_capacity_above_total(self, ieee14):
        sol = solve_centralized(ieee14.users, 10_000)
        assert sol.state == ieee14.users.all_on()
        assert sol.utility == evaluate_utility(ieee14.users.all_on(), ieee14.users)

    def test_clamps_above_capacity(self, ieee14):
        with pytest.raises(InfeasibleScenarioError):
            solve_centralized(ieee14.users, 50, {10: 100})
        with pytest.raises(InfeasibleScenarioError):
            solve_bruteforce(ieee14.users, 50, {10: 100})

    def test_empty_coalition(self):
        sol = solve_centralized([], 10)
        assert sol.utility == 0 and len(sol.state) == 0

    def test_fractional_loads(self):
        users = [UserLoad(1, (LoadSector(0.25, 4), LoadSector(0.5, 1), LoadSector(0.3, 3)))]
        assert solve_centralized(users, 0.55).state == solve_bruteforce(users, 0.55).state

    def test_solution_fields(self, ieee14):
        sol = solve_centralized(ieee14.users, 620)
        assert sol.utility == evaluate_utility(sol.state, ieee14.users)
        assert sol.load_mw == evaluate_load(sol.state, ieee14.users)
        assert is_feasible(sol.state, ieee14.users, 620)

    def test_tie_break_prefers_earlier_sector(self):
        users = [UserLoad(1, (LoadSector(10, 1),)), UserLoad(2, (LoadSector(10, 1),))]
        for solve in (solve_centralized, solve_bruteforce):
            assert solve(users, 10).state.to_list() == [1, 0]

    def test_tie_break_minimises_load(self):
        # 20 MW at weight 1 and 10 MW at weight 2 are worth the same
        users = [UserLoad(1, (LoadSector(20, 1),)), UserLoad(2, (LoadSector(10, 2),))]
        for solve in (solve_centralized, solve_bruteforce):
            assert solve(users, 20).state.to_list() == [0, 1]


class TestBruteforce:
    def test_three_agent(self, three):
        assert solve_bruteforce(three.users, 60).utility == 220.0

    def test_zero_capacity(self):
        sol = solve_bruteforce([UserLoad(1, (LoadSector(10, 5),))], 0)
        assert sol.state.to_list() == [0] and sol.utility == 0

    def test_size_limit(self):
        users = [UserLoad(1, tuple(LoadSector(1, 1) for _ in range(25)))]
        with pytest.raises(SizeError):
            solve_bruteforce(users, 10)

    def test_large_instance_agrees(self):
        for seed in range(3):
            rng = np.random.default_rng(1000 + seed)
            users = [UserLoad(u, tuple(LoadSector(float(rng.integers(1, 10) * 5), float(rng.integers(0, 4)))
                                      for _ in range(4))) for u in range(1, 7)]
            co = Coalition(users)
            assert co.n_total == 24
            assert_same(co, units_to_mw(co.total_baseline_units) * 0.6, {})


def test_oracle_equivalence_1000_instances():
    for seed in range(1000):
        assert_same(*oracle_instance(seed))


class TestLocalBlock:
    def test_user2_reaches_220(self, three):
        co = three.users
        base = co.state_from_blocks({3: [1]})
        sol = local_block_optimize(base, 2, co, 60)
        assert sol.utility == 220.0 and sol.state == co.state_from_blocks({2: [0, 1], 3: [1]})

    def test_unconstrained_block_turns_fully_on(self, ieee14):
        co = ieee14.users
        sol = local_block_optimize(co.all_off(), 4, co, 1000)
        assert sol.state == co.state_from_blocks({4: [1, 1, 1]})

    def test_block_stays_off_when_it_would_overload(self, three):
        co = three.users
        base = co.state_from_blocks({1: [1], 2: [1, 1]})
        sol = local_block_optimize(base, 3, co, 60)
        # switching user 3 on would draw 50 + 40 = 90 MW
        assert sol.state == base and sol.utility == 130.0 and sol.load_mw == 50.0

    def test_no_feasible_setting(self, three):
        co = three.users
        assert local_block_optimize(co.state_from_blocks({1: [1], 3: [1]}), 2, co, 50) is None

    def test_errors(self, three):
        with pytest.raises(ProtocolError):
            local_block_optimize(three.users.all_off(), 2, three.users, 60, {2: 10})
        with pytest.raises(ProtocolError):
            local_block_optimize(three.users.all_off(), 9, three.users, 60)

    def test_wide_block_uses_exact_solver(self):
        sectors = tuple(LoadSector(float(5 + k), float(k % 4)) for k in range(14))
        co = Coalition([UserLoad(1, sectors), UserLoad(2, (LoadSector(30, 1),))])
        base = co.state_from_blocks({2: [1]})
        sol = local_block_optimize(base, 1, co, 80)
        best = solve_centralized([UserLoad(1, sectors)], 50)
        assert sol.utility_units == best.utility_units + co.utility_units(base)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_capacity_monotonicity(seed):
    co, cap, clamps = oracle_instance(seed, max_sectors=20)
    lo = solve_centralized(co, cap, clamps).utility_units
    hi = solve_centralized(co, cap + 7.5, clamps).utility_units
    assert lo <= hi


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.data())
def test_local_block_properties(seed, data):
    rng = np.random.default_rng(seed)
    co = random_users(rng, int(rng.integers(1, 6)), max_sectors=4)
    cap = float(rng.integers(0, units_to_mw(co.total_baseline_units) + 10))
    base = StateVector([int(b) for b in rng.integers(0, 2, co.n_total)])
    uid = data.draw(st.sampled_from(co.user_ids))
    sol = local_block_optimize(base, uid, co, cap)
    a, b = co.blocks[uid]
    # only the user's own block may differ
    assert sol is None or all(sol.state[k] == base[k] for k in range(co.n_total) if not a <= k < b)
    if is_feasible(base, co, cap):
        assert sol is not None and sol.utility_units >= co.utility_units(base)
    if sol is not None:
        assert is_feasible(sol.state, co, cap)
        assert local_block_optimize(sol.state, uid, co, cap).state == sol.state
    else:
        rest = base.with_block(a, b - a, 0)
        assert not is_feasible(rest, co, cap)
