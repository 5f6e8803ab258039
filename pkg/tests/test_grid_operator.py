import json

import pytest
from hypothesis import given, strategies as st

from ddp_grid import (
    CommandError,
    FaultEvent,
    GenerationError,
    LoadSector,
    OperatorCommand,
    Scenario,
    Topology,
    UserLoad,
    is_connected,
    run_synchronous,
)
from ddp_grid.grid_operator import (
    CommandSequence,
    IncentiveSchedule,
    LoadProfile,
    PerfRecord,
    compare,
    deployed_by_component,
    deployed_reduction,
    dynamic_rate,
    generate_system,
    load_command_sequence,
    performance_index,
    qualified_payment,
    run_command_sequence,
    settle_payment,
)
from ddp_grid.model import Coalition, units_to_mw
from ddp_grid.scenario import faults_for, scenario_from_json

money = st.floats(0, 1e4, allow_nan=False)


class TestIncentives:
    def test_dynamic_defaults(self):
        dyn = IncentiveSchedule.dynamic()
        assert dynamic_rate(dyn, 200) == 93.75
        assert dynamic_rate(dyn, 50) == 75.0
        assert dynamic_rate(dyn, 75) == 75.0

    def test_static(self):
        assert dynamic_rate(IncentiveSchedule.static(500), 1234) == 500

    @pytest.mark.parametrize("args, expected", [((500, 140, 1), 70_000), ((93.75, 200, 1), 18_750), ((42, 0, 1), 0)])
    def test_payment(self, args, expected):
        assert settle_payment(*args) == expected

    def test_negative_inputs(self):
        with pytest.raises(CommandError):
            settle_payment(-1, 1, 1)
        with pytest.raises(CommandError):
            dynamic_rate(IncentiveSchedule.dynamic(), -1)
        with pytest.raises(CommandError):
            IncentiveSchedule("sliding")

    @given(money, money, money, money)
    def test_payment_bilinear(self, r1, r2, p, scale):
        assert settle_payment(r1 + r2, p, 1) == pytest.approx(settle_payment(r1, p, 1) + settle_payment(r2, p, 1))
        assert settle_payment(r1, p * scale, 1) == pytest.approx(settle_payment(r1, p, 1) * scale)

    @given(st.floats(0, 1000), st.floats(0, 1000))
    def test_dynamic_rate_monotone_and_continuous(self, a, b):
        dyn = IncentiveSchedule.dynamic()
        lo, hi = sorted((a, b))
        assert dynamic_rate(dyn, lo) <= dynamic_rate(dyn, hi)
        assert abs(dynamic_rate(dyn, hi) - dynamic_rate(dyn, lo)) <= 0.15 * (hi - lo) + 1e-9


class TestPerformanceIndex:
    @pytest.mark.parametrize("args, expected, tol", [
        ((32663, 33768, 320, 7920), 23.94, 0.01),
        ((91950, 101700, 3200, 34897), 9.86, 0.01),
    ])
    def test_published_rows(self, args, expected, tol):
        assert performance_index(*args) == pytest.approx(expected, abs=tol)

    def test_fourteen_agent_row_recomputed(self):
        # the published 0.49 does not follow from its own inputs
        assert performance_index(7120, 7120, 77, 31) == pytest.approx(0.4026, abs=1e-4)

    @given(st.floats(0.1, 1e6), st.floats(0.1, 1e6))
    def test_identity(self, f, t):
        assert performance_index(f, f, t, t) == pytest.approx(1.0)

    def test_zero_denominators(self):
        with pytest.raises(ZeroDivisionError):
            performance_index(1, 0, 1, 1)
        with pytest.raises(ZeroDivisionError):
            performance_index(1, 1, 0, 1)

    def test_record(self):
        assert PerfRecord(1, 2, 3, 6).I_p == 1.0


class TestGenerate:
    @pytest.mark.parametrize("n, n_cp, n_c", [(14, 1.43, 20), (162, 1.75, 284), (590, 1.54, 909), (1062, 1.54, 1635)])
    def test_table_sizes(self, n, n_cp, n_c):
        s = generate_system(n, n_cp, seed=11)
        assert abs(s.topology.n_c - n_c) <= 0.03 * n_c
        assert abs(s.topology.n_cp - n_cp) <= 0.05
        assert is_connected(s.topology)

    @pytest.mark.parametrize("n, n_cp", [(14, 1.43), (162, 1.75), (590, 1.54), (1062, 1.54)])
    def test_hundred_seeds_connected_and_valid(self, n, n_cp):
        for seed in range(100):
            s = generate_system(n, n_cp, seed=seed)
            assert is_connected(s.topology)
            scenario_from_json(json.loads(json.dumps(s.to_json())))

    def test_two_agents(self):
        s = generate_system(2, 0.5, seed=3)
        assert s.topology.edges == frozenset({(1, 2)})

    def test_deterministic(self):
        assert generate_system(50, 1.5, seed=9).to_json() == generate_system(50, 1.5, seed=9).to_json()
        assert generate_system(50, 1.5, seed=9).to_json() != generate_system(50, 1.5, seed=10).to_json()

    def test_profile(self):
        s = generate_system(200, 1.5, seed=1)
        for u in s.users:
            assert 1 <= len(u.sectors) <= 3
            assert len({sec.weight for sec in u.sectors}) == 1
            for sec in u.sectors:
                assert sec.weight in (1, 10, 20) and 10 <= sec.baseline_mw <= 150 and sec.baseline_mw % 5 == 0
        total = units_to_mw(s.users.total_baseline_units)
        assert s.command.required_reduction_mw == round(total * 0.1)

    @pytest.mark.parametrize("n, n_cp", [(1, 1.0), (10, 0.5), (4, 2.0)])
    def test_unattainable(self, n, n_cp):
        with pytest.raises(GenerationError):
            generate_system(n, n_cp)

    def test_bad_profile(self):
        with pytest.raises(GenerationError):
            LoadProfile(reduction_fraction=2)


class TestDeployment:
    def test_goldens(self, three, ieee14):
        t3, t14 = run_synchronous(three), run_synchronous(ieee14)
        assert deployed_reduction(t3) == 30.0 and qualified_payment(t3) == (500, 15_000)
        assert deployed_reduction(t14) == 140.0 and qualified_payment(t14) == (500, 70_000)

    def test_consensus_identity(self, ieee14):
        tr = run_synchronous(ieee14)
        x = tr.consensus_state()
        assert deployed_reduction(tr) == units_to_mw(ieee14.users.total_baseline_units - ieee14.users.load_units(x))

    def test_two_components(self):
        users = [UserLoad(u, (LoadSector(10 * u, 1),)) for u in range(1, 5)]
        co = Coalition(users)
        s = Scenario(co, Topology.from_edges(co.user_ids, [(1, 2), (3, 4)]),
                     OperatorCommand.from_reduction(100, 30, 100.0), max_iterations=30)
        tr = run_synchronous(s)
        parts = deployed_by_component(tr)
        assert [c for c, _ in parts] == [[1, 2], [3, 4]]
        # each side fits under the whole capacity on its own, so nothing is shed
        assert parts == [([1, 2], 0.0), ([3, 4], 0.0)]
        assert deployed_reduction(tr) == 0.0

    def test_payment_capped_at_request(self, ieee14):
        tr = run_synchronous(faults_for(ieee14, [FaultEvent("load_disconnect", 5, user=10, clamp_mw=100)]))
        assert deployed_reduction(tr) == 160.0
        assert qualified_payment(tr) == (500, 70_000)


class TestSequence:
    def test_day(self, ieee14):
        steps = run_command_sequence(ieee14, load_command_sequence("ieee14-day"))
        assert [s.required_mw for s in steps] == [100, 150, 200, 150, 100]
        assert [s.rate for s in steps] == [78.75, 86.25, 93.75, 86.25, 78.75]
        assert steps[2].payment == 18_750
        assert all(s.converged for s in steps)
        assert all(s.deployed_mw >= s.required_mw for s in steps)

    def test_constant_sequence(self, ieee14):
        seq = CommandSequence(760, tuple((float(h), 140.0) for h in range(4)), IncentiveSchedule.static(500))
        steps = run_command_sequence(ieee14, seq)
        later = [(s.utility, s.deployed_mw, s.payment, s.rounds) for s in steps[1:]]
        assert len(set(later)) == 1
        assert steps[0].utility == steps[1].utility == 7120

    def test_times_increase(self):
        with pytest.raises(CommandError):
            CommandSequence(10, ((1.0, 1.0), (1.0, 2.0)))
        with pytest.raises(CommandError):
            CommandSequence(10, ())


class TestCompare:
    def test_ieee14(self, ieee14):
        c, _ = compare(ieee14)
        assert c.f_g == c.f_d == 7120 and c.ratio == 1.0
        assert c.I_p == pytest.approx(c.t_g_ms / c.t_d_ms)
        assert set(c.to_json()) >= {"utility_ratio", "performance_index"}

    def test_single_user(self):
        users = Coalition([UserLoad(1, (LoadSector(10, 2), LoadSector(5, 1)))])
        s = Scenario(users, Topology.from_edges([1], []), OperatorCommand.from_reduction(15, 5))
        c, _ = compare(s)
        assert c.ratio == 1.0

    @pytest.mark.slow
    def test_generated_162(self):
        for seed in range(20):
            c, _ = compare(generate_system(162, 1.75, seed=seed))
            assert c.converged and 0.9 <= c.ratio <= 1.0
