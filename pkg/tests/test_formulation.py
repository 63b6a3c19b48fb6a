import copy
import itertools

import numpy as np
import pytest

from wildfire_ots.formulation import (
    CostModel, FormulationConfig, ScenarioInfeasible, SolutionReport, as_corrective, build_corrective,
    build_deterministic, build_ph_subproblem, build_preventive, build_scenario_model, evaluate_first_stage,
    extract_report, first_stage_layout, fix_first_stage, lkey, parse_lkey, solve_extensive, verify_physics,
)
from wildfire_ots.milp import solve, verify_solution
from wildfire_ots.network import Bus, Line, Network, default_costs
from wildfire_ots.scenarios import OutageScenario, ScenarioSet

from conftest import BNB
from oracles import brute_force_preventive, dispatch_lp

NO_OUTAGE = ScenarioSet.single()


def _radial():
    """1 (generator) -- 2 (load) -- 3 (load)."""
    buses = (Bus(1, p_gu=5.0, c=10.0, is_reference=True), Bus(2, pd=1.0), Bus(3, pd=0.5))
    lines = (Line(1, 2, 1, -10.0, 3.0, 0.3), Line(2, 3, 1, -10.0, 3.0, 0.3))
    return default_costs(Network(buses, lines))


def test_two_bus_dispatch():
    net = Network((Bus(1, p_gu=3.0, c=12.0, is_reference=True), Bus(2, pd=1.0)),
                  (Line(1, 2, 1, -10.0, 2.0, 0.2),))
    model = build_deterministic(net, None, FormulationConfig("deterministic", 0))
    sol = solve(model, BNB)
    assert sol.objective == pytest.approx(12.0)
    assert sol.value("p[1-2-1]") == pytest.approx(1.0)


def test_case5_dc_dispatch_matches_oracle(net5):
    model = build_deterministic(net5, None, FormulationConfig("deterministic", 0))
    sol = solve(model, BNB)
    oracle, _ = dispatch_lp(net5, NO_OUTAGE, frozenset())
    assert sol.objective == pytest.approx(oracle, abs=1e-6)
    assert sol.objective == pytest.approx(17479.897, abs=1e-3)
    assert verify_solution(model, sol.x) <= 1e-6


def test_case5_single_switch_matches_enumeration(net5):
    model = build_deterministic(net5, None, FormulationConfig("deterministic", 1))
    sol = solve(model, BNB)
    candidates = {frozenset(): dispatch_lp(net5, NO_OUTAGE, frozenset())[0]}
    for line in net5.lines:
        out = dispatch_lp(net5, NO_OUTAGE, frozenset({line.key}))
        if out is not None:
            candidates[frozenset({line.key})] = out[0]
    best = min(candidates, key=candidates.get)
    assert sol.objective == pytest.approx(candidates[best], abs=1e-6)
    report = extract_report(model, sol, net5, None)
    assert {parse_lkey(k) for k in report.switched} == set(best)
    assert best == frozenset({(3, 4, 1)})
    assert sol.objective == pytest.approx(14991.96, abs=1e-2)


def test_deterministic_budget_zero_and_monotone(net5):
    values = []
    for beta in range(3):
        report, _ = solve_extensive(net5, None, FormulationConfig("deterministic", beta), BNB)
        values.append(report.objective)
        if beta == 0:
            assert report.switched == []
    assert values[0] >= values[1] - 1e-9 >= values[2] - 2e-9


def test_preventive_without_outages_equals_dispatch(net5):
    prev, _ = solve_extensive(net5, NO_OUTAGE, FormulationConfig("preventive", 0), BNB)
    det, _ = solve_extensive(net5, None, FormulationConfig("deterministic", 0), BNB)
    assert prev.objective == pytest.approx(det.objective, abs=1e-6)
    assert prev.ramp_cost == pytest.approx(0.0, abs=1e-9)
    assert prev.voll_cost == 0.0


def test_preventive_matches_brute_force(net5, three_scenarios):
    report, sol = solve_extensive(net5, three_scenarios, FormulationConfig("preventive", 1), BNB)
    oracle, switched = brute_force_preventive(net5, three_scenarios, 1)
    assert report.objective == pytest.approx(oracle, abs=1e-6)
    assert report.max_residual <= 1e-6


def test_isolated_load_is_shed():
    net = _radial()
    sc = ScenarioSet((OutageScenario(0, frozenset({(2, 3, 1)})), OutageScenario(1)))
    report, _ = solve_extensive(net, sc, FormulationConfig("preventive", 0), BNB)
    voll = net.buses[2].c_voll
    assert report.scenarios[0].shed["3"] == pytest.approx(0.5)
    assert report.scenarios[0].shed_mw == pytest.approx(50.0)
    assert report.voll_cost == pytest.approx(0.5 * voll * 0.5)
    assert report.scenarios[0].flows["2-3-1"] == 0.0


def test_corrective_single_scenario_dominates(net5):
    sc = ScenarioSet.single({(4, 5, 1)})
    prev, _ = solve_extensive(net5, sc, FormulationConfig("preventive", 1), BNB)
    corr, _ = solve_extensive(net5, sc, FormulationConfig("corrective", 1), BNB)
    assert corr.objective <= prev.objective + 1e-8


def test_corrective_recourse_matches_per_scenario_resolves(net5, three_scenarios):
    cfg = FormulationConfig("corrective", 1)
    report, _ = solve_extensive(net5, three_scenarios, cfg, BNB)
    layout = first_stage_layout("corrective", net5)
    x = [report.dispatch[name[3:-1]] for name in layout.names]
    for s, res in enumerate(report.scenarios):
        model = fix_first_stage(build_scenario_model("corrective", net5, None, three_scenarios, s, cfg), layout, x)
        sol = solve(model, BNB)
        first = sum(net5.buses[i].c * report.dispatch[str(net5.buses[i].id)] for i in net5.gen_indices)
        assert sol.objective - first == pytest.approx(res.cost, abs=1e-6)


def test_identical_scenarios_identical_recourse(net5):
    out = frozenset({(2, 3, 1)})
    sc = ScenarioSet(tuple(OutageScenario(i, out) for i in range(3)))
    report, _ = solve_extensive(net5, sc, FormulationConfig("corrective", 1), BNB)
    costs = [r.cost for r in report.scenarios]
    assert max(costs) - min(costs) <= 1e-9
    assert len({tuple(r.switched) for r in report.scenarios}) == 1


def test_budget_counts_switching_of_damaged_lines(net5):
    sc = ScenarioSet.single({(1, 2, 1)})
    model = build_preventive(net5, None, sc, FormulationConfig("preventive", 0))
    sol = solve(model, BNB)
    assert all(sol.value(n) == 0 for n in model.names if n.startswith("zon["))


def test_flows_on_inactive_lines_are_zero(net5, three_scenarios):
    report, _ = solve_extensive(net5, three_scenarios, FormulationConfig("preventive", 1), BNB)
    for sc, res in zip(three_scenarios, report.scenarios):
        for key in sc.out_lines:
            assert res.flows["%d-%d-%d" % key] == 0.0
        for key in report.switched:
            assert res.flows[key] == 0.0
        for bus in net5.buses:
            if bus.pd > 0:
                assert res.shed[str(bus.id)] <= bus.pd + 1e-12


def test_report_decomposition_sums_to_solver_objective(net5, three_scenarios):
    model = build_preventive(net5, None, three_scenarios, FormulationConfig("preventive", 1))
    sol = solve(model, BNB)
    report = extract_report(model, sol, net5, three_scenarios)
    total = report.generation_cost + report.ramp_cost + report.voll_cost
    assert total == pytest.approx(sol.objective, abs=1e-8)
    assert report.objective == pytest.approx(sol.objective, abs=1e-8)
    mean = report.generation_cost + sum(r.prob * r.cost for r in report.scenarios)
    assert mean == pytest.approx(sol.objective, abs=1e-8)


def test_shed_conversion_to_mw(net5):
    r = SolutionReport("preventive", 0, 0, 0, 0, {}, [], [], 0, 1.0, 100.0)
    from wildfire_ots.formulation import ScenarioResult
    r.scenarios.append(ScenarioResult(0, 1.0, [], [], {}, {}, {}, {}, {"2": 0.02}, 0.02 * 100.0, 0.0))
    assert r.expected_shed_mw == pytest.approx(2.0)


def test_report_json_round_trip(net5, three_scenarios):
    report, _ = solve_extensive(net5, three_scenarios, FormulationConfig("corrective", 1), BNB)
    back = SolutionReport.from_json(report.to_json())
    assert back == report


def test_verify_physics_detects_perturbation(net5, three_scenarios):
    report, _ = solve_extensive(net5, three_scenarios, FormulationConfig("preventive", 1), BNB)
    assert verify_physics(report, net5, three_scenarios) <= 1e-6
    bad = copy.deepcopy(report)
    key = next(k for k, v in bad.scenarios[0].flows.items() if v != 0)
    bad.scenarios[0].flows[key] += 0.1
    assert verify_physics(bad, net5, three_scenarios) >= 0.1 - 1e-9


def test_verify_physics_all_shed_all_open(net5):
    sc = ScenarioSet.single()
    report, _ = solve_extensive(net5, sc, FormulationConfig("preventive", 0), BNB)
    dark = copy.deepcopy(report)
    dark.budget = len(net5.lines)
    dark.switched = [lkey(l) for l in net5.lines]
    dark.dispatch = {k: 0.0 for k in dark.dispatch}
    res = dark.scenarios[0]
    res.ramp_up = {k: 0.0 for k in res.ramp_up}
    res.ramp_down = {k: 0.0 for k in res.ramp_down}
    res.flows = {k: 0.0 for k in res.flows}
    res.theta = {k: 0.0 for k in res.theta}
    res.shed = {str(b.id): b.pd for b in net5.buses if b.pd > 0}
    assert verify_physics(dark, net5, sc) == 0.0


def test_load_scaling_is_applied(net5):
    scaled, _ = solve_extensive(net5, None, FormulationConfig("deterministic", 0, load_scaling=1.05), BNB)
    base, _ = solve_extensive(net5, None, FormulationConfig("deterministic", 0), BNB)
    assert sum(scaled.dispatch.values()) == pytest.approx(1.05 * sum(base.dispatch.values()))
    assert scaled.max_residual <= 1e-6
    oracle, _ = dispatch_lp(net5, NO_OUTAGE, frozenset(), scaling=1.05)
    assert scaled.objective == pytest.approx(oracle, abs=1e-6)


def test_ph_subproblem_without_terms_is_scenario_model(net5, three_scenarios):
    cfg = FormulationConfig("preventive", 1)
    plain = solve(build_scenario_model("preventive", net5, None, three_scenarios, 1, cfg), BNB)
    sub = solve(build_ph_subproblem("preventive", net5, None, three_scenarios, 1, cfg), BNB)
    assert sub.objective == pytest.approx(plain.objective, abs=1e-9)


def test_binary_proximal_expansion(net5, three_scenarios):
    cfg = FormulationConfig("preventive", 1)
    layout = first_stage_layout("preventive", net5)
    n = len(layout.names)
    j = layout.names.index("zon[3-4-1]")
    anchor, rho, pen = np.zeros(n), np.zeros(n), np.zeros(n)
    anchor[j], rho[j], pen[j] = 0.5, 0.7, 2.0
    base = build_scenario_model("preventive", net5, None, three_scenarios, 0, cfg)
    sub = build_ph_subproblem("preventive", net5, None, three_scenarios, 0, cfg, anchor, rho, pen)
    v = sub.var("zon[3-4-1]")
    x = np.zeros(sub.num_vars)
    for z in (0.0, 1.0):
        x[v] = z
        extra = sub.objective_value(x) - base.objective_value(x)
        # rho (z - 0.5) + r/2 (z - 0.5)^2, linear in z after z^2 = z
        assert extra == pytest.approx(0.7 * (z - 0.5) + 2.0 / 2 * (z - 0.5) ** 2)
    assert v not in sub.quad


def test_continuous_proximal_pull_is_monotone():
    net = default_costs(Network(
        (Bus(1, p_gu=4.0, c=10.0, is_reference=True), Bus(2, pd=1.0, p_gu=4.0, c=30.0)),
        (Line(1, 2, 1, -10.0, 5.0, 0.5),)))
    sc = ScenarioSet.single()
    cfg = FormulationConfig("corrective", 0)
    layout = first_stage_layout("corrective", net)
    anchor = np.array([0.0, 1.0])  # pull generation toward the expensive unit
    dist = []
    for r in (0.0, 1.0, 10.0, 100.0, 1000.0):
        sol = solve(build_ph_subproblem("corrective", net, None, sc, 0, cfg, anchor, None, np.full(2, r)), BNB)
        x = np.array([sol.value(n) for n in layout.names])
        dist.append(float(np.linalg.norm(x - anchor)))
    assert all(a >= b - 1e-9 for a, b in zip(dist, dist[1:]))
    assert dist[-1] < dist[0]


def test_subproblem_shape_errors(net5, three_scenarios):
    with pytest.raises(ValueError):
        build_ph_subproblem("preventive", net5, None, three_scenarios, 0, FormulationConfig("preventive", 1),
                            anchor=np.zeros(2))


def test_infeasible_recourse_raises():
    buses = (Bus(1, p_gu=5.0, c=10.0, is_reference=True), Bus(2, pd=1.0), Bus(3, p_gl=0.5, p_gu=1.0, c=20.0))
    lines = (Line(1, 2, 1, -10.0, 3.0, 0.3), Line(2, 3, 1, -10.0, 3.0, 0.3))
    net = default_costs(Network(buses, lines))
    sc = ScenarioSet.single({(2, 3, 1)})
    cfg = FormulationConfig("preventive", 0)
    layout = first_stage_layout("preventive", net)
    x = np.zeros(len(layout.names))
    x[layout.names.index("pg[3]")] = 0.5
    with pytest.raises(ScenarioInfeasible, match="minimum generation"):
        evaluate_first_stage(net, sc, cfg, x, BNB)


def test_evaluate_first_stage_reproduces_extensive(net5, three_scenarios):
    cfg = FormulationConfig("preventive", 1)
    report, _ = solve_extensive(net5, three_scenarios, cfg, BNB)
    layout = first_stage_layout("preventive", net5)
    x = []
    for name in layout.names:
        if name.startswith("pg["):
            x.append(report.dispatch[name[3:-1]])
        else:
            x.append(1.0 if name.split("[")[1][:-1] in report.switched else 0.0)
    again = evaluate_first_stage(net5, three_scenarios, cfg, x, BNB)
    assert again.objective == pytest.approx(report.objective, abs=1e-6)


def test_as_corrective(net5, three_scenarios):
    prev, _ = solve_extensive(net5, three_scenarios, FormulationConfig("preventive", 1), BNB)
    seeded = as_corrective(prev)
    assert seeded.kind == "corrective"
    assert seeded.objective == prev.objective
    assert all(r.switched == prev.switched for r in seeded.scenarios)
    assert verify_physics(seeded, net5, three_scenarios) <= 1e-6
    with pytest.raises(ValueError):
        as_corrective(seeded)


def test_config_validation(net5, three_scenarios):
    with pytest.raises(ValueError):
        FormulationConfig("reactive")
    with pytest.raises(ValueError):
        FormulationConfig("preventive", -1)
    with pytest.raises(ValueError):
        build_corrective(net5, None, three_scenarios, FormulationConfig("preventive", 1))
    with pytest.raises(ValueError):
        build_preventive(net5, None, ScenarioSet(()), FormulationConfig("preventive", 1))


def test_cost_model_overrides(net5, three_scenarios):
    cost = CostModel.from_network(net5)
    cheap = CostModel(cost.gen, cost.ramp, tuple(0.0 for _ in cost.voll))
    report, _ = solve_extensive(net5, three_scenarios, FormulationConfig("preventive", 1), BNB, cheap)
    # with free load shedding only generation ever costs anything
    assert report.voll_cost == 0.0
