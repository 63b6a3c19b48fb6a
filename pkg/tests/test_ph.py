import numpy as np
import pytest

from wildfire_ots.formulation import FirstStageLayout, FormulationConfig, solve_extensive, verify_physics
from wildfire_ots.ph import (
    PhConfig, PhState, aggregate, check_termination, gaps, initial_penalty, ph_solve, round_consensus, trace_csv,
    update_multipliers, update_penalty,
)
from wildfire_ots.scenarios import OutageScenario, ScenarioSet, generate

from conftest import BNB


def _state(x, probs, r=None, rho=None):
    x = np.asarray(x, dtype=float)
    n = x.shape[1]
    st = PhState(1, x, np.zeros(n), np.zeros_like(x) if rho is None else np.asarray(rho, float),
                 np.ones(n) if r is None else np.asarray(r, float), np.asarray(probs, float))
    st.xbar = aggregate(st)
    return st


def test_aggregate_examples():
    assert aggregate(_state([[2.0, 3.0], [2.0, 3.0]], [0.5, 0.5])).tolist() == [2.0, 3.0]
    assert aggregate(_state([[0.0], [1.0]], [0.5, 0.5])).tolist() == [0.5]
    assert aggregate(_state([[1.0], [0.0], [0.0]], [1 / 3] * 3))[0] == pytest.approx(1 / 3)


def test_multiplier_update_examples():
    st = _state([[1.0, 2.0], [1.0, 2.0]], [0.5, 0.5], rho=[[0.3, -1.0], [-0.3, 1.0]])
    assert np.array_equal(update_multipliers(st), st.rho)
    single = _state([[4.0, 5.0]], [1.0])
    assert np.array_equal(update_multipliers(single), np.zeros((1, 2)))


def test_weighted_multiplier_sum_is_preserved():
    rng = np.random.default_rng(5)
    probs = rng.dirichlet(np.ones(4))
    x = rng.normal(size=(4, 3))
    rho = rng.normal(size=(4, 3))
    rho -= probs @ rho  # start from a zero weighted sum
    st = _state(x, probs, r=rng.uniform(0.1, 5, 3), rho=rho)
    after = update_multipliers(st)
    assert np.allclose(probs @ after, probs @ rho, atol=1e-12)


def test_penalty_update():
    cfg = PhConfig(gamma=1.1, stall=0.01)
    st = _state([[0.0]], [1.0], r=[2.0])
    st.primal_gaps = [1.0, 0.5]
    assert update_penalty(st, cfg).tolist() == [2.0]
    st.primal_gaps = [1.0, 0.995]
    st.r = update_penalty(st, cfg)
    st.primal_gaps.append(0.995)
    st.r = update_penalty(st, cfg)
    assert st.r[0] == pytest.approx(2.0 * 1.1 * 1.1)
    assert update_penalty(st, PhConfig(adaptive=False))[0] == st.r[0]


def test_initial_penalty_guards_zero_cost_binaries():
    layout = FirstStageLayout(("pg[1]", "zon[1-2-1]"), np.array([0.0, 0.0]), np.array([3.0, 1.0]),
                              np.array([False, True]), np.array([20.0, 0.0]))
    r = initial_penalty(layout, PhConfig())
    assert r[0] == pytest.approx(20.0 / 4.0)
    assert r[1] == 1e-3
    assert initial_penalty(layout, PhConfig(fixed_penalty=7.0)).tolist() == [7.0, 7.0]


def test_termination_rule():
    cfg = PhConfig()
    st = _state([[1.0], [1.0]], [0.5, 0.5])
    st.k = 0
    assert not check_termination(st, cfg)
    st.k = 2
    st.xbar_prev = st.xbar.copy()
    primal, dual = gaps(st)
    assert (primal, dual) == (0.0, 0.0)
    st.primal_gaps, st.dual_gaps = [primal], [dual]
    assert check_termination(st, cfg)
    st.primal_gaps, st.dual_gaps = [1e-4], [0.5]
    assert not check_termination(st, cfg)


def test_round_consensus():
    layout = FirstStageLayout(("pg[1]", "a", "b", "c"), np.array([0.0, 0, 0, 0]), np.array([2.0, 1, 1, 1]),
                              np.array([False, True, True, True]), np.zeros(4))
    x = round_consensus(layout, np.array([1.25, 0.9, 0.5, 0.7]), budget=5)
    assert x.tolist() == [1.25, 1.0, 0.0, 1.0]  # a tie at 0.5 keeps the line as it is
    x = round_consensus(layout, np.array([1.25, 0.9, 0.6, 0.7]), budget=2)
    assert x.tolist() == [1.25, 1.0, 0.0, 1.0]


@pytest.mark.parametrize("kind", ["preventive", "corrective"])
def test_single_scenario_terminates_at_first_iteration(net5, kind):
    sc = ScenarioSet.single({(4, 5, 1)})
    fcfg = FormulationConfig(kind, 1)
    res = ph_solve(kind, net5, None, sc, fcfg, PhConfig(), BNB)
    ext, _ = solve_extensive(net5, sc, fcfg, BNB)
    assert res.iterations == 1
    assert res.terminated_by == "tolerance"
    assert res.objective == pytest.approx(ext.objective, abs=1e-6)


def test_initialization_averages_two_scenarios(net5):
    sc = ScenarioSet((OutageScenario(0, frozenset({(4, 5, 1)})), OutageScenario(1, frozenset({(1, 5, 1)}))))
    res = ph_solve("corrective", net5, None, sc, FormulationConfig("corrective", 1),
                   PhConfig(max_iterations=1, record_iterates=True), BNB)
    x0, xbar0, rho0 = res.iterates[0]
    assert np.allclose(xbar0, 0.5 * (x0[0] + x0[1]))
    assert not np.allclose(x0[0], x0[1])


def test_identical_scenarios_have_zero_dual_gap(net5):
    out = frozenset({(2, 3, 1)})
    sc = ScenarioSet(tuple(OutageScenario(i, out) for i in range(3)))
    res = ph_solve("preventive", net5, None, sc, FormulationConfig("preventive", 1),
                   PhConfig(record_iterates=True), BNB)
    x0, xbar0, _ = res.iterates[0]
    assert all(np.array_equal(x0[s], x0[0]) for s in range(3))
    assert all(row["dual_gap"] == 0.0 for row in res.trace)
    assert res.iterations == 1


def test_weighted_multipliers_vanish_every_iteration(net5, risk5):
    sc = generate(risk5, 0.0, 5, 2, 1)
    res = ph_solve("preventive", net5, None, sc, FormulationConfig("preventive", 1),
                   PhConfig(record_iterates=True, max_iterations=30), BNB)
    probs = np.asarray(sc.probabilities)
    assert len(res.iterates) == res.iterations + 1
    for _, xbar, rho in res.iterates:
        assert np.abs(probs @ rho).max() <= 1e-9


def test_serial_and_parallel_iterates_are_identical(net5, risk5):
    sc = generate(risk5, 0.0, 4, 2, 3)
    fcfg = FormulationConfig("preventive", 1)
    serial = ph_solve("preventive", net5, None, sc, fcfg, PhConfig(record_iterates=True), BNB)
    parallel = ph_solve("preventive", net5, None, sc, fcfg, PhConfig(record_iterates=True, mode="parallel",
                                                                     workers=2), BNB)
    assert serial.iterations == parallel.iterations
    assert serial.objective == parallel.objective
    for a, b in zip(serial.iterates, parallel.iterates):
        for u, v in zip(a, b):
            assert np.array_equal(u, v)


@pytest.mark.parametrize("n", [2, 5])
def test_preventive_close_to_extensive(net5, risk5, n):
    sc = generate(risk5, 0.0, n, 2, 0)
    fcfg = FormulationConfig("preventive", 1)
    res = ph_solve("preventive", net5, None, sc, fcfg, PhConfig(), BNB)
    ext, _ = solve_extensive(net5, sc, fcfg, BNB)
    assert abs(res.objective - ext.objective) <= 0.005 * abs(ext.objective)
    assert res.objective >= ext.objective - 1e-6  # PH returns a feasible point


def test_corrective_reaches_tolerance_on_fixtures(net5, risk5, feeder, feeder_risk):
    for net, risk in ((net5, risk5), (feeder, feeder_risk)):
        sc = generate(risk, 0.0, 4, 4, 2)
        res = ph_solve("corrective", net, None, sc, FormulationConfig("corrective", 5), PhConfig(), BNB)
        assert res.terminated_by == "tolerance"
        assert verify_physics(res.report, net, sc) <= 1e-6


def test_iteration_counts_are_reported(net5, risk5):
    sc = generate(risk5, 0.0, 5, 2, 0)
    counts = {}
    for kind in ("preventive", "corrective"):
        counts[kind] = ph_solve(kind, net5, None, sc, FormulationConfig(kind, 1), PhConfig(), BNB).iterations
    # a reported statistic, not a requirement
    print(f"PH iterations on 5-bus |S|=5: {counts}")
    assert all(c >= 1 for c in counts.values())


def test_iteration_limit_returns_finalized_solution(net5, risk5):
    sc = generate(risk5, 0.0, 5, 2, 0)
    res = ph_solve("preventive", net5, None, sc, FormulationConfig("preventive", 1), PhConfig(max_iterations=2), BNB)
    assert res.iterations <= 2
    if res.iterations == 2:
        assert res.terminated_by == "iteration-limit"
    assert np.isfinite(res.objective)
    text = trace_csv(res)
    assert text.splitlines()[0] == "iteration,primal_gap,dual_gap,penalty_mean,seconds"
    assert len(text.splitlines()) == res.iterations + 1


def test_argument_checks(net5):
    sc = ScenarioSet.single()
    with pytest.raises(ValueError):
        ph_solve("deterministic", net5, None, sc, FormulationConfig("deterministic", 1))
    with pytest.raises(ValueError):
        ph_solve("preventive", net5, None, sc, FormulationConfig("corrective", 1))
    with pytest.raises(ValueError):
        PhConfig(mode="threads")
    with pytest.raises(ValueError):
        PhConfig(gamma=0.5)
