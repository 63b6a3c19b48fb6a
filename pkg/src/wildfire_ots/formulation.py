"""Model builders for deterministic, preventive and corrective topology control.

Variable naming (``k`` is a line key ``from-to-circuit``, ``s`` the scenario
position in its set):

* first stage: ``pg[bus]``, ``zon[k]`` (open an initially closed line),
  ``zoff[k]`` (close an initially open line);
* deterministic: ``z[k]`` (1 = closed), ``th[bus]``, ``p[k]``;
* per scenario: ``th[s][bus]``, ``rup[s][bus]``, ``rdn[s][bus]``,
  ``shed[s][bus]``, ``p[s][k]`` and, for corrective control,
  ``zon[s][k]`` / ``zoff[s][k]``.

A line carries flow in scenario ``s`` only when it is in service there
(``xi = 1``) and its post-switching status is closed.  Otherwise its flow is
pinned to zero and the angle coupling is relaxed by the big-M.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .milp import Model, Solution, SolverConfig, solve
from .network import Line, Network, big_m_theta, scale_loads
from .scenarios import OutageScenario, ScenarioSet

KINDS = ("deterministic", "preventive", "corrective")


class ScenarioInfeasible(RuntimeError):
    def __init__(self, scenario_id, status):
        self.scenario_id = scenario_id
        super().__init__(
            f"scenario {scenario_id} has no feasible recourse ({status}); "
            "check minimum generation limits on islanded buses"
        )


@dataclass(frozen=True)
class FormulationConfig:
    kind: str = "preventive"
    budget: int = 5
    big_m: float | None = None
    load_scaling: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.budget < 0:
            raise ValueError("switching budget must be nonnegative")


@dataclass(frozen=True)
class CostModel:
    gen: tuple[float, ...]
    ramp: tuple[float, ...]
    voll: tuple[float, ...]

    @classmethod
    def from_network(cls, net: Network) -> "CostModel":
        return cls(
            tuple(b.c for b in net.buses),
            tuple(b.c_r for b in net.buses),
            tuple(b.c_voll for b in net.buses),
        )


def lkey(line: Line) -> str:
    return f"{line.from_bus}-{line.to_bus}-{line.circuit}"


def parse_lkey(text: str) -> tuple[int, int, int]:
    f, t, c = text.split("-")
    return int(f), int(t), int(c)


def _prepare(net, cost, cfg):
    if cfg.load_scaling != 1.0:
        net = scale_loads(net, cfg.load_scaling)
    cost = cost or CostModel.from_network(net)
    big_m = cfg.big_m if cfg.big_m is not None else big_m_theta(net)
    return net, cost, big_m


def _line_rows(model, net, k, p, thi, thj, big_m, act0, act1=0.0, z=None, tag=""):
    """Thermal and big-M flow rows for activity ``act0 + act1 * z``."""
    line = net.lines[k]
    t, b = line.t, line.b
    mb = abs(b) * big_m
    if z is None or act1 == 0.0:
        model.lb[p] = -t * act0
        model.ub[p] = t * act0
        zc = {}
    else:
        model.lb[p], model.ub[p] = -t, t
        model.add_constr({p: 1.0, z: -t * act1}, "<=", t * act0, f"thu{tag}")
        model.add_constr({p: 1.0, z: t * act1}, ">=", -t * act0, f"thl{tag}")
        zc = {z: mb * act1}
    flow = {p: 1.0, thi: b, thj: -b}
    model.add_constr({**flow, **{j: -v for j, v in zc.items()}}, ">=", -mb * (1 - act0), f"pfl{tag}")
    model.add_constr({**flow, **zc}, "<=", mb * (1 - act0), f"pfu{tag}")


def _add_first_stage(model, net, cost, kind, budget):
    pg = {}
    for i in net.gen_indices:
        bus = net.buses[i]
        pg[i] = model.add_var(f"pg[{bus.id}]", bus.p_gl, bus.p_gu)
        model.add_obj(pg[i], cost.gen[i])
    zon, zoff = {}, {}
    if kind == "preventive":
        for k in net.on_lines:
            zon[k] = model.add_var(f"zon[{lkey(net.lines[k])}]", binary=True)
        for k in net.off_lines:
            zoff[k] = model.add_var(f"zoff[{lkey(net.lines[k])}]", binary=True)
        model.add_constr({**{v: 1.0 for v in zon.values()}, **{v: 1.0 for v in zoff.values()}}, "<=", budget, "budget")
    return pg, zon, zoff


def _add_scenario(model, net, cost, s, scenario, prob, pg, zon, zoff, big_m, kind, budget):
    xi = scenario.xi(net)
    th = {}
    for i, bus in enumerate(net.buses):
        lo, hi = (0.0, 0.0) if bus.is_reference else (-math.inf, math.inf)
        th[i] = model.add_var(f"th[s{s}][{bus.id}]", lo, hi)
    balance = {i: {} for i in range(len(net.buses))}
    for i in net.gen_indices:
        bus = net.buses[i]
        up = model.add_var(f"rup[s{s}][{bus.id}]", 0.0, bus.p_gu - bus.p_gl)
        dn = model.add_var(f"rdn[s{s}][{bus.id}]", 0.0, bus.p_gu - bus.p_gl)
        model.add_obj(up, prob * (cost.ramp[i] + cost.gen[i]))
        model.add_obj(dn, prob * cost.ramp[i])
        model.add_constr({pg[i]: 1.0, up: 1.0, dn: -1.0}, ">=", bus.p_gl, f"genl[s{s}][{bus.id}]")
        model.add_constr({pg[i]: 1.0, up: 1.0, dn: -1.0}, "<=", bus.p_gu, f"genu[s{s}][{bus.id}]")
        balance[i].update({pg[i]: 1.0, up: 1.0, dn: -1.0})
    for i, bus in enumerate(net.buses):
        if bus.pd > 0:
            ls = model.add_var(f"shed[s{s}][{bus.id}]", 0.0, bus.pd)
            model.add_obj(ls, prob * cost.voll[i])
            balance[i][ls] = 1.0

    if kind == "corrective":
        zon = {k: model.add_var(f"zon[s{s}][{lkey(net.lines[k])}]", binary=True) for k in net.on_lines}
        zoff = {k: model.add_var(f"zoff[s{s}][{lkey(net.lines[k])}]", binary=True) for k in net.off_lines}
        model.add_constr({**{v: 1.0 for v in zon.values()}, **{v: 1.0 for v in zoff.values()}},
                         "<=", budget, f"budget[s{s}]")

    for k, line in enumerate(net.lines):
        i, j = net.endpoints(k)
        tag = f"[s{s}][{lkey(line)}]"
        p = model.add_var(f"p{tag}", -line.t, line.t)
        if xi[k] == 0:
            _line_rows(model, net, k, p, th[i], th[j], big_m, 0.0, tag=tag)
        elif line.initially_on:
            _line_rows(model, net, k, p, th[i], th[j], big_m, 1.0, -1.0, zon[k], tag=tag)
        else:
            _line_rows(model, net, k, p, th[i], th[j], big_m, 0.0, 1.0, zoff[k], tag=tag)
        balance[i][p] = balance[i].get(p, 0.0) - 1.0
        balance[j][p] = balance[j].get(p, 0.0) + 1.0
    for i, bus in enumerate(net.buses):
        model.add_constr(balance[i], "==", bus.pd, f"kcl[s{s}][{bus.id}]")


def _meta(model, kind, net, scenarios, cfg, cost):
    model.meta = {"kind": kind, "budget": cfg.budget, "load_scaling": cfg.load_scaling,
                  "probabilities": tuple(scenarios.probabilities) if scenarios else (1.0,), "cost": cost}


def build_deterministic(net: Network, cost: CostModel | None, cfg: FormulationConfig) -> Model:
    """Single-period DC topology control with a switching budget."""
    if cfg.kind != "deterministic":
        raise ValueError("build_deterministic needs kind='deterministic'")
    net, cost, big_m = _prepare(net, cost, cfg)
    model = Model("deterministic")
    pg, _, _ = _add_first_stage(model, net, cost, "deterministic", cfg.budget)
    th = {}
    for i, bus in enumerate(net.buses):
        lo, hi = (0.0, 0.0) if bus.is_reference else (-math.inf, math.inf)
        th[i] = model.add_var(f"th[{bus.id}]", lo, hi)
    balance = {i: ({pg[i]: 1.0} if i in pg else {}) for i in range(len(net.buses))}
    budget_row, budget_rhs = {}, float(cfg.budget)
    for k, line in enumerate(net.lines):
        i, j = net.endpoints(k)
        z = model.add_var(f"z[{lkey(line)}]", binary=True)
        p = model.add_var(f"p[{lkey(line)}]", -line.t, line.t)
        _line_rows(model, net, k, p, th[i], th[j], big_m, 0.0, 1.0, z, tag=f"[{lkey(line)}]")
        if line.initially_on:
            budget_row[z] = -1.0
            budget_rhs -= 1.0
        else:
            budget_row[z] = 1.0
        balance[i][p] = -1.0
        balance[j][p] = balance[j].get(p, 0.0) + 1.0
    model.add_constr(budget_row, "<=", budget_rhs, "budget")
    for i, bus in enumerate(net.buses):
        model.add_constr(balance[i], "==", bus.pd, f"kcl[{bus.id}]")
    _meta(model, "deterministic", net, None, cfg, cost)
    return model


def _build_two_stage(kind, net, cost, scenarios, cfg):
    if cfg.kind != kind:
        raise ValueError(f"build_{kind} needs kind={kind!r}")
    if scenarios is None or len(scenarios) == 0:
        raise ValueError("no scenarios given; use build_deterministic for the no-outage case")
    scenarios.bind(net)
    net, cost, big_m = _prepare(net, cost, cfg)
    model = Model(kind)
    pg, zon, zoff = _add_first_stage(model, net, cost, kind, cfg.budget)
    for s, (sc, prob) in enumerate(zip(scenarios, scenarios.probabilities)):
        _add_scenario(model, net, cost, s, sc, prob, pg, zon, zoff, big_m, kind, cfg.budget)
    _meta(model, kind, net, scenarios, cfg, cost)
    return model


def build_preventive(net: Network, cost: CostModel | None, scenarios: ScenarioSet, cfg: FormulationConfig) -> Model:
    """Extensive form with dispatch and switching fixed before the outage is revealed."""
    return _build_two_stage("preventive", net, cost, scenarios, cfg)


def build_corrective(net: Network, cost: CostModel | None, scenarios: ScenarioSet, cfg: FormulationConfig) -> Model:
    """Extensive form with dispatch first and per-scenario switching as recourse."""
    return _build_two_stage("corrective", net, cost, scenarios, cfg)


def build_extensive(net, cost, scenarios, cfg) -> Model:
    if cfg.kind == "deterministic":
        return build_deterministic(net, cost, cfg)
    return _build_two_stage(cfg.kind, net, cost, scenarios, cfg)


# ---------------------------------------------------------------------------
# first-stage layout shared with progressive hedging


@dataclass(frozen=True)
class FirstStageLayout:
    names: tuple[str, ...]
    lb: np.ndarray
    ub: np.ndarray
    binary: np.ndarray
    cost: np.ndarray


def first_stage_layout(kind: str, net: Network, cost: CostModel | None = None) -> FirstStageLayout:
    cost = cost or CostModel.from_network(net)
    names, lb, ub, binary, c = [], [], [], [], []
    for i in net.gen_indices:
        bus = net.buses[i]
        names.append(f"pg[{bus.id}]")
        lb.append(bus.p_gl)
        ub.append(bus.p_gu)
        binary.append(False)
        c.append(cost.gen[i])
    if kind == "preventive":
        for prefix, idx in (("zon", net.on_lines), ("zoff", net.off_lines)):
            for k in idx:
                names.append(f"{prefix}[{lkey(net.lines[k])}]")
                lb.append(0.0)
                ub.append(1.0)
                binary.append(True)
                c.append(0.0)
    return FirstStageLayout(tuple(names), np.array(lb), np.array(ub), np.array(binary, dtype=bool), np.array(c))


def build_scenario_model(kind, net, cost, scenarios: ScenarioSet, s: int, cfg: FormulationConfig) -> Model:
    """First stage plus the recourse of scenario ``s`` alone, weighted as if certain."""
    one = ScenarioSet((scenarios[s],))
    net2, cost2, big_m = _prepare(net, cost, cfg)
    model = Model(f"{kind}-s{s}")
    pg, zon, zoff = _add_first_stage(model, net2, cost2, kind, cfg.budget)
    _add_scenario(model, net2, cost2, s, scenarios[s], 1.0, pg, zon, zoff, big_m, kind, cfg.budget)
    _meta(model, kind, net2, one, cfg, cost2)
    return model


def build_ph_subproblem(kind, net, cost, scenarios, s, cfg, anchor=None, multipliers=None, penalty=None) -> Model:
    """Scenario model with the augmented-Lagrangian terms
    ``rho . (x - anchor) + sum_j penalty_j / 2 * (x_j - anchor_j)^2``.

    ``anchor``, ``multipliers`` and ``penalty`` follow :func:`first_stage_layout`
    order.  Squared binary deviations are expanded exactly with ``z^2 = z``.
    """
    model = build_scenario_model(kind, net, cost, scenarios, s, cfg)
    layout = first_stage_layout(kind, scale_loads(net, cfg.load_scaling) if cfg.load_scaling != 1 else net, cost)
    n = len(layout.names)
    anchor = np.zeros(n) if anchor is None else np.asarray(anchor, dtype=float)
    rho = np.zeros(n) if multipliers is None else np.asarray(multipliers, dtype=float)
    pen = np.zeros(n) if penalty is None else np.broadcast_to(np.asarray(penalty, dtype=float), (n,))
    for vec, what in ((anchor, "anchor"), (rho, "multipliers"), (pen, "penalty")):
        if vec.shape != (n,):
            raise ValueError(f"{what} has shape {vec.shape}, first stage has {n} entries")
    for j, name in enumerate(layout.names):
        v = model.var(name)
        if rho[j]:
            model.add_obj(v, rho[j])
            model.obj_const -= rho[j] * anchor[j]
        if pen[j] > 0:
            if layout.binary[j]:
                model.add_obj(v, 0.5 * pen[j] * (1 - 2 * anchor[j]))
                model.obj_const += 0.5 * pen[j] * anchor[j] ** 2
            else:
                model.add_quad(v, 0.5 * pen[j], anchor[j])
    return model


def fix_first_stage(model: Model, layout: FirstStageLayout, x) -> Model:
    fixed = model.copy()
    for name, value in zip(layout.names, x):
        j = fixed.var(name)
        fixed.lb[j] = fixed.ub[j] = float(value)
    return fixed


# ---------------------------------------------------------------------------
# reports


@dataclass
class ScenarioResult:
    id: int
    prob: float
    out_lines: list[str]
    switched: list[str]
    theta: dict[str, float]
    flows: dict[str, float]
    ramp_up: dict[str, float]
    ramp_down: dict[str, float]
    shed: dict[str, float]
    shed_mw: float
    cost: float


@dataclass
class SolutionReport:
    kind: str
    objective: float
    generation_cost: float
    ramp_cost: float
    voll_cost: float
    dispatch: dict[str, float]
    switched: list[str]
    scenarios: list[ScenarioResult]
    budget: int
    load_scaling: float
    base_mva: float
    max_residual: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def expected_shed_mw(self) -> float:
        return float(sum(sc.prob * sc.shed_mw for sc in self.scenarios))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SolutionReport":
        payload = json.loads(text)
        payload["scenarios"] = [ScenarioResult(**sc) for sc in payload["scenarios"]]
        return cls(**payload)


def report_from_values(values: dict[str, float], net: Network, scenarios: ScenarioSet | None, kind: str,
                       cost: CostModel | None = None, budget: int = 0, load_scaling: float = 1.0) -> SolutionReport:
    """Assemble a report from named variable values; costs are recomputed here."""
    if load_scaling != 1.0:
        net = scale_loads(net, load_scaling)
    cost = cost or CostModel.from_network(net)
    get = values.get
    dispatch = {str(net.buses[i].id): float(values[f"pg[{net.buses[i].id}]"]) for i in net.gen_indices}
    gen_cost = sum(cost.gen[i] * dispatch[str(net.buses[i].id)] for i in net.gen_indices)
    switched = []
    results = []
    if kind == "deterministic":
        for line in net.lines:
            closed = round(values[f"z[{lkey(line)}]"]) == 1
            if closed != line.initially_on:
                switched.append(lkey(line))
        results.append(ScenarioResult(
            0, 1.0, [], [],
            {str(b.id): float(values[f"th[{b.id}]"]) for b in net.buses},
            {lkey(l): float(values[f"p[{lkey(l)}]"]) for l in net.lines},
            {}, {}, {}, 0.0, 0.0,
        ))
        ramp_total = voll_total = 0.0
    else:
        if kind == "preventive":
            for line in net.lines:
                name = f"{'zon' if line.initially_on else 'zoff'}[{lkey(line)}]"
                if round(values[name]) == 1:
                    switched.append(lkey(line))
        ramp_total = voll_total = 0.0
        for s, (sc, prob) in enumerate(zip(scenarios, scenarios.probabilities)):
            sw = []
            if kind == "corrective":
                for line in net.lines:
                    name = f"{'zon' if line.initially_on else 'zoff'}[s{s}][{lkey(line)}]"
                    if round(values[name]) == 1:
                        sw.append(lkey(line))
            up = {str(net.buses[i].id): float(values[f"rup[s{s}][{net.buses[i].id}]"]) for i in net.gen_indices}
            dn = {str(net.buses[i].id): float(values[f"rdn[s{s}][{net.buses[i].id}]"]) for i in net.gen_indices}
            shed = {str(b.id): float(get(f"shed[s{s}][{b.id}]", 0.0)) for b in net.buses if b.pd > 0}
            ramp = sum((cost.ramp[i] + cost.gen[i]) * up[str(net.buses[i].id)] + cost.ramp[i] * dn[str(net.buses[i].id)]
                       for i in net.gen_indices)
            voll = sum(cost.voll[i] * shed.get(str(b.id), 0.0) for i, b in enumerate(net.buses))
            ramp_total += prob * ramp
            voll_total += prob * voll
            results.append(ScenarioResult(
                sc.id, prob, ["%d-%d-%d" % key for key in sorted(sc.out_lines)], sw,
                {str(b.id): float(values[f"th[s{s}][{b.id}]"]) for b in net.buses},
                {lkey(l): float(values[f"p[s{s}][{lkey(l)}]"]) for l in net.lines},
                up, dn, shed, sum(shed.values()) * net.base_mva, ramp + voll,
            ))
    return SolutionReport(
        kind, gen_cost + ramp_total + voll_total, gen_cost, ramp_total, voll_total,
        dispatch, switched, results, budget, load_scaling, net.base_mva,
    )


def extract_report(model: Model, solution: Solution, net: Network, scenarios: ScenarioSet | None) -> SolutionReport:
    if not solution.optimal:
        raise ValueError(f"cannot report a {solution.status} solution")
    meta = model.meta
    report = report_from_values(solution.as_dict(), net, scenarios, meta["kind"], meta["cost"],
                                meta["budget"], meta["load_scaling"])
    report.extra["solver_objective"] = solution.objective
    report.extra["nodes"] = solution.nodes
    return report


def verify_physics(report: SolutionReport, net: Network, scenarios: ScenarioSet | None) -> float:
    """Largest physical residual of a report, recomputed from network data alone.

    Checks nodal balance, the DC flow law on live closed lines, zero flow on
    dead or open lines, thermal and generation limits, shed bounds, the
    reference angle and the switching budget.
    """
    if report.load_scaling != 1.0:
        net = scale_loads(net, report.load_scaling)
    worst = 0.0
    budget_used = len(report.switched)
    switched_first = set(report.switched)
    if report.kind == "deterministic":
        cases = [(OutageScenario(0), report.scenarios[0])]
    else:
        if scenarios is None or len(scenarios) != len(report.scenarios):
            raise ValueError("report and scenario set disagree in length")
        cases = list(zip(scenarios, report.scenarios))
    worst = max(worst, budget_used - report.budget)
    for i in net.gen_indices:
        bus = net.buses[i]
        pg = report.dispatch[str(bus.id)]
        worst = max(worst, bus.p_gl - pg, pg - bus.p_gu)
    for sc, res in cases:
        if report.kind == "corrective":
            worst = max(worst, len(res.switched) - report.budget)
            flipped = set(res.switched)
        else:
            flipped = switched_first
        injection = {}
        for i, bus in enumerate(net.buses):
            bid = str(bus.id)
            up = res.ramp_up.get(bid, 0.0)
            dn = res.ramp_down.get(bid, 0.0)
            shed = res.shed.get(bid, 0.0)
            worst = max(worst, -up, -dn, -shed, shed - bus.pd)
            gen = report.dispatch.get(bid, 0.0) + up - dn
            if bus.has_generation:
                worst = max(worst, bus.p_gl - gen, gen - bus.p_gu)
            else:
                worst = max(worst, abs(gen))
            injection[bus.id] = gen - bus.pd + shed
            if bus.is_reference:
                worst = max(worst, abs(res.theta[bid]))
        for line in net.lines:
            key = lkey(line)
            p = res.flows[key]
            closed = line.initially_on != (key in flipped)
            live = line.key not in sc.out_lines
            if closed and live:
                dtheta = res.theta[str(line.from_bus)] - res.theta[str(line.to_bus)]
                worst = max(worst, abs(p + line.b * dtheta), abs(p) - line.t)
            else:
                worst = max(worst, abs(p))
            injection[line.from_bus] -= p
            injection[line.to_bus] += p
        worst = max(worst, max(abs(v) for v in injection.values()))
    report.max_residual = float(worst)
    return float(worst)


def solve_extensive(net: Network, scenarios: ScenarioSet | None, cfg: FormulationConfig,
                    solver: SolverConfig | None = None, cost: CostModel | None = None) -> tuple[SolutionReport, Solution]:
    model = build_extensive(net, cost, scenarios, cfg)
    sol = solve(model, solver)
    if not sol.optimal:
        raise RuntimeError(f"{cfg.kind} extensive form: solver returned {sol.status}")
    report = extract_report(model, sol, net, scenarios)
    verify_physics(report, net, scenarios)
    return report, sol


def evaluate_first_stage(net: Network, scenarios: ScenarioSet, cfg: FormulationConfig, x,
                         solver: SolverConfig | None = None, cost: CostModel | None = None,
                         executor=None) -> SolutionReport:
    """Fix the first stage at ``x`` (layout order) and solve every scenario's recourse."""
    scaled = scale_loads(net, cfg.load_scaling) if cfg.load_scaling != 1 else net
    layout = first_stage_layout(cfg.kind, scaled, cost)
    tasks = [(cfg.kind, net, cost, scenarios, s, cfg, layout, np.asarray(x, dtype=float), solver)
             for s in range(len(scenarios))]
    results = list(executor.map(_recourse_task, tasks)) if executor else [_recourse_task(t) for t in tasks]
    values = dict(zip(layout.names, map(float, x)))
    for s, (status, vals) in enumerate(results):
        if status != "optimal":
            raise ScenarioInfeasible(scenarios[s].id, status)
        values.update(vals)
    return report_from_values(values, net, scenarios, cfg.kind, cost, cfg.budget, cfg.load_scaling)


def _recourse_task(args):
    kind, net, cost, scenarios, s, cfg, layout, x, solver = args
    model = fix_first_stage(build_scenario_model(kind, net, cost, scenarios, s, cfg), layout, x)
    sol = solve(model, solver)
    if not sol.optimal:
        return sol.status, {}
    return sol.status, sol.as_dict()


def as_corrective(report: SolutionReport) -> SolutionReport:
    """Restate a preventive solution as a corrective one.

    Repeating the first-stage switching in every scenario is always feasible
    for corrective control, so the result is a valid incumbent with the same
    objective.
    """
    if report.kind != "preventive":
        raise ValueError(f"expected a preventive report, got {report.kind!r}")
    scenarios = []
    for sc in report.scenarios:
        moved = ScenarioResult(**{**asdict(sc), "switched": list(report.switched)})
        scenarios.append(moved)
    extra = {**report.extra, "incumbent": "preventive"}
    return SolutionReport("corrective", report.objective, report.generation_cost, report.ramp_cost,
                          report.voll_cost, dict(report.dispatch), [], scenarios, report.budget,
                          report.load_scaling, report.base_mva, report.max_residual, extra)
