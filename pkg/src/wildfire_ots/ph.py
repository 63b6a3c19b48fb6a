"""Progressive Hedging over the scenario subproblems of a two-stage model.

Each iteration solves every scenario's augmented-Lagrangian subproblem
against the current consensus point, averages the first-stage iterates,
moves the multipliers and checks the primal/dual gaps.  A final pass rounds
the consensus to an implementable first stage and re-solves all recourse
problems so the reported objective is a true evaluation.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .formulation import (
    CostModel, FirstStageLayout, FormulationConfig, ScenarioInfeasible, SolutionReport,
    build_ph_subproblem, evaluate_first_stage, first_stage_layout,
)
from .milp import SolverConfig, solve
from .network import Network, scale_loads
from .scenarios import ScenarioSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhConfig:
    primal_tol: float = 1e-3
    dual_tol: float = 1e-2
    max_iterations: int = 200
    alpha: float = 1.0
    gamma: float = 1.1
    stall: float = 0.01
    min_penalty: float = 1e-3
    adaptive: bool = True
    fixed_penalty: float | None = None
    mode: str = "serial"
    workers: int | None = None
    record_iterates: bool = False

    def __post_init__(self):
        if not (self.primal_tol > 0 and self.dual_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.gamma < 1:
            raise ValueError("penalty growth factor must be at least 1")
        if self.mode not in ("serial", "parallel"):
            raise ValueError("mode is 'serial' or 'parallel'")


@dataclass
class PhState:
    k: int
    x: np.ndarray  # scenarios x first-stage entries
    xbar: np.ndarray
    rho: np.ndarray
    r: np.ndarray
    probs: np.ndarray
    xbar_prev: np.ndarray | None = None
    primal_gaps: list[float] = field(default_factory=list)
    dual_gaps: list[float] = field(default_factory=list)


@dataclass
class PhResult:
    first_stage: np.ndarray
    consensus: np.ndarray
    report: SolutionReport
    objective: float
    iterations: int
    terminated_by: str
    trace: list[dict]
    layout: FirstStageLayout
    iterates: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)
    seconds: float = 0.0


def initial_penalty(layout: FirstStageLayout, cfg: PhConfig) -> np.ndarray:
    """Cost-proportional per-entry penalty ``alpha |c_j| / (ub_j - lb_j + 1)``."""
    if cfg.fixed_penalty is not None:
        return np.full(len(layout.names), float(cfg.fixed_penalty))
    r = cfg.alpha * np.abs(layout.cost) / (layout.ub - layout.lb + 1.0)
    return np.maximum(r, cfg.min_penalty)


def aggregate(state: PhState) -> np.ndarray:
    xbar = np.zeros(state.x.shape[1])
    for s in range(state.x.shape[0]):
        xbar = xbar + state.probs[s] * state.x[s]
    return xbar


def update_multipliers(state: PhState) -> np.ndarray:
    return state.rho + state.r * (state.x - state.xbar)


def gaps(state: PhState) -> tuple[float, float]:
    primal = float(np.sum((state.xbar - state.xbar_prev) ** 2)) if state.xbar_prev is not None else np.inf
    dev = state.x - state.xbar
    dual = 0.0
    for s in range(dev.shape[0]):
        dual += state.probs[s] * float(dev[s] @ dev[s])
    return primal, dual


def check_termination(state: PhState, cfg: PhConfig) -> bool:
    if state.k < 1 or not state.primal_gaps:
        return False
    return state.primal_gaps[-1] <= cfg.primal_tol and state.dual_gaps[-1] <= cfg.dual_tol


def update_penalty(state: PhState, cfg: PhConfig) -> np.ndarray:
    """Grow the penalty by ``gamma`` when the primal gap stops shrinking."""
    if not cfg.adaptive or cfg.fixed_penalty is not None or len(state.primal_gaps) < 2:
        return state.r
    prev, cur = state.primal_gaps[-2], state.primal_gaps[-1]
    if cur >= (1.0 - cfg.stall) * prev:
        return state.r * cfg.gamma
    return state.r


def _subproblem_task(args):
    kind, net, cost, scenarios, s, fcfg, anchor, rho, pen, solver, names = args
    model = build_ph_subproblem(kind, net, cost, scenarios, s, fcfg, anchor, rho, pen)
    sol = solve(model, solver)
    if not sol.optimal:
        return s, sol.status, None
    return s, sol.status, np.array([sol.x[model.var(n)] for n in names])


class _Runner:
    def __init__(self, kind, net, cost, scenarios, fcfg, solver, layout, executor):
        self.args = (kind, net, cost, scenarios)
        self.fcfg, self.solver, self.layout, self.executor = fcfg, solver, layout, executor
        self.scenarios = scenarios

    def solve_all(self, anchor, rho, pen) -> np.ndarray:
        n = len(self.scenarios)
        tasks = [(*self.args, s, self.fcfg, anchor, None if rho is None else rho[s], pen, self.solver, self.layout.names)
                 for s in range(n)]
        mapper = self.executor.map if self.executor else map
        out = np.zeros((n, len(self.layout.names)))
        for s, status, x in mapper(_subproblem_task, tasks):
            if x is None:
                raise ScenarioInfeasible(self.scenarios[s].id, status)
            out[s] = x
        return out


def initialize(runner: _Runner, probs: np.ndarray, cfg: PhConfig) -> PhState:
    n = len(runner.layout.names)
    x0 = runner.solve_all(np.zeros(n), None, np.zeros(n))
    state = PhState(0, x0, np.zeros(n), np.zeros_like(x0), initial_penalty(runner.layout, cfg), probs)
    state.xbar = aggregate(state)
    state.rho = state.r * (state.x - state.xbar)
    return state


def round_consensus(layout: FirstStageLayout, xbar: np.ndarray, budget: int) -> np.ndarray:
    """Majority vote on binaries (a tie keeps the line as it is) within the budget."""
    x = np.clip(xbar.copy(), layout.lb, layout.ub)
    bins = np.flatnonzero(layout.binary)
    chosen = [j for j in bins if xbar[j] > 0.5]
    if len(chosen) > budget:
        chosen = sorted(chosen, key=lambda j: (-xbar[j], j))[:budget]
    x[bins] = 0.0
    x[chosen] = 1.0
    return x


def ph_solve(kind: str, net: Network, cost: CostModel | None, scenarios: ScenarioSet,
             fcfg: FormulationConfig, cfg: PhConfig | None = None,
             solver: SolverConfig | None = None) -> PhResult:
    if kind not in ("preventive", "corrective"):
        raise ValueError("progressive hedging applies to 'preventive' or 'corrective'")
    if fcfg.kind != kind:
        raise ValueError("formulation config kind does not match")
    if len(scenarios) == 0:
        raise ValueError("no scenarios")
    cfg = cfg or PhConfig()
    scenarios.bind(net)
    scaled = scale_loads(net, fcfg.load_scaling) if fcfg.load_scaling != 1 else net
    layout = first_stage_layout(kind, scaled, cost)
    probs = np.asarray(scenarios.probabilities, dtype=float)
    t0 = time.perf_counter()
    executor = ProcessPoolExecutor(cfg.workers) if cfg.mode == "parallel" else None
    try:
        runner = _Runner(kind, net, cost, scenarios, fcfg, solver, layout, executor)
        state = initialize(runner, probs, cfg)
        iterates = [(state.x.copy(), state.xbar.copy(), state.rho.copy())] if cfg.record_iterates else []
        trace = []
        terminated_by = "iteration-limit"
        while state.k < cfg.max_iterations:
            state.k += 1
            state.x = runner.solve_all(state.xbar, state.rho, state.r)
            state.xbar_prev, state.xbar = state.xbar, aggregate(state)
            state.rho = update_multipliers(state)
            primal, dual = gaps(state)
            state.primal_gaps.append(primal)
            state.dual_gaps.append(dual)
            trace.append({"iteration": state.k, "primal_gap": primal, "dual_gap": dual,
                          "penalty_mean": float(np.mean(state.r)), "seconds": time.perf_counter() - t0})
            if cfg.record_iterates:
                iterates.append((state.x.copy(), state.xbar.copy(), state.rho.copy()))
            log.debug("PH %s k=%d primal=%.3g dual=%.3g", kind, state.k, primal, dual)
            if check_termination(state, cfg):
                terminated_by = "tolerance"
                break
            state.r = update_penalty(state, cfg)
        x_final = round_consensus(layout, state.xbar, fcfg.budget)
        report = evaluate_first_stage(net, scenarios, fcfg, x_final, solver, cost, executor)
    finally:
        if executor:
            executor.shutdown()
    report.extra.update(method="ph", iterations=state.k, terminated_by=terminated_by)
    return PhResult(x_final, state.xbar, report, report.objective, state.k, terminated_by, trace, layout,
                    iterates, time.perf_counter() - t0)


TRACE_FIELDS = ("iteration", "primal_gap", "dual_gap", "penalty_mean", "seconds")


def trace_csv(result: PhResult) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRACE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in result.trace:
        writer.writerow({k: row[k] for k in TRACE_FIELDS})
    return buf.getvalue()
