"""Solve paths for :class:`Model`.

``bnb`` is a plain best-bound branch-and-bound over HiGHS dual-simplex LP
relaxations.  ``highs`` hands the same linearized model to HiGHS' MIP
solver through :func:`scipy.optimize.milp`.
"""
from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, linprog, milp
from scipy.sparse import csr_matrix, vstack

from .model import INFEASIBLE, ITERATION_LIMIT, NUMERICAL, OPTIMAL, UNBOUNDED, Model, Solution

log = logging.getLogger(__name__)

BACKENDS = ("bnb", "highs")


@dataclass(frozen=True)
class SolverConfig:
    backend: str = "bnb"
    mip_gap: float = 1e-6
    abs_gap: float = 1e-9
    int_tol: float = 1e-6
    pwl_segments: int = 16
    node_limit: int = 200_000
    time_limit: float | None = None
    heuristic_every: int = 25


@dataclass
class _LP:
    c: np.ndarray
    const: float
    A: csr_matrix
    lo: np.ndarray
    hi: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integer: np.ndarray
    n_orig: int

    def __post_init__(self):
        le = np.isfinite(self.hi) & ~(self.lo == self.hi)
        ge = np.isfinite(self.lo) & ~(self.lo == self.hi)
        eq = self.lo == self.hi
        parts, rhs = [], []
        if le.any():
            parts.append(self.A[le])
            rhs.append(self.hi[le])
        if ge.any():
            parts.append(-self.A[ge])
            rhs.append(-self.lo[ge])
        self.A_ub = vstack(parts).tocsr() if parts else None
        self.b_ub = np.concatenate(rhs) if rhs else None
        self.A_eq = self.A[eq] if eq.any() else None
        self.b_eq = self.lo[eq] if eq.any() else None


def _pwl_breakpoints(lo, hi, center, weight, lin, segments):
    pts = set(np.linspace(lo, hi, segments + 1).tolist())
    pts.add(min(max(center, lo), hi))
    pts.add(min(max(center - lin / (2 * weight), lo), hi))
    return sorted(pts)


def linearize(model: Model, segments: int = 16) -> _LP:
    """Replace each quadratic term by an epigraph variable over secant cuts.

    Breakpoints are ``segments`` uniform intervals on the variable's bounds plus
    the term's center and the separable minimizer, so the approximation is
    exact there and overestimates in between.
    """
    n = model.num_vars
    A = model.matrix()
    lo, hi = model.row_bounds()
    c = model.cost_vector()
    const = model.obj_const
    lb = np.asarray(model.lb, dtype=float)
    ub = np.asarray(model.ub, dtype=float)
    integer = np.asarray(model.integer, dtype=bool)
    if not model.quad:
        return _LP(c, const, A, lo, hi, lb, ub, integer, n)

    extra_rows, extra_lo = [], []
    aux = 0
    for j, (w, a) in sorted(model.quad.items()):
        l, u = lb[j], ub[j]
        if not (np.isfinite(l) and np.isfinite(u)):
            raise ValueError(f"quadratic term on unbounded variable {model.names[j]!r}")
        if integer[j] and l >= 0 and u <= 1:
            # binary: w (z - a)^2 == w (1 - 2a) z + w a^2 exactly
            c[j] += w * (1 - 2 * a)
            const += w * a * a
            continue
        if u - l <= 0:
            const += w * (l - a) ** 2
            continue
        col = n + aux
        aux += 1
        pts = _pwl_breakpoints(l, u, a, w, c[j], segments)
        f = [w * (p - a) ** 2 for p in pts]
        for k in range(len(pts) - 1):
            slope = (f[k + 1] - f[k]) / (pts[k + 1] - pts[k])
            # t - slope * x >= f_k - slope * x_k
            extra_rows.append(((col, 1.0), (j, -slope)))
            extra_lo.append(f[k] - slope * pts[k])

    m = A.shape[0]
    if aux:
        ri, ci, data = [], [], []
        for i, entries in enumerate(extra_rows):
            for col, val in entries:
                ri.append(i)
                ci.append(col)
                data.append(val)
        B = csr_matrix((data, (ri, ci)), shape=(len(extra_rows), n + aux))
        A = csr_matrix((A.data, A.indices, A.indptr), shape=(m, n + aux))
        A = vstack([A, B]).tocsr()
        lo = np.concatenate([lo, extra_lo])
        hi = np.concatenate([hi, np.full(len(extra_rows), np.inf)])
        c = np.concatenate([c, np.ones(aux)])
        lb = np.concatenate([lb, np.zeros(aux)])
        ub = np.concatenate([ub, np.full(aux, np.inf)])
        integer = np.concatenate([integer, np.zeros(aux, dtype=bool)])
    return _LP(c, const, A, lo, hi, lb, ub, integer, n)


def _solve_lp(lp: _LP, lb, ub):
    res = linprog(
        lp.c, A_ub=lp.A_ub, b_ub=lp.b_ub, A_eq=lp.A_eq, b_eq=lp.b_eq,
        bounds=np.column_stack([lb, ub]), method="highs-ds",
    )
    return res


def _status_of(res) -> str:
    return {0: OPTIMAL, 1: ITERATION_LIMIT, 2: INFEASIBLE, 3: UNBOUNDED}.get(res.status, NUMERICAL)


def _polish(lp: _LP, x: np.ndarray):
    """Fix integers at their rounded values and re-solve the continuous part."""
    lb, ub = lp.lb.copy(), lp.ub.copy()
    r = np.round(x[lp.integer])
    lb[lp.integer] = r
    ub[lp.integer] = r
    res = _solve_lp(lp, lb, ub)
    if res.status != 0:
        return None, 0
    return res.x, res.nit


def _bnb(lp: _LP, cfg: SolverConfig, t0: float) -> Solution:
    nodes, iters = 0, 0
    root = _solve_lp(lp, lp.lb, lp.ub)
    nodes += 1
    iters += root.nit
    if root.status != 0:
        return Solution(_status_of(root), nodes=nodes, lp_iterations=iters)
    ints = np.flatnonzero(lp.integer)

    best_x, best_obj = None, math.inf

    def tol(obj):
        return max(cfg.abs_gap, cfg.mip_gap * abs(obj)) if math.isfinite(obj) else 0.0

    def fractional(x):
        if not len(ints):
            return None
        frac = np.abs(x[ints] - np.round(x[ints]))
        if frac.max() <= cfg.int_tol:
            return None
        # most fractional; argmin picks the lowest index on ties
        score = np.abs((x[ints] - np.floor(x[ints])) - 0.5)
        score[frac <= cfg.int_tol] = np.inf
        return int(ints[np.argmin(score)])

    def try_rounding(x):
        nonlocal best_x, best_obj, iters
        xr, nit = _polish(lp, x)
        iters += nit
        if xr is not None:
            obj = float(lp.c @ xr)
            if obj < best_obj:
                best_x, best_obj = xr, obj

    heap = []
    counter = 0
    if fractional(root.x) is None:
        best_x, best_obj = root.x, root.fun
    else:
        try_rounding(root.x)
        heap.append((root.fun, counter, lp.lb.copy(), lp.ub.copy(), root.x))
    global_bound = root.fun
    status = OPTIMAL
    while heap:
        bound, _, lb, ub, x = heapq.heappop(heap)
        global_bound = bound
        if bound >= best_obj - tol(best_obj):
            global_bound = min(best_obj, bound)
            heap.clear()
            break
        if nodes >= cfg.node_limit or (cfg.time_limit and time.perf_counter() - t0 > cfg.time_limit):
            status = ITERATION_LIMIT
            heapq.heappush(heap, (bound, counter, lb, ub, x))
            break
        j = fractional(x)
        v = x[j]
        for lo_j, hi_j in ((lb[j], math.floor(v)), (math.ceil(v), ub[j])):
            if lo_j > hi_j:
                continue
            clb, cub = lb.copy(), ub.copy()
            clb[j], cub[j] = lo_j, hi_j
            res = _solve_lp(lp, clb, cub)
            nodes += 1
            iters += res.nit
            if res.status == 2:
                continue
            if res.status != 0:
                return Solution(NUMERICAL, nodes=nodes, lp_iterations=iters)
            if res.fun >= best_obj - tol(best_obj):
                continue
            if fractional(res.x) is None:
                best_x, best_obj = res.x, res.fun
            else:
                counter += 1
                heapq.heappush(heap, (res.fun, counter, clb, cub, res.x))
        if cfg.heuristic_every and nodes % cfg.heuristic_every < 2 and heap:
            try_rounding(heap[0][4])
    if not heap and status == OPTIMAL:
        global_bound = best_obj if best_x is not None else global_bound
    else:
        global_bound = min([h[0] for h in heap], default=global_bound)
    if best_x is None:
        return Solution(INFEASIBLE if status == OPTIMAL else status, nodes=nodes, lp_iterations=iters)
    return Solution(status, best_x, best_obj, global_bound, nodes, iters)


def _highs(lp: _LP, cfg: SolverConfig) -> Solution:
    options = {"mip_rel_gap": cfg.mip_gap, "disp": False}
    if cfg.time_limit:
        options["time_limit"] = cfg.time_limit
    constraints = [LinearConstraint(lp.A, lp.lo, lp.hi)] if lp.A.shape[0] else []
    res = milp(lp.c, integrality=lp.integer.astype(int), bounds=Bounds(lp.lb, lp.ub),
               constraints=constraints, options=options)
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    if res.status == 0:
        return Solution(OPTIMAL, res.x, float(res.fun), float(getattr(res, "mip_dual_bound", res.fun) or res.fun), nodes)
    status = {1: ITERATION_LIMIT, 2: INFEASIBLE, 3: UNBOUNDED}.get(res.status, NUMERICAL)
    if status == ITERATION_LIMIT and res.x is not None:
        return Solution(status, res.x, float(res.fun), math.nan, nodes)
    return Solution(status, nodes=nodes)


def solve(model: Model, config: SolverConfig | None = None) -> Solution:
    """Solve ``model``; the returned objective is evaluated on the exact quadratic."""
    cfg = config or SolverConfig()
    t0 = time.perf_counter()
    lp = linearize(model, cfg.pwl_segments)
    if cfg.backend == "bnb":
        sol = _bnb(lp, cfg, t0)
    elif cfg.backend == "highs":
        sol = _highs(lp, cfg)
    else:
        raise ValueError(f"unknown backend {cfg.backend!r}; choose from {BACKENDS}")
    if sol.x is not None:
        if lp.integer.any():
            polished, nit = _polish(lp, sol.x)
            if polished is not None:
                sol.x = polished
                sol.lp_iterations += nit
        x = sol.x[: lp.n_orig].copy()
        x[lp.integer[: lp.n_orig]] = np.round(x[lp.integer[: lp.n_orig]])
        sol.x = x
        sol.objective = model.objective_value(x)
        sol.bound = sol.bound + lp.const
    sol.names = list(model.names)
    sol.seconds = time.perf_counter() - t0
    log.debug("%s: %s obj=%.6g nodes=%d %.3fs", model.name, sol.status, sol.objective, sol.nodes, sol.seconds)
    return sol
