from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

LE, GE, EQ = "<=", ">=", "=="
_SENSES = {LE, GE, EQ, "<", ">", "="}
_CANON = {"<": LE, ">": GE, "=": EQ}

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"
NUMERICAL = "numerical-failure"


class Model:
    """Mixed-binary linear model with an optional separable convex quadratic term.

    The objective is ``const + sum c_j x_j + sum w_j (x_j - a_j)^2`` with
    ``w_j >= 0``.  Rows are sparse dicts ``{var index: coefficient}``.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.integer: list[bool] = []
        self.rows: list[dict[int, float]] = []
        self.senses: list[str] = []
        self.rhs: list[float] = []
        self.row_names: list[str] = []
        self.obj: dict[int, float] = {}
        self.quad: dict[int, tuple[float, float]] = {}
        self.obj_const = 0.0
        self._index: dict[str, int] = {}

    # -- construction -------------------------------------------------------

    def add_var(self, name: str, lb: float = 0.0, ub: float = math.inf, *, integer=False, binary=False) -> int:
        if name in self._index:
            raise ValueError(f"duplicate variable {name!r}")
        if binary:
            integer, lb, ub = True, max(lb, 0.0), min(ub, 1.0)
        if lb > ub:
            raise ValueError(f"variable {name!r}: lower bound {lb} above upper bound {ub}")
        k = len(self.names)
        self.names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.integer.append(bool(integer))
        self._index[name] = k
        return k

    def add_constr(self, coefs: dict[int, float], sense: str, rhs: float, name: str = "") -> int:
        if sense not in _SENSES:
            raise ValueError(f"unknown sense {sense!r}")
        n = len(self.names)
        row = {}
        for j, a in coefs.items():
            if not 0 <= j < n:
                raise IndexError(f"constraint {name!r} references undeclared variable {j}")
            if a != 0:
                row[j] = row.get(j, 0.0) + float(a)
        self.rows.append(row)
        self.senses.append(_CANON.get(sense, sense))
        self.rhs.append(float(rhs))
        self.row_names.append(name or f"c{len(self.rows) - 1}")
        return len(self.rows) - 1

    def add_obj(self, j: int, coef: float) -> None:
        self.obj[j] = self.obj.get(j, 0.0) + float(coef)

    def add_quad(self, j: int, weight: float, center: float = 0.0) -> None:
        """Add ``weight * (x_j - center)^2``; one quadratic term per variable."""
        if weight < 0:
            raise ValueError("quadratic weights must be nonnegative")
        if j in self.quad:
            raise ValueError(f"variable {self.names[j]!r} already has a quadratic term")
        if weight > 0:
            self.quad[j] = (float(weight), float(center))

    # -- queries ------------------------------------------------------------

    def var(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    @property
    def num_vars(self) -> int:
        return len(self.names)

    @property
    def num_constrs(self) -> int:
        return len(self.rows)

    @property
    def num_integer(self) -> int:
        return sum(self.integer)

    def matrix(self) -> csr_matrix:
        data, ri, ci = [], [], []
        for i, row in enumerate(self.rows):
            for j, a in row.items():
                ri.append(i)
                ci.append(j)
                data.append(a)
        return csr_matrix((data, (ri, ci)), shape=(len(self.rows), len(self.names)))

    def row_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        rhs = np.asarray(self.rhs, dtype=float)
        lo = np.where([s != LE for s in self.senses], rhs, -np.inf)
        hi = np.where([s != GE for s in self.senses], rhs, np.inf)
        return lo, hi

    def cost_vector(self) -> np.ndarray:
        c = np.zeros(len(self.names))
        for j, a in self.obj.items():
            c[j] = a
        return c

    def objective_value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        val = self.obj_const + float(self.cost_vector() @ x)
        for j, (w, a) in self.quad.items():
            val += w * (x[j] - a) ** 2
        return val

    def copy(self) -> "Model":
        return copy.deepcopy(self)


@dataclass
class Solution:
    status: str
    x: np.ndarray | None = None
    objective: float = math.nan
    bound: float = math.nan
    nodes: int = 0
    lp_iterations: int = 0
    seconds: float = 0.0
    names: list[str] = field(default_factory=list, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def value(self, name: str) -> float:
        return float(self.x[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.x)))


def lp_relaxation(model: Model) -> Model:
    relaxed = model.copy()
    relaxed.integer = [False] * relaxed.num_vars
    relaxed.name = f"{model.name}-relaxed" if model.name else "relaxed"
    return relaxed


def _as_vector(model: Model, values) -> np.ndarray:
    if isinstance(values, dict):
        missing = [n for n in model.names if n not in values]
        if missing:
            raise KeyError(f"no value for variables {missing[:5]}{'...' if len(missing) > 5 else ''}")
        return np.array([float(values[n]) for n in model.names])
    x = np.asarray(values, dtype=float)
    if x.shape != (model.num_vars,):
        raise KeyError(f"expected {model.num_vars} values, got shape {x.shape}")
    return x


def verify_solution(model: Model, values) -> float:
    """Largest signed violation over rows, bounds and integrality (<= 0 when feasible)."""
    x = _as_vector(model, values)
    worst = -math.inf
    if model.rows:
        ax = model.matrix() @ x
        rhs = np.asarray(model.rhs)
        for i, sense in enumerate(model.senses):
            if sense == LE:
                v = ax[i] - rhs[i]
            elif sense == GE:
                v = rhs[i] - ax[i]
            else:
                v = abs(ax[i] - rhs[i])
            worst = max(worst, v)
    if model.num_vars:
        lb, ub = np.asarray(model.lb), np.asarray(model.ub)
        with np.errstate(invalid="ignore"):
            worst = max(worst, float(np.max(np.where(np.isfinite(lb), lb - x, -np.inf))))
            worst = max(worst, float(np.max(np.where(np.isfinite(ub), x - ub, -np.inf))))
        mask = np.asarray(model.integer)
        if mask.any():
            worst = max(worst, float(np.max(np.abs(x[mask] - np.round(x[mask])))))
    return float(worst)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_lp(model: Model) -> str:
    """Render the model in CPLEX LP text format."""

    def safe(name: str) -> str:
        return "".join(ch if ch.isalnum() or ch in "_.[]" else "_" for ch in name)

    names = [safe(n) for n in model.names]

    def expr(row: dict[int, float]) -> str:
        if not row:
            return "0 " + (names[0] if names else "")
        parts = []
        for j, a in sorted(row.items()):
            parts.append(f"{'-' if a < 0 else '+'} {_fmt(abs(a))} {names[j]}")
        return " ".join(parts)

    lin = dict(model.obj)
    const = model.obj_const
    quad_terms = []
    for j, (w, a) in sorted(model.quad.items()):
        lin[j] = lin.get(j, 0.0) - 2 * w * a
        const += w * a * a
        quad_terms.append(f"{_fmt(2 * w)} {names[j]} ^ 2")
    out = [f"\\ {model.name}" if model.name else "\\ model", "Minimize", f" obj: {expr(lin)}"]
    if quad_terms:
        out[-1] += " + [ " + " + ".join(quad_terms) + " ] / 2"
    if const:
        out[-1] += f" {'-' if const < 0 else '+'} {_fmt(abs(const))}"
    out.append("Subject To")
    for i, row in enumerate(model.rows):
        sense = {LE: "<=", GE: ">=", EQ: "="}[model.senses[i]]
        out.append(f" {safe(model.row_names[i])}: {expr(row)} {sense} {_fmt(model.rhs[i])}")
    out.append("Bounds")
    for j, name in enumerate(names):
        lo, hi = model.lb[j], model.ub[j]
        lo_s = "-inf" if lo == -math.inf else _fmt(lo)
        hi_s = "+inf" if hi == math.inf else _fmt(hi)
        out.append(f" {lo_s} <= {name} <= {hi_s}")
    bins = [names[j] for j in range(model.num_vars) if model.integer[j] and model.lb[j] >= 0 and model.ub[j] <= 1]
    gens = [names[j] for j in range(model.num_vars) if model.integer[j] and names[j] not in set(bins)]
    if bins:
        out += ["Binaries", " " + " ".join(bins)]
    if gens:
        out += ["Generals", " " + " ".join(gens)]
    out.append("End")
    return "\n".join(out) + "\n"
