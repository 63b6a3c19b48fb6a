"""Grid data model, MATPOWER-subset parsing and per-unit bookkeeping.

All electrical quantities are per-unit on ``Network.base_mva``.  Costs are
expressed per p.u. of power, i.e. a MATPOWER ``$/MWh`` coefficient times the
base.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

LineKey = tuple[int, int, int]


class CaseParseError(ValueError):
    """Malformed case text; ``lineno`` points at the offending line (1-based)."""

    def __init__(self, msg: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            msg = f"line {lineno}: {msg}"
        super().__init__(msg)


class NetworkValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    pd: float = 0.0
    p_gl: float = 0.0
    p_gu: float = 0.0
    c: float = 0.0
    c_r: float = 0.0
    c_voll: float = 0.0
    is_reference: bool = False

    @property
    def has_generation(self) -> bool:
        return self.p_gu > 0.0 or self.p_gl != 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    circuit: int
    b: float
    t: float
    angle_limit: float
    g: float = 0.0
    initially_on: bool = True

    @property
    def key(self) -> LineKey:
        return (self.from_bus, self.to_bus, self.circuit)


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float = 100.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        validate(self)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {bus.id: k for k, bus in enumerate(self.buses)}

    @cached_property
    def line_index(self) -> dict[LineKey, int]:
        return {line.key: k for k, line in enumerate(self.lines)}

    @property
    def ref_index(self) -> int:
        return next(k for k, bus in enumerate(self.buses) if bus.is_reference)

    @property
    def gen_indices(self) -> list[int]:
        return [k for k, bus in enumerate(self.buses) if bus.has_generation]

    @property
    def on_lines(self) -> list[int]:
        return [k for k, line in enumerate(self.lines) if line.initially_on]

    @property
    def off_lines(self) -> list[int]:
        return [k for k, line in enumerate(self.lines) if not line.initially_on]

    @property
    def total_demand(self) -> float:
        return sum(bus.pd for bus in self.buses)

    def endpoints(self, k: int) -> tuple[int, int]:
        line = self.lines[k]
        return self.bus_index[line.from_bus], self.bus_index[line.to_bus]


def validate(net: Network) -> None:
    ids = [bus.id for bus in net.buses]
    if len(set(ids)) != len(ids):
        raise NetworkValidationError("duplicate bus ids")
    refs = [bus.id for bus in net.buses if bus.is_reference]
    if len(refs) != 1:
        raise NetworkValidationError(f"expected exactly one reference bus, found {len(refs)}")
    for bus in net.buses:
        if bus.p_gl > bus.p_gu:
            raise NetworkValidationError(f"bus {bus.id}: p_gl > p_gu")
        if bus.pd < 0:
            raise NetworkValidationError(f"bus {bus.id}: negative demand")
    known = set(ids)
    keys = set()
    for line in net.lines:
        for end in (line.from_bus, line.to_bus):
            if end not in known:
                raise NetworkValidationError(f"line {line.key} references unknown bus {end}")
        if line.key in keys:
            raise NetworkValidationError(f"duplicate line key {line.key}")
        keys.add(line.key)
        if not line.t > 0 or not line.angle_limit > 0 or line.b == 0:
            raise NetworkValidationError(f"line {line.key}: need t > 0, angle_limit > 0, b != 0")
    if net.lines and not is_connected(net):
        log.warning("network %r is not connected on its initially-on lines", net.name)


def is_connected(net: Network) -> bool:
    on = [k for k, line in enumerate(net.lines) if line.initially_on]
    n = len(net.buses)
    if n <= 1:
        return True
    rows = [net.bus_index[net.lines[k].from_bus] for k in on]
    cols = [net.bus_index[net.lines[k].to_bus] for k in on]
    adj = coo_matrix((np.ones(len(on)), (rows, cols)), shape=(n, n))
    ncomp, _ = connected_components(adj, directed=False)
    return ncomp == 1


# ---------------------------------------------------------------------------
# MATPOWER subset

_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[")
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _read_tables(text: str) -> tuple[float | None, dict[str, list[tuple[int, list[float]]]]]:
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    base = None
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is None:
            m = _SCALAR_RE.search(line)
            if m:
                try:
                    base = float(m.group(1))
                except ValueError:
                    raise CaseParseError("bad baseMVA", lineno) from None
                continue
            m = _MATRIX_RE.search(line)
            if not m:
                continue
            current = m.group(1)
            tables[current] = []
            line = line[m.end():]
        closed = "]" in line
        if closed:
            line = line[: line.index("]")]
        for chunk in line.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                tables[current].append((lineno, [float(tok) for tok in tokens]))
            except ValueError:
                raise CaseParseError(f"non-numeric entry in mpc.{current}", lineno) from None
        if closed:
            current = None
    if current is not None:
        raise CaseParseError(f"unterminated matrix mpc.{current}", len(text.splitlines()))
    return base, tables


def _need(rows, table, ncols):
    for lineno, row in rows:
        if len(row) < ncols:
            raise CaseParseError(f"mpc.{table} row has {len(row)} columns, need {ncols}", lineno)


def _linear_cost(lineno: int, row: list[float]) -> float:
    model, n = int(row[0]), int(row[3])
    coeffs = row[4:]
    if model == 2:
        if len(coeffs) < n:
            raise CaseParseError("gencost row shorter than its declared order", lineno)
        return coeffs[n - 2] if n >= 2 else 0.0
    if model == 1:
        if len(coeffs) < 2 * n or n < 2:
            raise CaseParseError("piecewise gencost row malformed", lineno)
        p0, f0, p1, f1 = coeffs[0], coeffs[1], coeffs[2 * n - 2], coeffs[2 * n - 1]
        return (f1 - f0) / (p1 - p0) if p1 != p0 else 0.0
    raise CaseParseError(f"unsupported gencost model {model}", lineno)


def parse_case(text: str, *, clamp_min_generation: bool = False, name: str = "") -> Network:
    """Parse MATPOWER case text into a per-unit :class:`Network`.

    Only the columns the DC formulations need are read.  Generators sharing a
    bus are merged into one injection whose linear cost is the
    capacity-weighted mean of the members.  Out-of-service branches become
    initially-open lines.
    """
    if not text or not text.strip():
        raise CaseParseError("empty case text")
    base, tables = _read_tables(text)
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseParseError(f"missing mpc.{required} table")
    base = base or 100.0
    bus_rows, gen_rows, branch_rows = tables["bus"], tables["gen"], tables["branch"]
    cost_rows = tables.get("gencost", [])
    _need(bus_rows, "bus", 3)
    _need(gen_rows, "gen", 10)
    _need(branch_rows, "branch", 6)
    _need(cost_rows, "gencost", 5)
    if cost_rows and len(cost_rows) < len(gen_rows):
        raise CaseParseError("mpc.gencost has fewer rows than mpc.gen", cost_rows[-1][0])

    order = []
    demand, is_ref = {}, {}
    for lineno, row in bus_rows:
        bid = int(row[0])
        if bid in demand:
            raise CaseParseError(f"duplicate bus {bid}", lineno)
        order.append(bid)
        demand[bid] = row[2] / base
        is_ref[bid] = int(row[1]) == 3

    agg: dict[int, list[float]] = {}  # bus -> [pmin, pmax, cost*pmax, cost, count]
    for k, (lineno, row) in enumerate(gen_rows):
        bid = int(row[0])
        if bid not in demand:
            raise NetworkValidationError(f"generator on line {lineno} references unknown bus {bid}")
        if row[7] <= 0:
            continue
        pmax, pmin = row[8], row[9]
        cost = _linear_cost(*cost_rows[k]) if cost_rows else 0.0
        a = agg.setdefault(bid, [0.0, 0.0, 0.0, 0.0, 0])
        a[0] += pmin
        a[1] += pmax
        a[2] += cost * pmax
        a[3] += cost
        a[4] += 1

    buses = []
    for bid in order:
        p_gl = p_gu = c = 0.0
        if bid in agg:
            pmin, pmax, wsum, csum, count = agg[bid]
            c = (wsum / pmax if pmax > 0 else csum / count) * base
            p_gl, p_gu = pmin / base, pmax / base
            if clamp_min_generation:
                p_gl = max(p_gl, 0.0)
        buses.append(Bus(bid, demand[bid], p_gl, p_gu, c, 0.0, 0.0, is_ref[bid]))

    unlimited = max(sum(b.p_gu for b in buses), sum(b.pd for b in buses), 1.0)
    seen: dict[tuple[int, int], int] = {}
    lines = []
    for lineno, row in branch_rows:
        f, t = int(row[0]), int(row[1])
        for end in (f, t):
            if end not in demand:
                raise NetworkValidationError(f"branch on line {lineno} references unknown bus {end}")
        r, x = row[2], row[3]
        if r == 0 and x == 0:
            raise CaseParseError("branch with zero impedance", lineno)
        y = 1.0 / complex(r, x)
        rate = row[5]
        thermal = rate / base if rate > 0 else unlimited
        status = row[10] if len(row) > 10 else 1.0
        angle = None
        if len(row) > 12:
            lo, hi = row[11], row[12]
            if not (lo <= -360 and hi >= 360) and min(-lo, hi) > 0:
                angle = math.radians(min(-lo, hi))
        if angle is None:
            # thermal-implied bound keeps the big-M valid when no angle limit is given
            angle = thermal / abs(y.imag)
        circuit = seen.get((f, t), 0) + 1
        seen[(f, t)] = circuit
        lines.append(Line(f, t, circuit, y.imag, thermal, angle, y.real, status > 0))

    return Network(tuple(buses), tuple(lines), base, name=name)


def write_case(net: Network) -> str:
    """Serialize to MATPOWER text readable by :func:`parse_case`.

    Ramp and VoLL costs have no MATPOWER column and are dropped.
    """
    base = net.base_mva
    out = ["function mpc = case", "mpc.version = '2';", f"mpc.baseMVA = {base!r};", "", "mpc.bus = ["]
    for bus in net.buses:
        btype = 3 if bus.is_reference else (2 if bus.has_generation else 1)
        out.append(f"\t{bus.id}\t{btype}\t{bus.pd * base!r}\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;")
    out += ["];", "", "mpc.gen = ["]
    gens = [bus for bus in net.buses if bus.has_generation]
    for bus in gens:
        out.append(f"\t{bus.id}\t0\t0\t0\t0\t1\t{base!r}\t1\t{bus.p_gu * base!r}\t{bus.p_gl * base!r};")
    out += ["];", "", "mpc.branch = ["]
    for line in net.lines:
        z = 1.0 / complex(line.g, line.b)
        ang = math.degrees(line.angle_limit)
        out.append(
            f"\t{line.from_bus}\t{line.to_bus}\t{z.real!r}\t{z.imag!r}\t0\t{line.t * base!r}"
            f"\t{line.t * base!r}\t{line.t * base!r}\t0\t0\t{int(line.initially_on)}\t{-ang!r}\t{ang!r};"
        )
    out += ["];", "", "mpc.gencost = ["]
    for bus in gens:
        out.append(f"\t2\t0\t0\t2\t{bus.c / base!r}\t0;")
    out += ["];", ""]
    return "\n".join(out)


def to_json(net: Network) -> str:
    payload = {
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [asdict(bus) for bus in net.buses],
        "lines": [asdict(line) for line in net.lines],
    }
    return json.dumps(payload, indent=1)


def from_json(text: str) -> Network:
    payload = json.loads(text)
    buses = tuple(Bus(**row) for row in payload["buses"])
    lines = tuple(Line(**row) for row in payload["lines"])
    return Network(buses, lines, float(payload.get("base_mva", 100.0)), name=payload.get("name", ""))


def load_network(path, **kwargs) -> Network:
    from pathlib import Path

    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return from_json(text)
    return parse_case(text, name=path.stem, **kwargs)


# ---------------------------------------------------------------------------
# derived data


def scale_loads(net: Network, factor: float) -> Network:
    if not factor > 0:
        raise ValueError(f"load scaling factor must be positive, got {factor}")
    buses = tuple(replace(bus, pd=bus.pd * factor) for bus in net.buses)
    return replace(net, buses=buses)


def default_costs(net: Network) -> Network:
    """Ramp cost at 10% of the generation cost, uniform VoLL at 10x the dearest generator."""
    voll = 10.0 * max((bus.c for bus in net.buses), default=0.0)
    buses = tuple(replace(bus, c_r=0.1 * bus.c, c_voll=voll) for bus in net.buses)
    return replace(net, buses=buses)


def big_m_theta(net: Network) -> float:
    if not net.lines:
        raise ValueError("big-M undefined for a network without lines")
    return max(line.angle_limit for line in net.lines) * len(net.lines)
