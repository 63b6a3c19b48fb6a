"""Wildfire outage scenarios sampled from per-line risk values.

Scenarios store the *damaged* line set.  The in-service indicator used by
the formulations is ``xi = 0`` for a damaged line and ``1`` otherwise.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .network import LineKey, Network

RiskMap = dict[LineKey, float]


@dataclass(frozen=True)
class OutageScenario:
    id: int
    out_lines: frozenset[LineKey] = frozenset()

    def xi(self, net: Network) -> np.ndarray:
        flags = np.ones(len(net.lines))
        for key in self.out_lines:
            flags[net.line_index[key]] = 0.0
        return flags


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple[OutageScenario, ...]
    seed: int | None = None
    threshold: float | None = None
    max_outages: int | None = None
    probabilities: tuple[float, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        if not self.probabilities and self.scenarios:
            n = len(self.scenarios)
            object.__setattr__(self, "probabilities", (1.0 / n,) * n)
        if len(self.probabilities) != len(self.scenarios):
            raise ValueError("one probability per scenario required")
        if self.scenarios and abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ValueError("scenario probabilities must sum to one")

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)

    def __getitem__(self, k):
        return self.scenarios[k]

    def bind(self, net: Network) -> "ScenarioSet":
        """Check every damaged line exists in ``net``; returns self."""
        for sc in self.scenarios:
            unknown = [key for key in sc.out_lines if key not in net.line_index]
            if unknown:
                raise KeyError(f"scenario {sc.id} outages unknown lines {sorted(unknown)}")
        return self

    def to_jsonl(self) -> str:
        rows = []
        for sc, p in zip(self.scenarios, self.probabilities):
            out = [list(key) for key in sorted(sc.out_lines)]
            rows.append(json.dumps({"id": sc.id, "out": out, "prob": p}, separators=(",", ":")))
        return "\n".join(rows) + ("\n" if rows else "")

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()[:16]

    @classmethod
    def from_jsonl(cls, text: str) -> "ScenarioSet":
        scenarios, probs = [], []
        for raw in text.splitlines():
            if not raw.strip():
                continue
            row = json.loads(raw)
            out = frozenset((int(f), int(t), int(c)) for f, t, c in row["out"])
            scenarios.append(OutageScenario(int(row["id"]), out))
            if "prob" in row:
                probs.append(float(row["prob"]))
        if probs and len(probs) != len(scenarios):
            raise ValueError("either every scenario line carries 'prob' or none does")
        return cls(tuple(scenarios), probabilities=tuple(probs))

    @classmethod
    def single(cls, out_lines=()) -> "ScenarioSet":
        return cls((OutageScenario(0, frozenset(out_lines)),))


def load_risk(text: str, net: Network | None = None) -> RiskMap:
    """Read ``from_bus,to_bus,circuit,risk`` rows; a header row is optional."""
    risk: RiskMap = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
            continue
        if len(row) != 4:
            raise ValueError(f"risk csv line {lineno}: expected 4 fields, got {len(row)}")
        key = (int(row[0]), int(row[1]), int(row[2]))
        value = float(row[3])
        if not value >= 0:
            raise ValueError(f"risk csv line {lineno}: risk must be nonnegative, got {value}")
        risk[key] = value
    if net is not None:
        bind_risk(risk, net)
    return risk


def bind_risk(risk: RiskMap, net: Network) -> RiskMap:
    unknown = sorted(key for key in risk if key not in net.line_index)
    if unknown:
        raise KeyError(f"risk map references lines not in the network: {unknown}")
    return risk


def dump_risk(risk: RiskMap) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["from_bus", "to_bus", "circuit", "risk"])
    for key in sorted(risk):
        writer.writerow([*key, repr(risk[key])])
    return buf.getvalue()


def outage_weights(risk: RiskMap, threshold: float) -> tuple[list[LineKey], np.ndarray]:
    """Thresholded, normalized sampling weights over the risk map's keys (sorted)."""
    keys = sorted(risk)
    w = np.array([risk[k] if risk[k] >= threshold else 0.0 for k in keys], dtype=float)
    total = w.sum()
    if total > 0:
        w = w / total
    return keys, w


def generate(risk: RiskMap, threshold: float, n: int, m: int, seed: int) -> ScenarioSet:
    """Sample ``n`` outage scenarios of at most ``m`` damaged lines each.

    Every scenario draws ``m`` lines with replacement from the normalized
    weights of lines whose risk is at least ``threshold``; repeats collapse.
    Uses a PCG64 stream and inverse-CDF lookup so the draw sequence depends
    only on ``seed``.
    """
    if n < 1:
        raise ValueError("need at least one scenario")
    if m < 1:
        raise ValueError("max outages per scenario must be at least 1")
    keys, w = outage_weights(risk, threshold)
    if w.sum() == 0:
        scenarios = tuple(OutageScenario(s) for s in range(n))
        return ScenarioSet(scenarios, seed, threshold, m)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    rng = np.random.Generator(np.random.PCG64(seed))
    scenarios = []
    for s in range(n):
        u = rng.random(m)
        picks = np.searchsorted(cdf, u, side="right")
        scenarios.append(OutageScenario(s, frozenset(keys[i] for i in picks)))
    return ScenarioSet(tuple(scenarios), seed, threshold, m)


def threshold_for_k_lines(risk: RiskMap, k: int, step: float = 0.1) -> float:
    """Smallest grid threshold ``step, 2*step, ...`` leaving exactly ``k`` lines at risk."""
    values = [v for v in risk.values() if v > 0]
    if not values:
        raise ValueError("risk map has no positive entries")
    achievable = []
    j = 1
    while True:
        # rounded so that e.g. 3 * 0.1 compares equal to a stored risk of 0.3
        level = round(j * step, 12)
        count = sum(1 for v in values if v >= level)
        if count == 0:
            break
        if count == k:
            return level
        achievable.append(count)
        j += 1
    raise ValueError(
        f"no threshold on the {step} grid leaves exactly {k} lines; "
        f"achievable counts: {sorted(set(achievable), reverse=True)}"
    )


def concentration_histogram(scenarios: ScenarioSet) -> list[int]:
    """Entry ``k-1`` counts distinct lines that are damaged in at least ``k`` scenarios."""
    if len(scenarios) == 0:
        raise ValueError("empty scenario set")
    occurrences: dict[LineKey, int] = {}
    for sc in scenarios:
        for key in sc.out_lines:
            occurrences[key] = occurrences.get(key, 0) + 1
    counts = np.array(sorted(occurrences.values()), dtype=int)
    return [int(np.sum(counts >= k)) for k in range(1, len(scenarios) + 1)]
