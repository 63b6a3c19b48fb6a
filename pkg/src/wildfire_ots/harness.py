"""Experiment runner: scenario-count sweeps, load scalings, paired formulation
comparisons and the risk-concentration study, with CSV and figure output.

Result CSV columns (``RESULT_FIELDS``):

==========================  =====================================================
formulation                 ``preventive`` or ``corrective``
method                      ``extensive`` or ``ph``
mode                        ``serial`` or ``parallel`` (PH only; always ``serial``
                            for the extensive form)
n_scenarios                 scenario count of the cell
scaling                     load scaling factor
threshold                   risk threshold used to sample the cell
seed                        sampler seed
status                      ``optimal``, a solver status, or ``error: <message>``
seconds                     wall time of the solve call (model build excluded for
                            the extensive form)
iterations                  PH iterations, or branch-and-bound nodes
objective                   expected cost in $
expected_load_shed_mw       probability-weighted shed
relative_gap_vs_preventive  (preventive - corrective) / preventive; 0 on
                            preventive rows
max_residual                largest physical residual of the reported solution
scenario_hash               digest of the serialized scenario set, equal within
                            a cell so rows are paired
==========================  =====================================================
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import data
from .formulation import (
    FormulationConfig, ScenarioInfeasible, SolutionReport, as_corrective, build_extensive, extract_report,
    verify_physics,
)
from .milp import SolverConfig, solve
from .network import Network, default_costs, load_network
from .ph import PhConfig, ph_solve
from .scenarios import RiskMap, ScenarioSet, concentration_histogram, generate, load_risk, threshold_for_k_lines

log = logging.getLogger(__name__)

METHODS = ("extensive", "ph", "auto")
MODES = ("serial", "parallel")
FORMULATIONS = ("preventive", "corrective")

RESULT_FIELDS = (
    "formulation", "method", "mode", "n_scenarios", "scaling", "threshold", "seed", "status", "seconds",
    "iterations", "objective", "expected_load_shed_mw", "relative_gap_vs_preventive", "max_residual",
    "scenario_hash",
)
TIMING_FIELDS = ("seconds",)
SORT_KEY = ("threshold", "n_scenarios", "scaling", "seed", "method", "mode", "formulation")

CONFIDENCE_FIELDS = (
    "arm", "threshold", "seed", "n_scenarios", "formulation", "method", "status", "objective",
    "expected_load_shed_mw", "scenario_hash",
)
SUMMARY_FIELDS = ("arm", "threshold", "formulation", "mean_shed_mw", "relative_shed_gap")


class ConfigError(ValueError):
    pass


def resolve_data_path(name: str) -> Path:
    """A file path, or the stem of a bundled fixture such as ``case5`` or ``risk5``."""
    p = Path(name)
    if p.exists():
        return p
    for suffix in ("", ".m", ".csv", ".json"):
        candidate = data.path(name + suffix)
        if candidate.is_file():
            return Path(str(candidate))
    raise ConfigError(f"no such file or bundled fixture: {name!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    case: str = "case5"
    risk: str = "risk5"
    scenario_counts: tuple[int, ...] = tuple(range(20, 201, 20))
    load_scalings: tuple[float, ...] = (1.0, 1.05)
    budget: int = 5
    max_outages: int = 4
    thresholds: tuple[float, ...] = (0.0,)
    seeds: tuple[int, ...] = (0,)
    methods: tuple[str, ...] = ("ph",)
    modes: tuple[str, ...] = ("serial",)
    formulations: tuple[str, ...] = FORMULATIONS
    backend: str = "bnb"
    workers: int | None = None
    ph: dict = field(default_factory=dict)
    pwl_segments: int = 16
    # confidence study
    concentrated_lines: int = 4
    confidence_scenarios: int = 200

    def __post_init__(self):
        for name in ("scenario_counts", "load_scalings", "thresholds", "seeds", "methods", "modes", "formulations"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigError(f"{name} must not be empty")
            object.__setattr__(self, name, value)
        if any(n < 1 for n in self.scenario_counts):
            raise ConfigError("scenario counts must be positive")
        if any(s <= 0 for s in self.load_scalings):
            raise ConfigError("load scalings must be positive")
        for name, allowed in (("methods", METHODS), ("modes", MODES), ("formulations", FORMULATIONS)):
            bad = [v for v in getattr(self, name) if v not in allowed]
            if bad:
                raise ConfigError(f"{name}: unknown values {bad}; allowed {allowed}")
        if self.budget < 0 or self.max_outages < 1:
            raise ConfigError("budget must be >= 0 and max_outages >= 1")
        unknown = set(self.ph) - {f.name for f in fields(PhConfig)}
        if unknown:
            raise ConfigError(f"unknown PH settings {sorted(unknown)}")
        resolve_data_path(self.case)
        resolve_data_path(self.risk)

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        values = {}
        for key, val in raw.items():
            values[key] = tuple(val) if isinstance(val, list) else val
        return cls(**values)

    def to_dict(self) -> dict:
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def load_config(path) -> ExperimentConfig:
    """Read an :class:`ExperimentConfig` from a ``.toml`` or ``.json`` file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        raw = tomllib.loads(text)
    elif path.suffix.lower() == ".json":
        raw = json.loads(text)
    else:
        raise ConfigError(f"config must be .toml or .json, got {path.name}")
    return ExperimentConfig.from_mapping(raw.get("experiment", raw))


def load_inputs(cfg: ExperimentConfig) -> tuple[Network, RiskMap]:
    net = load_network(resolve_data_path(cfg.case))
    if all(b.c_voll == 0 for b in net.buses):
        net = default_costs(net)
    risk = load_risk(resolve_data_path(cfg.risk).read_text(), net)
    return net, risk


def _method_for(method: str, formulation: str) -> str:
    # "auto": exact extensive form for preventive control (its first stage is
    # all the binaries), PH for corrective (continuous first stage)
    if method == "auto":
        return "extensive" if formulation == "preventive" else "ph"
    return method


def solve_cell(net: Network, scenarios: ScenarioSet, formulation: str, method: str, mode: str,
               cfg: ExperimentConfig, scaling: float) -> tuple[SolutionReport, float, int]:
    """Solve one formulation on one scenario set; returns (report, seconds, iterations)."""
    fcfg = FormulationConfig(formulation, cfg.budget, load_scaling=scaling)
    solver = SolverConfig(backend=cfg.backend, pwl_segments=cfg.pwl_segments)
    method = _method_for(method, formulation)
    if method == "extensive":
        model = build_extensive(net, None, scenarios, fcfg)
        t0 = time.perf_counter()
        sol = solve(model, solver)
        seconds = time.perf_counter() - t0
        if not sol.optimal:
            raise RuntimeError(sol.status)
        report = extract_report(model, sol, net, scenarios)
        report.extra["method"] = "extensive"
        return report, seconds, sol.nodes
    pcfg = PhConfig(**{**cfg.ph, "mode": mode, "workers": cfg.workers})
    t0 = time.perf_counter()
    result = ph_solve(formulation, net, None, scenarios, fcfg, pcfg, solver)
    return result.report, time.perf_counter() - t0, result.iterations


def _row(formulation, method, mode, n, scaling, threshold, seed, digest, **extra) -> dict:
    row = {"formulation": formulation, "method": method, "mode": mode, "n_scenarios": n, "scaling": scaling,
           "threshold": threshold, "seed": seed, "status": "", "seconds": math.nan, "iterations": 0,
           "objective": math.nan, "expected_load_shed_mw": math.nan, "relative_gap_vs_preventive": math.nan,
           "max_residual": math.nan, "scenario_hash": digest}
    row.update(extra)
    return row


def run_pair(net: Network, scenarios: ScenarioSet, method: str, mode: str, cfg: ExperimentConfig,
             scaling: float, key: dict) -> list[dict]:
    """Preventive then corrective on the same scenario set.

    The corrective solve is seeded with the preventive solution, which is
    always feasible for it; the better of the two is reported.
    """
    digest = scenarios.digest()
    eff_mode = mode if mode in _modes_for(method, cfg) else "serial"
    rows, reports = [], {}
    for formulation in FORMULATIONS:
        if formulation not in cfg.formulations:
            continue
        row = _row(formulation, method, eff_mode, len(scenarios), scaling, key["threshold"], key["seed"], digest)
        try:
            report, seconds, iterations = solve_cell(net, scenarios, formulation, method, eff_mode, cfg, scaling)
            if formulation == "corrective" and "preventive" in reports:
                seeded = as_corrective(reports["preventive"])
                if seeded.objective < report.objective:
                    report = seeded
            residual = verify_physics(report, net, scenarios)
            reports[formulation] = report
            row.update(status="optimal", seconds=seconds, iterations=iterations, objective=report.objective,
                       expected_load_shed_mw=report.expected_shed_mw, max_residual=residual)
        except (RuntimeError, ScenarioInfeasible, ValueError) as exc:
            log.warning("%s/%s n=%d seed=%s failed: %s", formulation, method, len(scenarios), key["seed"], exc)
            row["status"] = f"error: {exc}"
        rows.append(row)
    prev = reports.get("preventive")
    for row in rows:
        if row["status"] != "optimal" or prev is None:
            continue
        if row["formulation"] == "preventive":
            row["relative_gap_vs_preventive"] = 0.0
        else:
            row["relative_gap_vs_preventive"] = relative_gap(prev.objective, row["objective"])
    return rows


def relative_gap(preventive: float, corrective: float) -> float:
    if preventive == 0:
        return 0.0
    return (preventive - corrective) / preventive


def _modes_for(method: str, cfg: ExperimentConfig) -> tuple[str, ...]:
    uses_ph = any(_method_for(method, f) == "ph" for f in cfg.formulations)
    return cfg.modes if uses_ph else ("serial",)


def run_experiment(cfg: ExperimentConfig, progress=None) -> list[dict]:
    """Sweep every (threshold, |S|, scaling, seed) cell; returns rows in canonical order."""
    net, risk = load_inputs(cfg)
    rows = []
    for threshold in cfg.thresholds:
        for n in cfg.scenario_counts:
            for seed in cfg.seeds:
                scenarios = generate(risk, threshold, n, cfg.max_outages, seed)
                for scaling in cfg.load_scalings:
                    for method in cfg.methods:
                        for mode in _modes_for(method, cfg):
                            key = {"threshold": threshold, "seed": seed}
                            for row in run_pair(net, scenarios, method, mode, cfg, scaling, key):
                                rows.append(row)
                                if progress:
                                    progress(row)
    return sort_rows(rows)


def sort_rows(rows: list[dict]) -> list[dict]:
    order = {f: i for i, f in enumerate(FORMULATIONS)}

    def key(row):
        return tuple(order.get(row[k], 99) if k == "formulation" else row[k] for k in SORT_KEY)

    return sorted(rows, key=key)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_csv(rows: list[dict], columns=RESULT_FIELDS, exclude=()) -> str:
    cols = [c for c in columns if c not in exclude]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def write_results(rows: list[dict], out_dir, figures: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "results.csv"}
    paths["csv"].write_text(rows_csv(rows))
    if figures:
        from .plotting import objective_figure

        paths["objective_figure"] = objective_figure(rows, out_dir / "objective_vs_scenarios.svg")
    return paths


def histogram_csv(counts: list[int]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "lines_failed_in_at_least_k"])
    for k, c in enumerate(counts, start=1):
        writer.writerow([k, c])
    return buf.getvalue()


def emit_histogram(scenarios: ScenarioSet, csv_path, figure_path=None, title: str = "") -> list[int]:
    """Write the concentration histogram as CSV and, optionally, as a bar chart."""
    counts = concentration_histogram(scenarios)
    Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    Path(csv_path).write_text(histogram_csv(counts))
    if figure_path is not None:
        from .plotting import histogram_figure

        histogram_figure(counts, figure_path, title)
    return counts


@dataclass
class ConfidenceResult:
    rows: list[dict]
    summary: list[dict]
    gap_low: float
    gap_concentrated: float
    thresholds: dict[str, float]
    histograms: dict[str, list[int]]

    @property
    def concentration_narrows_gap(self) -> bool:
        return self.gap_concentrated < self.gap_low


def confidence_study(cfg: ExperimentConfig, n_scenarios: int | None = None, method: str | None = None,
                     scaling: float | None = None) -> ConfidenceResult:
    """Compare preventive and corrective load shed under diffuse (R = 0) and
    concentrated risk (the grid threshold leaving ``cfg.concentrated_lines``
    lines exposed), on the same seeds.

    The relative gap is ``(mean preventive shed - mean corrective shed) /
    mean preventive shed``, with 0 when preventive control sheds nothing.
    """
    net, risk = load_inputs(cfg)
    n = n_scenarios or cfg.confidence_scenarios
    method = method or cfg.methods[0]
    scaling = cfg.load_scalings[0] if scaling is None else scaling
    thresholds = {"low": 0.0, "concentrated": threshold_for_k_lines(risk, cfg.concentrated_lines)}
    study_cfg = replace(cfg, formulations=FORMULATIONS)
    rows, histograms = [], {}
    for arm, threshold in thresholds.items():
        for seed in cfg.seeds:
            scenarios = generate(risk, threshold, n, cfg.max_outages, seed)
            if seed == cfg.seeds[0]:
                histograms[arm] = concentration_histogram(scenarios)
            for r in run_pair(net, scenarios, method, cfg.modes[0], study_cfg, scaling,
                              {"threshold": threshold, "seed": seed}):
                rows.append({"arm": arm, "threshold": threshold, "seed": seed, "n_scenarios": n,
                             "formulation": r["formulation"], "method": r["method"], "status": r["status"],
                             "objective": r["objective"], "expected_load_shed_mw": r["expected_load_shed_mw"],
                             "scenario_hash": r["scenario_hash"]})
    summary, gaps = [], {}
    for arm, threshold in thresholds.items():
        mean = {}
        for formulation in FORMULATIONS:
            vals = [r["expected_load_shed_mw"] for r in rows
                    if r["arm"] == arm and r["formulation"] == formulation and r["status"] == "optimal"]
            mean[formulation] = sum(vals) / len(vals) if vals else math.nan
        gaps[arm] = relative_gap(mean["preventive"], mean["corrective"])
        for formulation in FORMULATIONS:
            summary.append({"arm": arm, "threshold": threshold, "formulation": formulation,
                            "mean_shed_mw": mean[formulation], "relative_shed_gap": gaps[arm]})
    result = ConfidenceResult(rows, summary, gaps["low"], gaps["concentrated"], thresholds, histograms)
    if not result.concentration_narrows_gap:
        log.warning("concentrated risk did not narrow the relative shed gap (%.4g vs %.4g)",
                    result.gap_concentrated, result.gap_low)
    return result


def write_confidence(result: ConfidenceResult, out_dir, figures: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"rows": out_dir / "confidence_rows.csv", "summary": out_dir / "confidence_summary.csv"}
    paths["rows"].write_text(rows_csv(result.rows, CONFIDENCE_FIELDS))
    paths["summary"].write_text(rows_csv(result.summary, SUMMARY_FIELDS))
    for arm, counts in result.histograms.items():
        paths[f"histogram_{arm}"] = out_dir / f"histogram_{arm}.csv"
        paths[f"histogram_{arm}"].write_text(histogram_csv(counts))
    if figures:
        from .plotting import histogram_figure, shed_figure

        paths["shed_figure"] = shed_figure(result.summary, out_dir / "load_shed.svg")
        for arm, counts in result.histograms.items():
            paths[f"histogram_{arm}_figure"] = histogram_figure(
                counts, out_dir / f"histogram_{arm}.svg", f"risk threshold {result.thresholds[arm]:g}")
    return paths
