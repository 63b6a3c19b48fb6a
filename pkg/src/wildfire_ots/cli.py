"""Command-line entry point (``wildfire-ots``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .formulation import FormulationConfig, SolutionReport, solve_extensive, verify_physics
from .milp import BACKENDS, SolverConfig
from .ph import PhConfig, ph_solve, trace_csv
from .scenarios import ScenarioSet, generate, load_risk

log = logging.getLogger("wildfire_ots")


def _tuple(kind):
    def parse(text: str):
        return tuple(kind(v) for v in text.split(",") if v.strip())
    return parse


def _write(text: str, path: str | None) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _load_scenarios(args, net):
    if args.scenarios:
        return ScenarioSet.from_jsonl(Path(args.scenarios).read_text()).bind(net)
    if args.risk:
        risk = load_risk(harness.resolve_data_path(args.risk).read_text(), net)
        return generate(risk, args.threshold, args.count, args.max_outages, args.seed)
    return None


def cmd_generate(args) -> int:
    risk = load_risk(harness.resolve_data_path(args.risk).read_text())
    scenarios = generate(risk, args.threshold, args.count, args.max_outages, args.seed)
    _write(scenarios.to_jsonl(), args.out)
    if args.histogram:
        figure = args.histogram.rsplit(".", 1)[0] + ".svg" if args.figure else None
        harness.emit_histogram(scenarios, args.histogram, figure, f"risk threshold {args.threshold:g}")
    return 0


def cmd_solve(args) -> int:
    net, _ = harness.load_inputs(replace(harness.ExperimentConfig(), case=args.case))
    fcfg = FormulationConfig(args.formulation, args.budget, load_scaling=args.scaling)
    solver = SolverConfig(backend=args.backend or "bnb")
    scenarios = _load_scenarios(args, net)
    if args.formulation != "deterministic" and scenarios is None:
        log.error("two-stage formulations need --scenarios or --risk")
        return 2
    if args.method == "ph" and args.formulation != "deterministic":
        mode = "parallel" if args.threads and args.threads > 1 else "serial"
        result = ph_solve(args.formulation, net, None, scenarios, fcfg,
                          PhConfig(max_iterations=args.max_iterations, mode=mode, workers=args.threads), solver)
        report = result.report
        if args.trace:
            _write(trace_csv(result), args.trace)
    else:
        report, _ = solve_extensive(net, scenarios, fcfg, solver)
    verify_physics(report, net, scenarios)
    _write(report.to_json() + "\n", args.out)
    log.info("objective %.6f, expected shed %.4f MW, residual %.2e",
             report.objective, report.expected_shed_mw, report.max_residual)
    return 0


def _experiment_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    overrides = {}
    for name in ("case", "risk", "scenario_counts", "load_scalings", "budget", "max_outages", "thresholds",
                 "seeds", "methods", "modes", "concentrated_lines"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.seed is not None and "seeds" not in overrides:
        overrides["seeds"] = (args.seed,)
    if args.backend:
        overrides["backend"] = args.backend
    if args.threads:
        overrides["workers"] = args.threads
    return replace(cfg, **overrides) if overrides else cfg


def cmd_experiment(args) -> int:
    cfg = _experiment_config(args)

    def progress(row):
        log.info("%s n=%s scaling=%s seed=%s: %s", row["formulation"], row["n_scenarios"], row["scaling"],
                 row["seed"], row["status"])

    rows = harness.run_experiment(cfg, progress)
    paths = harness.write_results(rows, args.out, figures=not args.no_figures)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0 if all(r["status"] == "optimal" for r in rows) else 1


def cmd_confidence(args) -> int:
    cfg = _experiment_config(args)
    result = harness.confidence_study(cfg, n_scenarios=args.count, method=args.method)
    paths = harness.write_confidence(result, args.out, figures=not args.no_figures)
    for name, path in paths.items():
        print(f"{name}: {path}")
    print(f"relative shed gap: low {result.gap_low:.6g}, concentrated {result.gap_concentrated:.6g}")
    return 0 if result.concentration_narrows_gap else 1


def cmd_verify(args) -> int:
    net, _ = harness.load_inputs(replace(harness.ExperimentConfig(), case=args.case))
    report = SolutionReport.from_json(Path(args.report).read_text())
    scenarios = ScenarioSet.from_jsonl(Path(args.scenarios).read_text()) if args.scenarios else None
    residual = verify_physics(report, net, scenarios)
    ok = residual <= args.tolerance
    print(json.dumps({"max_residual": residual, "tolerance": args.tolerance, "ok": ok}))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wildfire-ots",
                                     description="Wildfire-aware topology control under outage uncertainty.")
    parser.add_argument("--seed", type=int, default=None, help="sampler seed")
    parser.add_argument("--threads", type=int, default=None, help="worker processes for parallel PH")
    parser.add_argument("--backend", choices=BACKENDS, default=None, help="MILP backend")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-scenarios", help="sample outage scenarios to JSONL")
    g.add_argument("--risk", required=True, help="risk CSV path or bundled fixture name")
    g.add_argument("--threshold", type=float, default=0.0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--max-outages", type=int, default=4)
    g.add_argument("--out", default="-")
    g.add_argument("--histogram", help="also write the concentration histogram CSV here")
    g.add_argument("--figure", action="store_true", help="render the histogram next to its CSV")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve one formulation and write a JSON report")
    s.add_argument("--case", default="case5")
    s.add_argument("--formulation", choices=("deterministic", "preventive", "corrective"), default="preventive")
    s.add_argument("--method", choices=("extensive", "ph"), default="extensive")
    s.add_argument("--budget", type=int, default=5)
    s.add_argument("--scaling", type=float, default=1.0)
    s.add_argument("--scenarios", help="scenario JSONL")
    s.add_argument("--risk", help="sample scenarios from this risk map instead")
    s.add_argument("--threshold", type=float, default=0.0)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--max-outages", type=int, default=4)
    s.add_argument("--max-iterations", type=int, default=200)
    s.add_argument("--trace", help="PH iteration trace CSV")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_solve)

    for name, func, helptext in (("experiment", cmd_experiment, "run a scenario-count / load-scaling sweep"),
                                 ("confidence-study", cmd_confidence, "compare diffuse and concentrated risk")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--config", help="TOML or JSON experiment config")
        e.add_argument("--case")
        e.add_argument("--risk")
        e.add_argument("--scenario-counts", dest="scenario_counts", type=_tuple(int))
        e.add_argument("--load-scalings", dest="load_scalings", type=_tuple(float))
        e.add_argument("--budget", type=int)
        e.add_argument("--max-outages", dest="max_outages", type=int)
        e.add_argument("--thresholds", type=_tuple(float))
        e.add_argument("--seeds", type=_tuple(int))
        e.add_argument("--methods", type=_tuple(str))
        e.add_argument("--modes", type=_tuple(str))
        e.add_argument("--out", default="results")
        e.add_argument("--no-figures", action="store_true")
        if name == "confidence-study":
            e.add_argument("--count", type=int, default=None, help="scenarios per arm (default from config)")
            e.add_argument("--method", choices=harness.METHODS, default=None)
            e.add_argument("--concentrated-lines", dest="concentrated_lines", type=int,
                           help="lines left at risk in the concentrated arm")
        e.set_defaults(func=func)

    v = sub.add_parser("verify", help="recompute physical residuals of a JSON report")
    v.add_argument("--case", default="case5")
    v.add_argument("--report", required=True)
    v.add_argument("--scenarios")
    v.add_argument("--tolerance", type=float, default=1e-6)
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if getattr(args, "seed", None) is None and args.command in ("generate-scenarios", "solve"):
        args.seed = 0
    try:
        return args.func(args)
    except (harness.ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
