import pytest

from wildfire_ots.data import read
from wildfire_ots.milp import SolverConfig
from wildfire_ots.network import default_costs, parse_case
from wildfire_ots.scenarios import OutageScenario, ScenarioSet, load_risk

BNB = SolverConfig(backend="bnb")


@pytest.fixture(scope="session")
def net5():
    return default_costs(parse_case(read("case5.m"), name="case5"))


@pytest.fixture(scope="session")
def risk5(net5):
    return load_risk(read("risk5.csv"), net5)


@pytest.fixture(scope="session")
def feeder():
    return default_costs(parse_case(read("case12_feeder.m"), name="case12_feeder"))


@pytest.fixture(scope="session")
def feeder_risk(feeder):
    return load_risk(read("risk12_feeder.csv"), feeder)


@pytest.fixture(scope="session")
def three_scenarios():
    """Hand-written outages on the 5-bus grid."""
    return ScenarioSet((
        OutageScenario(0, frozenset({(4, 5, 1)})),
        OutageScenario(1, frozenset({(2, 3, 1), (3, 4, 1)})),
        OutageScenario(2, frozenset({(1, 5, 1)})),
    ))


# -- acceptance summary: one line per criterion --------------------------------

CRITERIA = {
    1: "PH vs extensive form, 5-bus, |S| in {2, 5}, within 0.5%, < 60 s",
    2: "extensive form equals brute-force enumeration to 1e-6",
    3: "corrective objective <= preventive + 1e-8 on paired instances",
    4: "mean corrective shed <= mean preventive shed on paired instances",
    5: "concentrated risk narrows the relative shed gap",
    6: "physical residual <= 1e-6 for every optimal solution",
    7: "serial and parallel PH iterates identical",
    8: "sampler chi-square at 0.01; threshold above max risk gives empty scenarios",
    9: "PH structural invariants",
    10: "RTS-GMLC base case: 85.5 p.u. generation, zero shed",
}
ACCEPTANCE_DETAIL: dict[int, str] = {}
_OUTCOMES: dict[int, str] = {}


def _criterion_of(nodeid: str):
    if "test_acceptance.py::test_criterion_" not in nodeid:
        return None
    return int(nodeid.split("test_criterion_")[1][:2])


def pytest_runtest_logreport(report):
    n = _criterion_of(report.nodeid)
    if n is None:
        return
    if report.skipped:
        _OUTCOMES[n] = "SKIP"
    elif report.failed:
        _OUTCOMES[n] = "FAIL"
    elif report.when == "call" and _OUTCOMES.get(n) != "FAIL":
        _OUTCOMES[n] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n, text in CRITERIA.items():
        status = _OUTCOMES.get(n, "NOT RUN")
        detail = ACCEPTANCE_DETAIL.get(n, "")
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {text}" + (f" [{detail}]" if detail else ""))
