import sys
from pathlib import Path

import pytest

from wgdelay.scattering import sweep_smatrix
from wgdelay.scenario import load_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture(scope="session")
def scenario_dir():
    return SCENARIOS


@pytest.fixture(scope="session")
def free_scenario():
    return load_scenario(SCENARIOS / "free.yaml")


@pytest.fixture(scope="session")
def barrier_scenario():
    return load_scenario(SCENARIOS / "barrier.yaml")


@pytest.fixture(scope="session")
def coupled_scenario():
    return load_scenario(SCENARIOS / "coupled.yaml")


@pytest.fixture(scope="session")
def barrier_sweep(barrier_scenario):
    s = barrier_scenario
    return sweep_smatrix(s.coupling(), s.basis, s.sweep_energies(), s.solver_options)


@pytest.fixture(scope="session")
def coupled_sweep(coupled_scenario):
    s = coupled_scenario
    return sweep_smatrix(s.coupling(), s.basis, s.sweep_energies(), s.solver_options)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    report = getattr(mod, "REPORT", None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(report):
        terminalreporter.write_line(report[number])
