import logging
import warnings

import pytest

from platoonlab.dynamics import default_scenario
from platoonlab.harness import ExperimentConfig, run_experiment, synthesize_all, synthetic_aggressive_cycle

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def scenario():
    return default_scenario()


@pytest.fixture(scope="session")
def collection(scenario):
    """Data log from the ACC collection phase of the default scenario."""
    cycle = synthetic_aggressive_cycle(30.0, seed=0)
    sim = run_experiment(scenario, "acc", cycle, ExperimentConfig())
    return sim.data


@pytest.fixture(scope="session")
def synthesis(scenario, collection):
    """Inner gain, internal model, observer and MPC for the default scenario."""
    logging.getLogger("platoonlab").setLevel(logging.ERROR)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return synthesize_all(collection, scenario, ExperimentConfig())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
