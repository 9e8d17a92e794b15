import numpy as np
import pytest

from robust_mflqg.consistency import solve_consistency
from robust_mflqg.model import load_scenario, shipped_scenario, validate_params
from robust_mflqg.riccati import solve_bundle


def load(name):
    return validate_params(load_scenario(shipped_scenario(name)))


def scalar_model(**kw):
    """Worked-example data with overrides (scalars are promoted to 1x1)."""
    m = load("paper_example")
    fix = {k: (np.atleast_2d(float(v)) if k not in ("eta", "xbar0", "horizon", "init_spread")
               else v) for k, v in kw.items()}
    for k in ("eta", "xbar0"):
        if k in fix:
            fix[k] = np.atleast_1d(np.asarray(fix[k], float))
    return m.replace(**fix)


@pytest.fixture(scope="session")
def example():
    return load("paper_example")


@pytest.fixture(scope="session")
def example_bundle(example):
    return solve_bundle(example)


@pytest.fixture(scope="session")
def example_profile(example, example_bundle):
    return solve_consistency(example, example_bundle)[0]


@pytest.fixture(scope="session")
def scalar_inf():
    return load("scalar_infinite")


@pytest.fixture(scope="session")
def homogeneous():
    return load("homogeneous")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
