import numpy as np
import pytest

from nsdser.diffusion import GmmPrior, build_schedule


@pytest.fixture(scope="session")
def prior16():
    return GmmPrior.random(16, n_components=3, n_classes=2, seed=11)


@pytest.fixture(scope="session")
def linear1000():
    return build_schedule("linear-beta", 1000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
