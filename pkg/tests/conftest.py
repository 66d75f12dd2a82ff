import numpy as np
import pytest

from ccalab.oracle import fixture_spec, make_spec
from ccalab.space import SequenceSpace


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def space():
    return SequenceSpace(3, 2, 3)


@pytest.fixture
def small_space():
    return SequenceSpace(2, 2, 2)


@pytest.fixture
def tiny_spec():
    """p(c) = (0.5, 0.5), p(x|c) rows [[0.8, 0.2], [0.3, 0.7]] over V=2, N=1."""
    return fixture_spec()


@pytest.fixture(params=["random-dirichlet", "needle", "independent"])
def family_spec(request, space):
    return make_spec(request.param, space, 1)


ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    """Record (and print) the one-line verdict for an acceptance criterion."""
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
