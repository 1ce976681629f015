import numpy as np
import pytest

from caloric_lab.space_builders import (build_gasket, build_grid2d, build_path,
                                        build_product)


def fleet():
    """The standard test fleet: small, long, two-dimensional, fractal, product."""
    return {
        "P3": build_path(3),
        "path33": build_path(33),
        "grid9": build_grid2d(9, 9, np.eye(2), 1.0 / 8),
        "gasket3": build_gasket(3),
        "product": build_product([build_path(5), build_path(4, 2.0, 0.5)], [1.0, 2.0]),
    }


@pytest.fixture(scope="session")
def spaces():
    return fleet()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance_log():
    """Collects one summary line per acceptance criterion."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
