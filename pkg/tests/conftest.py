import numpy as np
import pytest

from osil.datakit import build_datasets, generate_pool
from osil.envkit import hazard_grid_5x5


@pytest.fixture(scope="session")
def grid():
    return hazard_grid_5x5()


@pytest.fixture(scope="session")
def cmdp(grid):
    return grid.compile()


@pytest.fixture(scope="session")
def pool(grid):
    return generate_pool(grid, 600, np.random.default_rng(0))


@pytest.fixture(scope="session")
def datasets(pool, cmdp):
    return build_datasets(pool, cmdp.action_space, n_nonpref=30, seed=0)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one summary line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])
