import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message="The TBB threading layer")

from meshfield import geometry  # noqa: E402
from meshfield.head import deform, make_toy_head  # noqa: E402


@pytest.fixture(scope="session")
def toy_assets():
    return make_toy_head(2, 0)


@pytest.fixture(scope="session")
def toy_mesh(toy_assets):
    return deform(toy_assets, toy_assets.zero_params())


@pytest.fixture(scope="session")
def toy_bvh(toy_mesh):
    return geometry.build_bvh(toy_mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# acceptance lines, filled in by test_acceptance.py and printed after the run
ACCEPTANCE = {}
ACCEPTANCE_CRITERIA = range(1, 11)


def record(criterion, ok, detail):
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in ACCEPTANCE_CRITERIA:
        terminalreporter.write_line(ACCEPTANCE.get(k, f"criterion {k:2d}: FAIL  (not run)"))
