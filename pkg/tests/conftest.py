import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from odeform.mesh import TriMesh  # noqa: E402
from odeform.suite import box, grid_plate  # noqa: E402

CUBE_OBJ = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


@pytest.fixture
def cube_obj(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    return p


@pytest.fixture
def unit_cube():
    return box((0, 0, 0), (1, 1, 1))


@pytest.fixture
def small_box():
    return box((0.3, 0.35, 0.4), (0.5, 0.55, 0.56))


@pytest.fixture
def plate():
    return grid_plate(0.2, 0.8, 0.2, 0.8, 0.5, 2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def equilateral(side: float, origin=(0.3, 0.3, 0.5)) -> TriMesh:
    o = np.asarray(origin, dtype=np.float64)
    v = np.array([o, o + [side, 0, 0], o + [side / 2, side * np.sqrt(3) / 2, 0]])
    return TriMesh(v, [[0, 1, 2]])


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
