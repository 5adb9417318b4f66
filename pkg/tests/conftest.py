import numpy as np
import pytest

from mfopt.fem import assemble, build_geometry, triangulate
from mfopt.fom import build_fom
from mfopt.harness import ExperimentConfig, build_problem

TINY_LAYOUT = """
[domain]
x0 = 0.0
y0 = 0.0
x1 = 2.0
y1 = 1.0
mu_air = 0.5
heater_power = 80.0
parameters = walls, doors

[left]
type = wall
x0 = 0.0
y0 = 0.0
x1 = 1.0
y1 = 1.0
group = walls

[right]
type = door
x0 = 1.0
y0 = 0.0
x1 = 2.0
y1 = 1.0
group = doors

[heater]
type = heater
x0 = 0.0
y0 = 0.0
x1 = 2.0
y1 = 1.0
"""


@pytest.fixture(scope="session")
def tiny_layout(tmp_path_factory):
    path = tmp_path_factory.mktemp("layout") / "tiny.layout"
    path.write_text(TINY_LAYOUT)
    return path


@pytest.fixture(scope="session")
def tiny_forms(tiny_layout):
    """4 x 2 cells, 15 nodes, 3 free."""
    geo = build_geometry(tiny_layout)
    return assemble(geo, triangulate(4, 2, geo.domain), (0.05, 0.05), output_weight=5000.0)


@pytest.fixture(scope="session")
def tiny_fom(tiny_forms):
    return build_fom(tiny_forms, 1, 0.1, (0.05, 0.05), 0.5e-3, [[0.01, 0.01], [0.1, 0.1]])


@pytest.fixture(scope="session")
def small_config():
    """Default layout on the 32 x 16 validation mesh with a short horizon."""
    return ExperimentConfig.load().replace(validate_K=20)


@pytest.fixture(scope="session")
def small_problem(small_config):
    return build_problem(small_config, reduced=True)


@pytest.fixture(scope="session")
def small_fom(small_problem):
    return small_problem.fom


@pytest.fixture(scope="session")
def extension_points():
    return np.array([[0.03, 0.07], [0.07, 0.03]])


@pytest.fixture(scope="session")
def small_rb(small_fom, extension_points):
    from mfopt.rb import RbModel
    rb = RbModel.empty(small_fom)
    for mu in extension_points:
        rb = rb.extend(mu)
    return rb
