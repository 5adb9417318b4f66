import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfopt.fem import LayoutError, assemble, build_geometry, triangulate
from mfopt.numerics import is_symmetric


@pytest.fixture(scope="module")
def geometry():
    return build_geometry("default")


@pytest.fixture(scope="module")
def desk_forms(geometry):
    return assemble(geometry, triangulate(64, 32, geometry.domain), (0.05, 0.05))


def test_default_heaters_have_power_80(geometry):
    assert geometry.heater_boxes
    assert all(geometry.heater_value(b) == 80.0 for b in geometry.heater_boxes)


def test_default_fixed_boxes_have_conductivity_5e_3(geometry):
    fixed = [b for b in geometry.conductivity_boxes if b.group is None]
    assert fixed
    assert all(b.value == 5.0e-3 for b in fixed)


def test_default_parameters_are_walls_and_doors(geometry):
    assert geometry.parameters == ("walls", "doors")


def test_background_conductivity_outside_boxes(geometry):
    rng = np.random.default_rng(0)
    x0, y0, x1, y1 = geometry.domain
    found = 0
    for x, y in zip(rng.uniform(x0, x1, 200), rng.uniform(y0, y1, 200)):
        if not any(b.contains(x, y) for b in geometry.conductivity_boxes):
            assert geometry.conductivity_at(x, y) == 0.5
            found += 1
    assert found > 0


def test_group_box_needs_parameter(geometry):
    box = next(b for b in geometry.conductivity_boxes if b.group == "walls")
    x, y = 0.5 * (box.x0 + box.x1), 0.5 * (box.y0 + box.y1)
    assert geometry.conductivity_at(x, y, mu=(0.07, 0.02)) == 0.07
    with pytest.raises(ValueError):
        geometry.conductivity_at(x, y)


@pytest.mark.parametrize("body, message", [
    ("[b]\ntype = roof\nx0 = 0\ny0 = 0\nx1 = 1\ny1 = 1\nvalue = 1\n", "unknown box type"),
    ("[b]\ntype = wall\nx0 = 0\ny0 = 0\nx1 = 1\ny1 = 1\n", "exactly one"),
    ("[b]\ntype = wall\nx0 = 0\ny0 = 0\nx1 = 3\ny1 = 1\nvalue = 1\n", "inside the domain"),
    ("[b]\ntype = wall\nx0 = 0\ny0 = 0\nx1 = 1\ny1 = 1\ngroup = roof\n", "not listed"),
    ("[b]\ntype = wall\nx0 = 0\ny0 = 0\nx1 = 1\ny1 = 1\nvalue = 1\n"
     "[c]\ntype = wall\nx0 = 0.5\ny0 = 0\nx1 = 1.5\ny1 = 1\nvalue = 2\n", "overlap"),
])
def test_layout_errors(tmp_path, body, message):
    head = "[domain]\nx0 = 0\ny0 = 0\nx1 = 2\ny1 = 1\nparameters = walls\n"
    path = tmp_path / "bad.layout"
    path.write_text(head + body)
    with pytest.raises(LayoutError, match=message):
        build_geometry(path)


def test_layout_needs_domain(tmp_path):
    path = tmp_path / "bad.layout"
    path.write_text("[b]\ntype = wall\n")
    with pytest.raises(LayoutError):
        build_geometry(path)


def test_triangulate_small_counts():
    mesh = triangulate(2, 1)
    assert mesh.nodes.shape[0] == 6
    assert mesh.triangles.shape[0] == 4


def test_triangulate_desk_node_count():
    assert triangulate(64, 32).nodes.shape[0] == 2145


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(1, 12), ny=st.integers(1, 12))
def test_triangulation_invariants(nx, ny):
    mesh = triangulate(nx, ny, (0.0, 0.0, 2.0, 1.0))
    assert mesh.nodes.shape[0] == (nx + 1) * (ny + 1)
    assert mesh.triangles.shape[0] == 2 * nx * ny
    areas = mesh.areas()
    assert np.all(areas > 0)
    assert np.sum(areas) == pytest.approx(2.0, rel=1e-12)
    assert mesh.free.size == max(nx - 1, 0) * max(ny - 1, 0)


def test_triangulate_rejects_empty():
    with pytest.raises(ValueError):
        triangulate(0, 3)


def test_forms_symmetric_and_semidefinite(desk_forms):
    rng = np.random.default_rng(0)
    for Aq in desk_forms.stiffness + [desk_forms.mass, desk_forms.output_product]:
        assert is_symmetric(Aq, rtol=1e-13)
        for _ in range(3):
            v = rng.standard_normal(Aq.shape[0])
            assert v @ (Aq @ v) >= -1e-12 * abs(Aq).max() * (v @ v)


def test_energy_matrix_positive_definite(desk_forms):
    rng = np.random.default_rng(1)
    for _ in range(5):
        v = rng.standard_normal(desk_forms.energy.shape[0])
        assert v @ (desk_forms.energy @ v) > 0


def test_affine_coefficients(desk_forms):
    assert len(desk_forms.loads) == 1
    rng = np.random.default_rng(2)
    for mu in rng.uniform(0.01, 0.1, size=(5, 2)):
        assert np.all(desk_forms.theta_a(mu) > 0)
        A = desk_forms.A(mu)
        direct = sum(t * Aq for t, Aq in zip(desk_forms.theta_a(mu), desk_forms.stiffness))
        assert abs(A - direct).max() <= 1e-14 * abs(A).max()


def test_energy_product_is_a_at_reference(desk_forms):
    assert abs(desk_forms.energy - desk_forms.A((0.05, 0.05))).max() == 0.0


def test_derivative_forms_by_linearity(desk_forms):
    mu = np.array([0.03, 0.08])
    h = 1e-3
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (desk_forms.A(mu + e) - desk_forms.A(mu - e)) / (2 * h)
        assert abs(fd - desk_forms.dA(mu, i)).max() <= 1e-10 * abs(fd).max()
        assert not np.any(desk_forms.df(mu, i))


def test_mesh_too_coarse_for_a_parameter_group(geometry):
    mesh = triangulate(8, 4, geometry.domain)
    with pytest.raises(LayoutError):
        assemble(geometry, mesh, (0.05, 0.05))


def test_output_product_is_weighted_mass(tiny_forms):
    ratio = tiny_forms.output_product.toarray() / np.where(tiny_forms.mass.toarray() != 0,
                                                          tiny_forms.mass.toarray(), np.nan)
    np.testing.assert_allclose(ratio[np.isfinite(ratio)], 5000.0)


def test_heater_covering_domain_loads_every_free_node(tiny_forms):
    assert np.all(tiny_forms.loads[0] > 0)
