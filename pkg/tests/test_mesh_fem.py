from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg

from bvwave.errors import ConfigurationError, GridMismatchError
from bvwave.experiments import cosine_bump
from bvwave.mesh_fem import (
    SEVEN_POINT,
    THREE_POINT,
    SpatialFunction,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_uniform_mesh,
    get_rule,
    l2_error,
    prolongation_matrix,
    ritz_projection,
)


def _integrate(mesh, rule, f):
    x1, x2 = mesh.quadrature_points(rule)
    return float(np.sum(mesh.signed_areas[:, None] * rule.weights[None, :] * f(x1, x2)))


def test_level_one_mesh_has_single_interior_node():
    mesh = build_uniform_mesh(1)
    assert len(mesh.nodes) == 9
    assert len(mesh.triangles) == 8
    assert mesh.n_interior == 1
    assert mesh.h == pytest.approx(math.sqrt(2.0))
    np.testing.assert_allclose(mesh.nodes[mesh.interior[0]], [0.0, 0.0])


@pytest.mark.parametrize("k", [0, 11, 2.5, True])
def test_invalid_levels_are_rejected(k):
    with pytest.raises(ConfigurationError):
        build_uniform_mesh(k)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_mesh_size_follows_level(k):
    mesh = build_uniform_mesh(k)
    assert mesh.h == pytest.approx(2.0 * math.sqrt(2.0) * 2.0**-k)
    assert mesh.n_interior == (2**k - 1) ** 2
    assert np.all(mesh.signed_areas > 0.0)


def test_mass_and_stiffness_basic_identities():
    mesh = build_uniform_mesh(3)
    full_mass = assemble_mass(mesh, full=True)
    full_stiff = assemble_stiffness(mesh, full=True)
    assert full_mass.sum() == pytest.approx(4.0, rel=1e-14)
    np.testing.assert_allclose(full_stiff @ np.ones(len(mesh.nodes)), 0.0, atol=1e-12)
    for matrix in (mesh.mass, mesh.stiffness):
        assert abs(matrix - matrix.T).max() == 0.0
    assert np.all(np.linalg.eigvalsh(mesh.stiffness.toarray()) > 0.0)


@pytest.mark.parametrize(
    "rule, f, exact",
    [
        (THREE_POINT, lambda x1, x2: x1**2, 4.0 / 3.0),
        (THREE_POINT, lambda x1, x2: x1 * x2 + x2**2, 4.0 / 3.0),
        (SEVEN_POINT, lambda x1, x2: x1**4, 4.0 / 5.0),
        (SEVEN_POINT, lambda x1, x2: x1**2 * x2**2, 4.0 / 9.0),
        (SEVEN_POINT, lambda x1, x2: x1**3 * x2**2 + x2**4, 4.0 / 5.0),
    ],
)
def test_quadrature_rules_are_exact_up_to_their_degree(rule, f, exact):
    mesh = build_uniform_mesh(1)
    assert _integrate(mesh, rule, f) == pytest.approx(exact, rel=1e-13)


def test_rule_lookup():
    assert get_rule("seven_point") is SEVEN_POINT
    assert SEVEN_POINT.weights.sum() == pytest.approx(1.0)
    with pytest.raises(ConfigurationError):
        get_rule("gauss")


def test_gradient_is_required_for_ritz_projection_of_functions():
    f = SpatialFunction(lambda x1, x2: x1 * x2)
    with pytest.raises(ConfigurationError):
        f.grad(np.zeros(2), np.zeros(2))


def test_evaluate_reproduces_nodal_values_and_averages_on_centroids():
    mesh = build_uniform_mesh(3)
    rng = np.random.default_rng(0)
    coeffs = rng.standard_normal(mesh.n_interior)
    points = mesh.nodes[mesh.interior]
    np.testing.assert_allclose(mesh.evaluate(coeffs, points[:, 0], points[:, 1]), coeffs, atol=1e-13)

    full = mesh.to_full(coeffs)
    centroids = mesh.nodes[mesh.triangles].mean(axis=1)
    expected = full[mesh.triangles].mean(axis=1)
    np.testing.assert_allclose(mesh.evaluate(coeffs, centroids[:, 0], centroids[:, 1]), expected, atol=1e-13)


def test_locate_rejects_points_outside_domain():
    mesh = build_uniform_mesh(2)
    with pytest.raises(GridMismatchError):
        mesh.locate(np.array([1.5]), np.array([0.0]))


def test_ritz_projection_of_coefficients_is_identity():
    mesh = build_uniform_mesh(3)
    coeffs = np.random.default_rng(1).standard_normal(mesh.n_interior)
    np.testing.assert_allclose(ritz_projection(mesh, coeffs), coeffs, atol=1e-12)


def test_ritz_projection_converges_quadratically_in_l2():
    g = cosine_bump()
    errors = []
    for k in (3, 4, 5):
        mesh = build_uniform_mesh(k)
        errors.append(l2_error(mesh, ritz_projection(mesh, g), g))
    rates = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    assert all(1.8 <= r <= 2.3 for r in rates)


def test_l2_norm_of_bump_is_one():
    mesh = build_uniform_mesh(5)
    assert l2_error(mesh, np.zeros(mesh.n_interior), cosine_bump()) == pytest.approx(1.0, rel=1e-6)


def test_load_of_constant_integrates_basis_functions():
    mesh = build_uniform_mesh(3)
    load = assemble_load(mesh, lambda x1, x2: np.ones_like(x1), THREE_POINT, full=True)
    assert load.sum() == pytest.approx(4.0, rel=1e-14)
    np.testing.assert_allclose(load, assemble_mass(mesh, full=True) @ np.ones(len(mesh.nodes)), atol=1e-14)


def test_prolongation_is_exact_for_nested_meshes():
    coarse, fine = build_uniform_mesh(2), build_uniform_mesh(4)
    coeffs = np.random.default_rng(2).standard_normal(coarse.n_interior)
    prolonged = prolongation_matrix(coarse, fine) @ coeffs
    points = fine.nodes[fine.interior]
    np.testing.assert_allclose(prolonged, coarse.evaluate(coeffs, points[:, 0], points[:, 1]), atol=1e-13)

    coarse_points = coarse.nodes[coarse.interior]
    np.testing.assert_allclose(fine.evaluate(prolonged, coarse_points[:, 0], coarse_points[:, 1]), coeffs, atol=1e-13)


def test_prolongation_requires_finer_target():
    with pytest.raises(GridMismatchError):
        prolongation_matrix(build_uniform_mesh(3), build_uniform_mesh(2))


def test_level_one_matrices_are_scalars():
    mesh = build_uniform_mesh(1)
    np.testing.assert_allclose(mesh.stiffness.toarray(), [[4.0]], atol=1e-14)
    np.testing.assert_allclose(mesh.mass.toarray(), [[0.5]], atol=1e-14)


def test_smallest_eigenvalue_approaches_the_laplacian_one_from_above():
    exact = math.pi**2 / 2.0
    smallest = []
    for k in (3, 4):
        mesh = build_uniform_mesh(k)
        smallest.append(scipy.linalg.eigh(mesh.stiffness.toarray(), mesh.mass.toarray(), eigvals_only=True)[0])
    assert exact < smallest[1] < smallest[0]
    assert smallest[1] == pytest.approx(exact, rel=3e-2)


def test_load_of_bump_integrates_to_its_mean():
    mesh = build_uniform_mesh(4)
    load = assemble_load(mesh, cosine_bump(), full=True)
    assert load.sum() == pytest.approx(16.0 / math.pi**2, rel=1e-5)


def test_meshes_are_nested():
    coarse, fine = build_uniform_mesh(3), build_uniform_mesh(4)
    fine_nodes = {tuple(np.round(p, 12)) for p in fine.nodes}
    assert all(tuple(np.round(p, 12)) in fine_nodes for p in coarse.nodes)
    interior = {tuple(np.round(p, 12)) for p in fine.nodes[fine.interior]}
    assert all(tuple(np.round(p, 12)) in interior for p in coarse.nodes[coarse.interior])


def test_stiffness_factor_is_cached():
    mesh = build_uniform_mesh(3)
    assert mesh.stiffness_factor is mesh.stiffness_factor
    assert mesh.mass_factor is mesh.mass_factor
    rhs = np.ones(mesh.n_interior)
    np.testing.assert_allclose(mesh.stiffness @ mesh.stiffness_factor.solve(rhs), rhs, atol=1e-12)
