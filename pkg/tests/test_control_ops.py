from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import quad

from bvwave.control_ops import (
    ComponentMeasure,
    MeasureControl,
    PiecewiseLinear,
    PiecewiseQuadratic,
    StepFunction,
    apply_B,
    apply_B_star,
    compute_p1,
    compute_z,
    dual_certificate,
    global_max_abs,
    kkt_certificate,
    l1_distance,
    recover_control,
)
from bvwave.errors import ControlError
from bvwave.mesh_fem import build_uniform_mesh
from bvwave.wave_solver import SpaceTimeField, TimeGrid, separable_load

T = 2.0


def _reference_control() -> MeasureControl:
    return MeasureControl(
        (ComponentMeasure(np.array([1.0 / 3.0, 1.0, 5.0 / 3.0]), np.array([1.0, -1.0, 1.0])),),
        np.zeros(1),
        T,
    )


def _random_control(rng, n_atoms=4):
    times = np.sort(rng.uniform(0.05, T - 0.05, n_atoms))
    return MeasureControl((ComponentMeasure(times, rng.standard_normal(n_atoms)),), rng.standard_normal(1), T)


def test_reference_control_maps_to_alternating_steps():
    (u,) = apply_B(_reference_control())
    np.testing.assert_allclose(u.values, [-0.5, 0.5, -0.5, 0.5])
    assert u.mean() == pytest.approx(0.0, abs=1e-15)
    assert u.total_variation() == pytest.approx(3.0)
    assert u(1.0 / 3.0) == pytest.approx(-0.5)
    assert u(0.5) == pytest.approx(0.5)


def test_offset_is_the_mean_of_the_step_function():
    rng = np.random.default_rng(0)
    control = _random_control(rng)
    (u,) = apply_B(control)
    assert u.mean() == pytest.approx(control.offsets[0], abs=1e-14)
    assert u.total_variation() == pytest.approx(control.total_variation()[0])


def test_recover_control_inverts_apply_B():
    control = _random_control(np.random.default_rng(1))
    recovered = recover_control(apply_B(control))
    np.testing.assert_allclose(recovered.components[0].times, control.components[0].times)
    np.testing.assert_allclose(recovered.components[0].weights, control.components[0].weights, atol=1e-13)
    np.testing.assert_allclose(recovered.offsets, control.offsets, atol=1e-13)


@pytest.mark.parametrize(
    "times, weights",
    [
        ([0.0, 1.0], [1.0, 1.0]),
        ([1.0, T], [1.0, 1.0]),
        ([1.0, 0.5], [1.0, 1.0]),
    ],
)
def test_atoms_must_be_sorted_and_interior(times, weights):
    with pytest.raises(ControlError):
        MeasureControl((ComponentMeasure(np.array(times), np.array(weights)),), np.zeros(1), T)


def test_measure_validation():
    with pytest.raises(ControlError):
        ComponentMeasure(np.array([0.5]), np.array([np.nan]))
    with pytest.raises(ControlError):
        MeasureControl((ComponentMeasure.empty(),), np.zeros(2), T)


def test_pruned_drops_small_weights_and_serializes():
    control = MeasureControl((ComponentMeasure(np.array([0.5, 1.5]), np.array([1e-14, 2.0])),), np.zeros(1), T)
    pruned = control.pruned(1e-12)
    assert pruned.atom_count() == 1
    assert pruned.to_dict()["atoms"] == [{"component": 0, "time": 1.5, "weight": 2.0}]


def test_hat_integrals_are_exact():
    rng = np.random.default_rng(2)
    (u,) = apply_B(_random_control(rng))
    grid = TimeGrid(T, 7)
    integrals = u.hat_integrals(grid)
    for m, node in enumerate(grid.nodes):
        lo, hi = max(node - grid.tau, 0.0), min(node + grid.tau, T)

        def integrand(t, node=node):
            return u(t) * max(0.0, 1.0 - abs(t - node) / grid.tau)

        inside = [b for b in u.breakpoints if lo < b < hi] or None
        expected, _ = quad(integrand, lo, hi, points=inside, limit=200, epsabs=1e-14)
        assert integrals[m] == pytest.approx(expected, abs=1e-10)
    assert integrals.sum() == pytest.approx(u.integral(), abs=1e-13)


def test_l1_distance_of_a_shifted_atom():
    eps = 1e-3
    base = MeasureControl((ComponentMeasure(np.array([0.5, 1.2]), np.array([2.0, -1.0])),), np.zeros(1), T)
    shifted = MeasureControl((ComponentMeasure(np.array([0.5 + eps, 1.2]), np.array([2.0, -1.0])),), np.zeros(1), T)
    (u,), (w,) = apply_B(base), apply_B(shifted)
    expected, _ = quad(lambda t: abs(u(t) - w(t)), 0.0, T, points=[0.5, 0.5 + eps, 1.2], epsabs=1e-14)
    assert l1_distance(u, w) == pytest.approx(expected, rel=1e-9)
    assert l1_distance(u, u) == 0.0


def test_l1_distance_is_a_metric_on_random_steps():
    rng = np.random.default_rng(3)
    for _ in range(10):
        (a,), (b,), (c,) = (apply_B(_random_control(rng, n)) for n in (2, 3, 5))
        assert l1_distance(a, b) == pytest.approx(l1_distance(b, a))
        assert l1_distance(a, c) <= l1_distance(a, b) + l1_distance(b, c) + 1e-12


def test_B_star_is_the_adjoint_of_B():
    mesh = build_uniform_mesh(2)
    grid = TimeGrid.from_level(2)
    rng = np.random.default_rng(4)
    spatial_load = rng.standard_normal(mesh.n_interior)
    q = SpaceTimeField(grid, mesh, rng.standard_normal((grid.steps + 1, mesh.n_interior)))
    w_prime, totals = apply_B_star(q, spatial_load)
    np.testing.assert_allclose(w_prime.node_values()[0, [0, -1]], 0.0, atol=1e-12)
    for _ in range(5):
        control = _random_control(rng, 3)
        (u,) = apply_B(control)
        lhs = separable_load(u, spatial_load, grid, mesh).pair(q)
        atoms = control.components[0]
        rhs = float(atoms.weights @ w_prime(atoms.times)) + control.offsets[0] * totals[0]
        assert lhs == pytest.approx(rhs, rel=1e-11)


def test_p1_of_time_constant_adjoint():
    mesh = build_uniform_mesh(2)
    grid = TimeGrid(T, 5)
    v = np.random.default_rng(5).standard_normal(mesh.n_interior)
    load = np.random.default_rng(6).standard_normal(mesh.n_interior)
    p = SpaceTimeField(grid, mesh, np.tile(v, (grid.steps + 1, 1)))
    p1 = compute_p1(p, load)
    ts = np.linspace(0.0, T, 23)
    np.testing.assert_allclose(p1(ts), -(load @ v) * (T - ts), atol=1e-12)
    assert p1.continuity_mismatch() < 1e-13
    np.testing.assert_allclose(compute_z(p1)(ts), load @ v, atol=1e-12)


def test_p1_matches_a_fine_riemann_sum():
    mesh = build_uniform_mesh(2)
    grid = TimeGrid.from_level(2)
    rng = np.random.default_rng(7)
    p = SpaceTimeField(grid, mesh, rng.standard_normal((grid.steps + 1, mesh.n_interior)))
    load = rng.standard_normal(mesh.n_interior)
    p1 = compute_p1(p, load)
    for t in (0.0, 0.3, 1.1, 1.9):
        inside = [s for s in grid.nodes if t < s < T] or None
        expected, _ = quad(lambda s: load @ p.at_time(s), t, T, points=inside, limit=200)
        assert p1(t) == pytest.approx(-expected, abs=1e-11)


def _random_quadratic(rng, steps=16):
    nodes = np.linspace(0.0, T, steps + 1)
    return PiecewiseQuadratic.antiderivative_from_end(nodes, rng.standard_normal((1, steps + 1)))


def test_global_max_abs_matches_a_dense_grid():
    rng = np.random.default_rng(8)
    ts = np.linspace(0.0, T, 1_000_001)
    for _ in range(50):
        p1 = _random_quadratic(rng)
        t_star, value = global_max_abs(p1)
        dense = float(np.max(np.abs(p1(ts))))
        assert abs(p1(t_star)) == pytest.approx(value, abs=1e-15)
        assert value >= dense - 1e-12
        assert value - dense <= 1e-9


def test_global_max_abs_prefers_the_earliest_tie():
    nodes = np.arange(5.0)
    coeffs = np.zeros((1, 4, 3))
    coeffs[0, :, 0] = [0.0, 1.0, 0.0, 1.0]
    coeffs[0, :, 1] = [1.0, -1.0, 1.0, -1.0]
    t_star, value = global_max_abs(PiecewiseQuadratic(nodes, coeffs))
    assert (t_star, value) == (1.0, 1.0)


def test_dual_certificate_vanishes_at_both_ends():
    p1 = _random_quadratic(np.random.default_rng(9))
    eta = dual_certificate(p1)
    assert eta(0.0) == pytest.approx(0.0, abs=1e-14)
    assert eta(T) == pytest.approx(0.0, abs=1e-14)
    assert eta(0.7) == pytest.approx(p1(0.7) - (1.0 - 0.7 / T) * p1(0.0))


def test_step_function_helpers():
    u = StepFunction.from_jumps([1.5, 0.5], [1.0, 2.0], 0.0, T)
    np.testing.assert_allclose(u.breakpoints, [0.0, 0.5, 1.5, T])
    times, heights = u.jumps()
    np.testing.assert_allclose(times, [0.5, 1.5])
    np.testing.assert_allclose(heights, [2.0, 1.0])
    assert StepFunction.constant(3.0, T).integral() == 6.0


def _hat_p1(alpha):
    nodes = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
    values = np.array([0.0, alpha, 0.0, -alpha, 0.0])
    coeffs = np.zeros((1, 4, 3))
    coeffs[0, :, 0] = values[:-1]
    coeffs[0, :, 1] = np.diff(values) / 0.5
    return PiecewiseQuadratic(nodes, coeffs)


def test_kkt_certificate_accepts_aligned_atoms():
    alpha = 0.01
    control = MeasureControl((ComponentMeasure(np.array([0.5, 1.5]), np.array([1.0, -2.0])),), np.zeros(1), T)
    report = kkt_certificate(_hat_p1(alpha), control, [alpha])
    assert report.holds
    assert report.sup_ratio[0] == pytest.approx(1.0)
    assert report.to_dict()["holds"] is True


def test_kkt_certificate_rejects_misaligned_atoms():
    alpha = 0.01
    control = MeasureControl((ComponentMeasure(np.array([0.5]), np.array([-1.0])),), np.zeros(1), T)
    report = kkt_certificate(_hat_p1(alpha), control, [alpha])
    assert report.sign_aligned == (False,)
    assert not report.holds
    assert not kkt_certificate(_hat_p1(2.0 * alpha), MeasureControl.zeros(1, T), [alpha]).holds


def test_switching_function_roots_are_its_sign_changes():
    p1 = _random_quadratic(np.random.default_rng(10), steps=32)
    z = compute_z(p1)
    roots = z.roots()
    ts = np.linspace(0.0, T, 200_001)
    values = z(ts)
    changes = np.flatnonzero(values[:-1] * values[1:] < 0.0)
    assert len(roots) == len(changes)
    np.testing.assert_allclose(z(roots), 0.0, atol=1e-12)
    np.testing.assert_allclose(roots, ts[changes], atol=2.0 * (ts[1] - ts[0]))
    # roots of z are the interior extrema of p1
    np.testing.assert_allclose(np.sort(p1.critical_points()), roots, atol=1e-12)


def test_roots_include_nodes_where_the_value_vanishes():
    z = PiecewiseLinear(np.array([0.0, 1.0, 2.0]), np.array([[1.0, 0.0, -1.0]]))
    np.testing.assert_allclose(z.roots(), [1.0])
