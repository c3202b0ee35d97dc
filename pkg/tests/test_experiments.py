from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import quad

from bvwave.control_ops import ComponentMeasure, MeasureControl
from bvwave.errors import ConfigurationError, GridMismatchError
from bvwave.experiments import (
    CSV_COLUMNS,
    REFERENCE_ALPHA,
    CosineSeries,
    LevelResult,
    RateTable,
    build_discrete_problem,
    build_reference_scenario,
    build_zero_scenario,
    compute_reference_state,
    control_errors,
    convergence_study,
    corrected_psi,
    cost_error,
    fit_rates,
    match_radius,
    prolongate_field,
    reference_cost,
    richardson_reference_error,
    state_l2_error,
)
from bvwave.mesh_fem import build_uniform_mesh
from bvwave.pdap import PdapSolver
from bvwave.wave_solver import SpaceTimeField, TimeGrid
from helpers import read_csv

T = 2.0


def _random_field(k, steps, seed):
    mesh = build_uniform_mesh(k)
    grid = TimeGrid(T, steps)
    rng = np.random.default_rng(seed)
    return SpaceTimeField(grid, mesh, rng.standard_normal((steps + 1, mesh.n_interior)))


def _row(k, error, converged=True):
    return LevelResult(
        k=k,
        tau=2.0**-k,
        h=2.0 * math.sqrt(2.0) * 2.0**-k,
        state_l2=error,
        control_l1=error,
        jump_pos_max=error,
        jump_amp_max=error,
        offset_err=error,
        cost_err=error,
        tv_err=error,
        pdap_iters=3,
        converged=converged,
    )


def test_cosine_series_integrals_are_exact():
    series = CosineSeries(np.array([1.3, -0.4]), np.array([0.7 * math.pi, 4.5 * math.pi]))
    grid = TimeGrid(T, 9)
    hats = series.hat_integrals(grid)
    for m, node in enumerate(grid.nodes):
        lo, hi = max(node - grid.tau, 0.0), min(node + grid.tau, T)
        expected, _ = quad(
            lambda t: float(series(t)) * max(0.0, 1.0 - abs(t - node) / grid.tau),
            lo,
            hi,
            points=[node] if lo < node < hi else None,
            epsabs=1e-14,
        )
        assert hats[m] == pytest.approx(expected, abs=1e-12)
    norm2, _ = quad(lambda t: float(series(t)) ** 2, 0.0, T, limit=200)
    assert series.norm2() == pytest.approx(norm2, rel=1e-10)
    assert series.primitive(0.0) == 0.0
    primitive, _ = quad(lambda t: float(series(t)), 0.0, 1.3)
    assert series.primitive(1.3) == pytest.approx(primitive, rel=1e-10)


def test_wave_operator_matches_finite_differences():
    psi = corrected_psi(REFERENCE_ALPHA)
    chi = psi.wave_operator(0.5 * math.pi**2)
    h = 1e-4
    for t in (0.2, 0.9, 1.6):
        second = (psi(t + h) - 2.0 * psi(t) + psi(t - h)) / h**2
        assert chi(t) == pytest.approx(second + 0.5 * math.pi**2 * psi(t), rel=1e-5, abs=1e-6)
    assert psi(T) == pytest.approx(0.0, abs=1e-15)


def test_reference_adjoint_takes_the_regularization_value_at_the_jumps():
    alpha = REFERENCE_ALPHA
    data, reference = build_reference_scenario()
    assert reference.kkt_consistent
    np.testing.assert_allclose(reference.p1(np.array([1.0 / 3.0, 1.0, 5.0 / 3.0])), [alpha, -alpha, alpha], rtol=1e-12)
    np.testing.assert_allclose(reference.p1(np.array([0.0, T])), 0.0, atol=1e-15)
    ts = np.linspace(0.0, T, 4001)
    np.testing.assert_allclose(reference.p1(ts), alpha * np.sin(1.5 * math.pi * ts) ** 3, atol=1e-15)
    np.testing.assert_allclose(reference.steps[0].values, [-0.5, 0.5, -0.5, 0.5])
    chi_norm2 = data.correction.norm2()
    assert reference.cost == pytest.approx(0.5 * chi_norm2 + 3.0 * alpha)


def test_reference_adjoint_derivative_is_the_adjoint_time_factor():
    _, reference = build_reference_scenario()
    h = 1e-5
    for t in (0.1, 0.5, 1.2, 1.9):
        slope = (reference.p1(t + h) - reference.p1(t - h)) / (2.0 * h)
        assert slope == pytest.approx(reference.spatial_norm2 * reference.adjoint_factor(t), rel=1e-6, abs=1e-9)


def test_reference_cost_on_a_level_matches_the_exact_cost():
    data, reference = build_reference_scenario()
    mesh = build_uniform_mesh(4)
    state = SpaceTimeField.zeros(TimeGrid.from_level(4), mesh)
    assert reference_cost(data, reference, state) == pytest.approx(reference.cost, rel=1e-5)
    zero_data, zero_reference = build_zero_scenario()
    assert reference_cost(zero_data, zero_reference, state) == 0.0


def test_printed_variant_is_flagged_inconsistent():
    _, reference = build_reference_scenario("printed")
    assert not reference.kkt_consistent
    with pytest.raises(ConfigurationError):
        build_reference_scenario("exact")
    with pytest.raises(ConfigurationError):
        build_reference_scenario(alpha=0.0)


def test_zero_scenario_reference_state_vanishes():
    data, reference = build_zero_scenario()
    assert reference.cost == 0.0
    state = compute_reference_state(data, 3)
    assert not np.any(state.values)


def test_reference_state_respects_the_memory_guard():
    data, _ = build_reference_scenario()
    with pytest.raises(ConfigurationError):
        compute_reference_state(data, 4, max_entries=10)
    with pytest.raises(ConfigurationError):
        compute_reference_state(data, 4, k_ref_time=3)


def test_state_error_against_zero_is_the_space_time_norm():
    field = _random_field(1, 2, 0)
    zero = SpaceTimeField.zeros(field.grid, field.mesh)
    phi_norm2 = float(field.mesh.mass.toarray()[0, 0])
    expected, _ = quad(lambda t: float(field.at_time(t)[0]) ** 2, 0.0, T, points=[1.0])
    assert state_l2_error(field, zero) == pytest.approx(math.sqrt(phi_norm2 * expected), rel=1e-12)
    assert state_l2_error(field, field) == 0.0


def test_state_error_is_a_metric():
    a, b, c = (_random_field(2, 4, seed) for seed in range(3))
    b = SpaceTimeField(a.grid, a.mesh, b.values)
    c = SpaceTimeField(a.grid, a.mesh, c.values)
    assert state_l2_error(a, b) == pytest.approx(state_l2_error(b, a))
    assert state_l2_error(a, c) <= state_l2_error(a, b) + state_l2_error(b, c) + 1e-12


def test_prolongation_keeps_coarse_values_and_the_norm():
    coarse = _random_field(2, 4, 4)
    fine_mesh = build_uniform_mesh(3)
    fine_grid = TimeGrid(T, 8)
    fine = prolongate_field(coarse, fine_mesh, fine_grid)
    points = coarse.mesh.nodes[coarse.mesh.interior]
    np.testing.assert_allclose(
        fine_mesh.evaluate(fine.at_time(0.5), points[:, 0], points[:, 1]), coarse.at_time(0.5), atol=1e-13
    )
    zero_coarse = SpaceTimeField.zeros(coarse.grid, coarse.mesh)
    assert state_l2_error(fine, zero_coarse) == pytest.approx(state_l2_error(coarse, zero_coarse), rel=1e-12)


def test_richardson_estimate_is_a_third_of_the_level_gap():
    coarse = _random_field(2, 4, 7)
    fine = _random_field(3, 8, 8)
    assert richardson_reference_error(fine, coarse) == pytest.approx(state_l2_error(fine, coarse) / 3.0)
    assert richardson_reference_error(fine, fine) == 0.0


def test_cost_error_is_the_distance_to_the_reference_cost():
    _, reference = build_reference_scenario()
    assert cost_error(reference, reference.cost) == 0.0
    assert cost_error(reference, reference.cost + 0.25) == pytest.approx(0.25)
    assert cost_error(reference, reference.cost - 0.25) == pytest.approx(0.25)


def test_state_error_rejects_crossed_refinement():
    a = _random_field(3, 4, 5)
    b = _random_field(2, 8, 6)
    with pytest.raises(GridMismatchError):
        state_l2_error(a, b)


def test_control_errors_of_the_exact_control_vanish():
    _, reference = build_reference_scenario()
    errors = control_errors(reference, reference.control)
    assert errors.control_l1 == 0.0
    assert errors.jump_pos_max == 0.0
    assert errors.jump_amp_max == 0.0
    assert errors.count_ok
    assert errors.missing == 0
    assert match_radius(reference.control) == pytest.approx(1.0 / 6.0)


def test_control_errors_of_a_shifted_jump():
    _, reference = build_reference_scenario()
    eps = 1e-3
    moved = MeasureControl(
        (ComponentMeasure(np.array([1.0 / 3.0 + eps, 1.0, 5.0 / 3.0]), np.array([1.0, -1.0, 1.0])),),
        np.zeros(1),
        T,
    )
    errors = control_errors(reference, moved)
    assert errors.jump_pos_max == pytest.approx(eps)
    assert errors.jump_amp_max == pytest.approx(0.0, abs=1e-15)
    assert errors.count_ok
    assert errors.control_l1 == pytest.approx(2.0 * eps * (1.0 - eps / T), rel=1e-9)


def test_control_errors_flag_missing_and_extra_atoms():
    _, reference = build_reference_scenario()
    split = MeasureControl(
        (ComponentMeasure(np.array([0.3, 0.36, 1.0, 1.6]), np.array([0.5, 0.5, -1.0, 1.0])),), np.zeros(1), T
    )
    errors = control_errors(reference, split)
    assert errors.atoms_per_jump == (2, 1, 1)
    assert not errors.count_ok
    assert (errors.unmatched, errors.missing) == (1, 0)
    assert errors.jump_positions[0] == pytest.approx(0.36 - 1.0 / 3.0)
    assert errors.jump_amplitudes[0] == pytest.approx(0.5 + 0.5)
    assert errors.jump_positions[2] == pytest.approx(5.0 / 3.0 - 1.6)

    missing = MeasureControl((ComponentMeasure(np.array([1.0, 1.9]), np.array([-1.0, 0.2])),), np.zeros(1), T)
    errors = control_errors(reference, missing)
    assert not errors.count_ok
    assert (errors.unmatched, errors.missing) == (1, 2)
    assert errors.jump_positions[0] == pytest.approx(1.0 / 6.0)
    assert errors.jump_amplitudes[2] == pytest.approx(1.0 + 0.2)


def test_fit_rates_handles_invalid_rows():
    assert fit_rates([3, 4], [4.0, 1.0], [True, True]) == [pytest.approx(2.0)]
    assert fit_rates([3, 5], [16.0, 1.0], [True, True]) == [pytest.approx(2.0)]
    assert math.isnan(fit_rates([3, 3], [4.0, 1.0], [True, True])[0])
    assert math.isnan(fit_rates([3, 4], [4.0, 1.0], [True, False])[0])
    assert math.isnan(fit_rates([3, 4], [0.0, 1.0], [True, True])[0])
    assert fit_rates([3], [1.0], [True]) == []


def test_rate_table_csv_is_deterministic(tmp_path):
    table = RateTable([_row(3, 0.1), _row(4, 0.025)], reference_error=1e-4)
    first = table.to_csv(tmp_path / "a.csv").read_bytes()
    second = table.to_csv(tmp_path / "b.csv").read_bytes()
    assert first == second
    rows = read_csv(tmp_path / "a.csv")
    assert list(rows[0]) == list(CSV_COLUMNS)
    assert float(rows[1]["state_l2"]) == 0.025
    assert rows[0]["converged"] == "1"
    assert table.rates()["state_l2"] == [pytest.approx(2.0)]
    assert table.accepted()
    assert "set logscale xy" in table.gnuplot_script("rates.csv")


def test_rate_table_acceptance_rules():
    assert not RateTable([_row(3, 0.1)], reference_error=1e-4).accepted()
    assert not RateTable([_row(3, 0.1), _row(4, 0.025)], reference_error=0.01).accepted()
    assert not RateTable([_row(3, 0.1), _row(4, 0.025, converged=False)], reference_error=1e-4).accepted()
    printed = RateTable([_row(3, 0.1), _row(4, 0.025)], reference_error=1e-4, phi_variant="printed")
    assert not printed.accepted()
    summary = RateTable([_row(3, 0.1)]).summary()
    assert summary["rates"]["state_l2"] == []
    assert summary["reference_error"] is None


def test_convergence_study_validates_levels():
    data, reference = build_reference_scenario()
    with pytest.raises(ConfigurationError):
        convergence_study([4, 3], 6, data, reference)
    with pytest.raises(ConfigurationError):
        convergence_study([3, 4], 4, data, reference)


@pytest.mark.slow
def test_reference_state_converges_towards_finer_levels():
    data, _ = build_reference_scenario()
    states = [compute_reference_state(data, k) for k in (3, 4, 5)]
    coarse_gap = state_l2_error(states[1], states[0])
    fine_gap = state_l2_error(states[2], states[1])
    assert coarse_gap / fine_gap > 2.5


@pytest.mark.slow
def test_convergence_study_reaches_second_order():
    data, reference = build_reference_scenario()
    table = convergence_study([5, 6], 7, data, reference)
    assert [row.k for row in table.rows] == [5, 6]
    assert all(row.count_ok for row in table.rows)
    rates = table.rates()
    for key in ("state_l2", "control_l1", "jump_amp_max"):
        assert rates[key][0] >= 1.7, key
    assert table.rows[1].jump_amp_max < table.rows[0].jump_amp_max
    assert table.above_noise()


@pytest.mark.slow
def test_convergence_study_is_deterministic(tmp_path):
    data, reference = build_reference_scenario()
    first = convergence_study([3, 4], 5, data, reference).to_csv(tmp_path / "first.csv")
    second = convergence_study([3, 4], 5, data, reference).to_csv(tmp_path / "second.csv")
    assert first.read_bytes() == second.read_bytes()


@pytest.mark.slow
def test_discrete_certificate_of_the_reference_control_approaches_the_exact_one():
    data, reference = build_reference_scenario()
    ref_state = compute_reference_state(data, 6)
    ts = np.linspace(0.0, T, 4001)
    exact = reference.p1(ts)
    errors = []
    for k in (4, 5):
        problem = build_discrete_problem(data, ref_state, k)
        eta = PdapSolver(problem).diagnose(reference.control).eta
        errors.append(float(np.max(np.abs(eta(ts) - exact))) / REFERENCE_ALPHA)
    assert errors[1] < errors[0]
    assert errors[1] <= 0.02
