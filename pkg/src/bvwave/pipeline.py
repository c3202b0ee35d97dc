"""High level orchestration of the solve, pdap and convergence commands."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .config import PDAP_SCENARIOS, RunConfig, dump_config, ensure_directories
from .control_ops import apply_B, kkt_certificate
from .errors import ConfigurationError, NonConvergenceError
from .experiments import (
    build_discrete_problem,
    build_reference_scenario,
    build_zero_scenario,
    compute_reference_state,
    control_errors,
    convergence_study,
    random_load,
    reference_cost,
    standing_wave_error,
    standing_wave_field,
)
from .mesh_fem import build_uniform_mesh
from .pdap import PdapSolver, run_pdap as optimize, settings_to_dict
from .report import build_convergence_report
from .utils import save_field, save_json, write_csv
from .wave_solver import TimeGrid, WaveSolver, stability_gate, stability_norm_check

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "cost", "max_violation", "certificate_violation", "gap", "atoms", "active", "solves")


def _scenario(config: RunConfig):
    scenario = config.scenario
    if scenario.name == "zero":
        return build_zero_scenario(scenario.alpha)
    return build_reference_scenario(scenario.phi, scenario.alpha)


def run_solve(config: RunConfig) -> dict:
    """Single forward solve of the configured scenario; writes field.npz and summary.json."""
    out = ensure_directories(config.output_dir)["solve"]
    _cleanup_directory(out, suffix=".npz")
    params = config.discretization.scheme()
    k = config.discretization.level
    name = config.scenario.name
    summary: dict = {"command": "solve", "scenario": name, "level": k}

    if name == "standing_wave":
        field = standing_wave_field(k, params)
        summary["standing_wave_error"] = standing_wave_error(field)
        y0 = field.values[0]
        stability = stability_norm_check(field, y0=y0)
        logger.info("Onda estacionária k=%d: erro %.6e", k, summary["standing_wave_error"])
    elif name == "reference":
        data, _ = build_reference_scenario(config.scenario.phi, config.scenario.alpha)
        field = compute_reference_state(data, k, None, params)
        f_norm = sum(u.l1_norm() * n**0.5 for u, n in zip(apply_B(data.reference_control), data.spatial_norm2))
        stability = stability_norm_check(field, f_l1_l2=f_norm)
    else:
        mesh = build_uniform_mesh(k)
        grid = TimeGrid.from_level(k, config.discretization.final_time)
        solver = WaveSolver(mesh, grid, params)
        load = random_load(grid, mesh, config.output.seed) if name == "random" else None
        field = solver.solve_forward(load)
        stability = stability_norm_check(field, f_l1_l2=load.l1_l2_norm() if load is not None else 0.0)

    gate = stability_gate(params, field.grid, field.mesh)
    save_field(out / "field.npz", field.values, field.mesh.nodes[field.mesh.interior], field.grid.nodes)
    summary.update(
        {
            "tau": field.grid.tau,
            "h": field.mesh.h,
            "sigma": params.sigma,
            "gate": gate.to_dict(),
            "max_slice_norm": float(np.max(field.slice_norms())),
            "stability": None
            if stability is None
            else {"state_norm": stability.state_norm, "data_norm": stability.data_norm, "ratio": stability.ratio},
        }
    )
    save_json(summary, out / "summary.json")
    dump_config(config, out / "config.yml")
    logger.info("Solução salva em %s", out)
    return summary


def run_pdap(config: RunConfig) -> dict:
    """PDAP on one level; writes summary.json and history.csv, raises on non-convergence afterwards."""
    if config.scenario.name not in PDAP_SCENARIOS:
        raise ConfigurationError(f"Scenario {config.scenario.name!r} is not available for pdap")
    out = ensure_directories(config.output_dir)["pdap"]
    disc = config.discretization
    if disc.k_ref <= disc.level:
        raise ConfigurationError(f"k_ref={disc.k_ref} must exceed the optimization level {disc.level}")
    params = config.discretization.scheme()
    data, reference = _scenario(config)
    ref_state = None
    if data.reference_control.atom_count() or np.any(data.reference_control.offsets):
        ref_state = compute_reference_state(data, disc.k_ref, disc.k_ref_time, params)
        reference = reference.with_state(ref_state, reference_cost(data, reference, ref_state))
    problem = build_discrete_problem(data, ref_state, disc.level, params)
    control, history = optimize(problem, config.pdap)

    final = PdapSolver(problem, config.pdap).diagnose(control, history.iterations)
    kkt = kkt_certificate(final.p1, control, problem.alpha, config.pdap.tol_kkt)
    errors = control_errors(reference, control)
    summary = {
        "command": "pdap",
        "scenario": data.name,
        "phi": data.phi_variant,
        "level": disc.level,
        "converged": history.converged,
        "stop_reason": history.reason,
        "iterations": history.iterations,
        "cost": final.cost,
        "gap": final.gap,
        "settings": settings_to_dict(config.pdap),
        **control.to_dict(),
        "kkt": kkt.to_dict(),
        "errors": {
            "control_l1": errors.control_l1,
            "jump_positions": errors.jump_positions,
            "jump_amplitudes": errors.jump_amplitudes,
            "offset_err": errors.offset_err,
            "atoms_per_jump": errors.atoms_per_jump,
            "unmatched_atoms": errors.unmatched,
            "missing_jumps": errors.missing,
            "count_ok": errors.count_ok,
        },
        "accepted": bool(data.phi_variant == "corrected" and history.converged and kkt.holds and errors.count_ok),
    }
    write_csv(out / "history.csv", HISTORY_COLUMNS, history.to_rows())
    save_json(summary, out / "summary.json")
    dump_config(config, out / "config.yml")
    logger.info("Resumo do PDAP salvo em %s", out)
    if not history.converged:
        raise NonConvergenceError(f"PDAP did not converge within k_max={config.pdap.k_max} iterations")
    return summary


def run_convergence(config: RunConfig) -> dict:
    """Convergence study; writes rates.csv, rates.gp, summary.json and relatorio.pdf."""
    out = ensure_directories(config.output_dir)["convergence"]
    _cleanup_directory(out, suffix=".csv")
    disc = config.discretization
    data, reference = build_reference_scenario(config.scenario.phi, config.scenario.alpha)
    table = convergence_study(
        disc.levels,
        disc.k_ref,
        data,
        reference,
        disc.scheme(),
        config.pdap,
        k_ref_time=disc.k_ref_time,
    )
    csv_path = table.to_csv(out / "rates.csv")
    (out / "rates.gp").write_text(table.gnuplot_script(csv_path.name), encoding="utf-8")
    summary = {"command": "convergence", "k_ref": disc.k_ref, "k_ref_time": disc.k_ref_time, **table.summary()}
    save_json(summary, out / "summary.json")
    dump_config(config, out / "config.yml")
    parameters = {
        "níveis": ", ".join(str(k) for k in disc.levels),
        "referência": f"k={disc.k_ref}, k_tempo={disc.k_ref_time or disc.k_ref}",
        "sigma": disc.sigma,
        "alpha": config.scenario.alpha,
        "phi": config.scenario.phi,
    }
    build_convergence_report(table, parameters, out / "relatorio.pdf")
    logger.info("Estudo de convergência concluído: %s", "aceito" if summary["accepted"] else "não aceito")
    failed = [row.k for row in table.rows if not row.converged]
    if failed:
        raise NonConvergenceError(f"Levels without PDAP convergence: {failed}")
    return summary


def _cleanup_directory(directory: Path, suffix: str) -> None:
    if not directory.exists():
        return
    for item in directory.iterdir():
        if item.is_file() and item.name.endswith(suffix):
            item.unlink()


__all__ = ["run_convergence", "run_pdap", "run_solve"]
