"""Manufactured BV-control problem, error metrics and simultaneous-refinement studies."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .control_ops import (
    ComponentMeasure,
    MeasureControl,
    StepFunction,
    apply_B,
    l1_distance,
)
from .errors import ConfigurationError, GridMismatchError, NumericalError
from .mesh_fem import (
    SEVEN_POINT,
    THREE_POINT,
    QuadratureRule,
    SpatialFunction,
    TriMesh,
    assemble_load,
    build_uniform_mesh,
    l2_error,
    prolongation_matrix,
)
from .pdap import DiscreteProblem, PdapSettings, PdapSolver, run_pdap
from .utils import write_csv
from .wave_solver import (
    SchemeParams,
    SpaceTimeField,
    TimeGrid,
    TimeLoad,
    WaveSolver,
    field_load,
    separable_load,
    space_time_inner,
    time_mass_matrix,
    time_prolongation,
)

logger = logging.getLogger(__name__)

FINAL_TIME = 2.0
REFERENCE_ALPHA = 6e-3
PHI_VARIANTS = ("corrected", "printed")
WAVE_FREQUENCY = math.pi / math.sqrt(2.0)
RATE_THRESHOLD = 1.7
NOISE_FACTOR = 5.0
DEFAULT_MAX_ENTRIES = 50_000_000
CSV_COLUMNS = (
    "k",
    "tau",
    "h",
    "state_l2",
    "control_l1",
    "jump_pos_max",
    "jump_amp_max",
    "offset_err",
    "cost_err",
    "tv_err",
    "pdap_iters",
    "converged",
)
RATE_COLUMNS = ("state_l2", "control_l1", "jump_pos_max", "jump_amp_max", "offset_err", "cost_err")


@dataclass(frozen=True, eq=False)
class CosineSeries:
    """sum_j amplitudes[j] cos(frequencies[j] t) on [0, final_time]."""

    amplitudes: np.ndarray
    frequencies: np.ndarray
    final_time: float = FINAL_TIME

    def __post_init__(self) -> None:
        amplitudes = np.atleast_1d(np.asarray(self.amplitudes, dtype=float))
        frequencies = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        if amplitudes.shape != frequencies.shape:
            raise ConfigurationError("Amplitudes and frequencies must have the same length")
        if np.any(frequencies <= 0.0):
            raise ConfigurationError("Cosine frequencies must be positive")
        object.__setattr__(self, "amplitudes", amplitudes)
        object.__setattr__(self, "frequencies", frequencies)

    def __call__(self, t: np.ndarray | float) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.cos(np.multiply.outer(t, self.frequencies)) @ self.amplitudes

    def scaled(self, factor: float) -> "CosineSeries":
        return CosineSeries(factor * self.amplitudes, self.frequencies, self.final_time)

    def second_derivative(self) -> "CosineSeries":
        return CosineSeries(-self.frequencies**2 * self.amplitudes, self.frequencies, self.final_time)

    def wave_operator(self, eigenvalue: float) -> "CosineSeries":
        """Time factor of (d_tt - Delta)(psi g) when -Delta g = eigenvalue g."""
        return CosineSeries((eigenvalue - self.frequencies**2) * self.amplitudes, self.frequencies, self.final_time)

    def primitive(self, t: np.ndarray | float) -> np.ndarray:
        """Antiderivative vanishing at t = 0."""
        t = np.asarray(t, dtype=float)
        return np.sin(np.multiply.outer(t, self.frequencies)) @ (self.amplitudes / self.frequencies)

    def inner(self, other: "CosineSeries") -> float:
        """Exact L^2(0, T) inner product."""
        T = self.final_time
        a = self.frequencies[:, None]
        b = other.frequencies[None, :]
        kernel = 0.5 * T * (np.sinc((a - b) * T / math.pi) + np.sinc((a + b) * T / math.pi))
        return float(self.amplitudes @ kernel @ other.amplitudes)

    def norm2(self) -> float:
        return self.inner(self)

    def hat_integrals(self, grid: TimeGrid) -> np.ndarray:
        """Exact int_0^T psi e_m dt per hat function."""
        nodes = grid.nodes
        a, b = nodes[:-1, None], nodes[1:, None]
        w = self.frequencies[None, :]
        width = b - a
        cos_diff = -2.0 * np.sin(0.5 * w * (a + b)) * np.sin(0.5 * w * width)
        rising = (width * np.sin(w * b) / w + cos_diff / w**2) / width
        falling = (-width * np.sin(w * a) / w - cos_diff / w**2) / width
        out = np.zeros(grid.steps + 1)
        out[1:] += rising @ self.amplitudes
        out[:-1] += falling @ self.amplitudes
        return out


def corrected_psi(alpha: float) -> CosineSeries:
    """(9 pi alpha / 4) sin(3 pi t) sin(3 pi t / 2)."""
    scale = 9.0 * math.pi * alpha / 8.0
    return CosineSeries(np.array([scale, -scale]), np.array([1.5 * math.pi, 4.5 * math.pi]))


def printed_psi(alpha: float) -> CosineSeries:
    """(3 pi alpha / 2) sin(2 pi t) sin(pi t)."""
    scale = 3.0 * math.pi * alpha / 4.0
    return CosineSeries(np.array([scale, -scale]), np.array([math.pi, 3.0 * math.pi]))


def cosine_bump() -> SpatialFunction:
    """g(x) = cos(pi x1 / 2) cos(pi x2 / 2); -Delta g = (pi^2 / 2) g and ||g||^2 = 1."""
    half_pi = 0.5 * math.pi

    def value(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        return np.cos(half_pi * x1) * np.cos(half_pi * x2)

    def gradient(x1: np.ndarray, x2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            -half_pi * np.sin(half_pi * x1) * np.cos(half_pi * x2),
            -half_pi * np.cos(half_pi * x1) * np.sin(half_pi * x2),
        )

    return SpatialFunction(value, gradient, name="g")


@dataclass(frozen=True)
class SeparableTerm:
    """time_factor(t) * spatial(x) with ||spatial||^2 known."""

    time_factor: CosineSeries
    spatial: SpatialFunction
    spatial_norm2: float

    def norm2(self) -> float:
        return self.time_factor.norm2() * self.spatial_norm2


@dataclass(frozen=True, eq=False)
class ProblemData:
    """Data of one control problem; y_d = S(reference_control) + correction."""

    name: str
    spatial: tuple[SpatialFunction, ...]
    spatial_norm2: tuple[float, ...]
    alpha: np.ndarray
    reference_control: MeasureControl
    correction: SeparableTerm | None = None
    y0: SpatialFunction | None = None
    y1: SpatialFunction | None = None
    final_time: float = FINAL_TIME
    phi_variant: str = "corrected"

    def __post_init__(self) -> None:
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if alpha.size != len(self.spatial) or len(self.spatial_norm2) != len(self.spatial):
            raise ConfigurationError("alpha, spatial factors and their norms must have one entry per component")
        if np.any(alpha <= 0.0):
            raise ConfigurationError("alpha must be positive")
        if any(n <= 0.0 for n in self.spatial_norm2):
            raise ConfigurationError("Spatial factors must be non-zero")
        if self.reference_control.n_components != alpha.size:
            raise ConfigurationError("Reference control has the wrong number of components")
        object.__setattr__(self, "alpha", alpha)

    @property
    def n_components(self) -> int:
        return len(self.spatial)


@dataclass(frozen=True, eq=False)
class ReferenceSolution:
    control: MeasureControl
    steps: tuple[StepFunction, ...]
    adjoint_factor: CosineSeries | None
    spatial_norm2: float
    cost: float
    kkt_consistent: bool
    state: SpaceTimeField | None = None

    def p1(self, t: np.ndarray | float) -> np.ndarray:
        """Exact p1(t) = -||g||^2 int_t^T psi."""
        if self.adjoint_factor is None:
            return np.zeros_like(np.asarray(t, dtype=float))
        psi = self.adjoint_factor
        return self.spatial_norm2 * (psi.primitive(t) - psi.primitive(psi.final_time))

    def with_state(self, state: SpaceTimeField, cost: float | None = None) -> "ReferenceSolution":
        return replace(self, state=state, cost=self.cost if cost is None else cost)


def _check_reference_kkt(reference: ReferenceSolution, alpha: float, samples: int = 20001) -> bool:
    grid = np.linspace(0.0, reference.control.final_time, samples)
    sup = float(np.max(np.abs(reference.p1(grid))))
    ends = np.abs(reference.p1(np.array([0.0, reference.control.final_time])))
    component = reference.control.components[0]
    at_atoms = reference.p1(component.times)
    consistent = (
        sup <= alpha * (1.0 + 1e-12)
        and bool(np.all(ends <= 1e-12 * alpha))
        and bool(np.allclose(np.abs(at_atoms), alpha, rtol=1e-12, atol=0.0))
        and bool(np.all(np.sign(at_atoms) == np.sign(component.weights)))
    )
    logger.debug("Reference KKT check: sup=%.6e ends=%s atoms=%s", sup, ends, at_atoms)
    return consistent


def build_reference_scenario(
    phi: str = "corrected", alpha: float = REFERENCE_ALPHA
) -> tuple[ProblemData, ReferenceSolution]:
    """Manufactured problem with v = delta_{1/3} - delta_1 + delta_{5/3}, c = 0."""
    if phi not in PHI_VARIANTS:
        raise ConfigurationError(f"Unknown phi variant {phi!r}; expected one of {PHI_VARIANTS}")
    if alpha <= 0.0:
        raise ConfigurationError("alpha must be positive")
    g = cosine_bump()
    psi = corrected_psi(alpha) if phi == "corrected" else printed_psi(alpha)
    chi = psi.wave_operator(0.5 * math.pi**2)
    control = MeasureControl(
        (ComponentMeasure(np.array([1.0 / 3.0, 1.0, 5.0 / 3.0]), np.array([1.0, -1.0, 1.0])),),
        np.zeros(1),
        FINAL_TIME,
    )
    data = ProblemData(
        name="reference",
        spatial=(g,),
        spatial_norm2=(1.0,),
        alpha=np.array([alpha]),
        reference_control=control,
        correction=SeparableTerm(chi.scaled(-1.0), g, 1.0),
        phi_variant=phi,
    )
    cost = 0.5 * chi.norm2() + alpha * float(np.sum(control.total_variation()))
    reference = ReferenceSolution(control, apply_B(control), psi, 1.0, cost, kkt_consistent=False)
    consistent = _check_reference_kkt(reference, alpha)
    if phi == "corrected" and not consistent:
        raise NumericalError("Corrected reference scenario failed its optimality self-check")
    if not consistent:
        logger.warning("Variante '%s' de phi não satisfaz as condições de otimalidade", phi)
    return data, replace(reference, kkt_consistent=consistent)


def build_zero_scenario(alpha: float = REFERENCE_ALPHA) -> tuple[ProblemData, ReferenceSolution]:
    """y_d = 0 with zero initial data: the optimal control vanishes."""
    control = MeasureControl.zeros(1, FINAL_TIME)
    data = ProblemData(
        name="zero",
        spatial=(cosine_bump(),),
        spatial_norm2=(1.0,),
        alpha=np.array([alpha]),
        reference_control=control,
    )
    return data, ReferenceSolution(control, apply_B(control), None, 1.0, 0.0, kkt_consistent=True)


def _control_load(
    control: MeasureControl, loads: Sequence[np.ndarray], grid: TimeGrid, solver: WaveSolver
) -> TimeLoad:
    total = TimeLoad.zeros(grid, solver.mesh)
    for step, load in zip(apply_B(control), loads):
        total = total + separable_load(step, load, grid, solver.mesh)
    return total


def compute_reference_state(
    data: ProblemData,
    k_ref: int,
    k_ref_time: int | None = None,
    params: SchemeParams | None = None,
    *,
    max_entries: int = DEFAULT_MAX_ENTRIES,
) -> SpaceTimeField:
    """S(v_ref, c_ref) on the reference level with seven-point data quadrature."""
    k_time = k_ref if k_ref_time is None else k_ref_time
    if k_time < k_ref:
        raise ConfigurationError("The reference time level cannot be coarser than its space level")
    grid = TimeGrid.from_level(k_time, data.final_time)
    cells = 2**k_ref
    entries = (grid.steps + 1) * (cells - 1) ** 2
    if entries > max_entries:
        raise ConfigurationError(
            f"Reference level (k={k_ref}, k_time={k_time}) needs {entries} entries, limit {max_entries}"
        )
    mesh = build_uniform_mesh(k_ref)
    solver = WaveSolver(mesh, grid, params, rule=SEVEN_POINT)
    loads = [assemble_load(mesh, g, SEVEN_POINT) for g in data.spatial]
    load = _control_load(data.reference_control, loads, grid, solver)
    logger.info("Calculando estado de referência: k=%d, k_tempo=%d, %d incógnitas", k_ref, k_time, entries)
    return solver.solve_forward(load, data.y0, data.y1)


def reference_cost(data: ProblemData, reference: ReferenceSolution, state: SpaceTimeField) -> float:
    """1/2 ||S(v_ref) - y_d||^2 + alpha TV(v_ref) on the level of the reference state.

    S(v_ref) - y_d is minus the correction term, so only its spatial factor needs quadrature.
    """
    tracking = 0.0
    correction = data.correction
    if correction is not None:
        mesh = state.mesh
        spatial_norm2 = l2_error(mesh, np.zeros(mesh.n_interior), correction.spatial, SEVEN_POINT) ** 2
        tracking = 0.5 * correction.time_factor.norm2() * spatial_norm2
    return tracking + float(data.alpha @ reference.control.total_variation())


def prolongate_field(field_: SpaceTimeField, mesh: TriMesh, grid: TimeGrid) -> SpaceTimeField:
    """Exact representation of a coarse field on nested finer grids."""
    if field_.mesh is mesh and field_.grid.same_as(grid):
        return field_
    time_p = time_prolongation(field_.grid, grid)
    space_p = prolongation_matrix(field_.mesh, mesh)
    values = time_p @ (space_p @ field_.values.T).T
    return SpaceTimeField(grid, mesh, values)


def state_l2_error(a: SpaceTimeField, b: SpaceTimeField) -> float:
    """||a - b||_{L^2(Omega_T)}, exact for nested piecewise-bilinear fields."""
    a_finer = a.mesh.level >= b.mesh.level and a.grid.steps >= b.grid.steps
    b_finer = b.mesh.level >= a.mesh.level and b.grid.steps >= a.grid.steps
    if not (a_finer or b_finer):
        raise GridMismatchError("Fields are refined in different directions")
    fine, coarse = (a, b) if a_finer else (b, a)
    diff = fine - prolongate_field(coarse, fine.mesh, fine.grid)
    return math.sqrt(max(space_time_inner(diff, diff), 0.0))


def restrict_load(load: TimeLoad, mesh: TriMesh, grid: TimeGrid) -> TimeLoad:
    """Load against the coarse basis of a source given through its fine load."""
    time_p = time_prolongation(grid, load.grid)
    space_p = prolongation_matrix(mesh, load.mesh)
    return TimeLoad(grid, mesh, time_p.T @ load.values @ space_p)


def target_norm2(data: ProblemData, reference_state: SpaceTimeField | None) -> float:
    """||y_d||^2 with y_d = reference_state + correction, evaluated on the reference level."""
    total = 0.0
    correction = data.correction
    if reference_state is not None:
        total += field_load(reference_state).pair(reference_state)
        if correction is not None:
            cross = separable_load(
                correction.time_factor,
                assemble_load(reference_state.mesh, correction.spatial, SEVEN_POINT),
                reference_state.grid,
                reference_state.mesh,
            )
            total += 2.0 * cross.pair(reference_state)
    if correction is not None:
        total += correction.norm2()
    return total


def build_discrete_problem(
    data: ProblemData,
    reference_state: SpaceTimeField | None,
    k: int,
    params: SchemeParams | None = None,
    *,
    k_time: int | None = None,
    rule: QuadratureRule = THREE_POINT,
    norm2: float | None = None,
) -> DiscreteProblem:
    """Level-k problem with target load restricted from the reference level."""
    mesh = build_uniform_mesh(k)
    grid = TimeGrid.from_level(k if k_time is None else k_time, data.final_time)
    solver = WaveSolver(mesh, grid, params, rule=rule)
    spatial_loads = np.stack([assemble_load(mesh, g, rule) for g in data.spatial])
    target = TimeLoad.zeros(grid, mesh)
    if reference_state is not None:
        target = restrict_load(field_load(reference_state), mesh, grid)
    if data.correction is not None:
        correction = data.correction
        target = target + separable_load(correction.time_factor, assemble_load(mesh, correction.spatial, rule), grid, mesh)
    base = None
    if data.y0 is not None or data.y1 is not None:
        base = solver.solve_forward(None, data.y0, data.y1)
    return DiscreteProblem(
        solver=solver,
        spatial_loads=spatial_loads,
        alpha=data.alpha,
        target_load=target,
        target_norm2=target_norm2(data, reference_state) if norm2 is None else norm2,
        base_state=base,
        label=f"k={k}",
    )


def discrete_state(problem: DiscreteProblem, control: MeasureControl) -> SpaceTimeField:
    """One forward solve for the state of a control on the problem's level."""
    solver = problem.solver
    load = _control_load(control, problem.spatial_loads, problem.grid, solver)
    return problem.base_state + solver.solve_forward(load)


@dataclass(frozen=True, eq=False)
class ControlErrors:
    control_l1: float
    jump_positions: np.ndarray
    jump_amplitudes: np.ndarray
    offset_err: float
    tv_err: float
    count_ok: bool
    atoms_per_jump: tuple[int, ...]
    unmatched: int
    missing: int = 0

    @property
    def jump_pos_max(self) -> float:
        return float(np.max(self.jump_positions, initial=0.0))

    @property
    def jump_amp_max(self) -> float:
        return float(np.max(self.jump_amplitudes, initial=0.0))


def match_radius(control: MeasureControl) -> float:
    """Half the smallest gap between reference jumps and the interval ends."""
    gaps = [
        np.min(np.diff(np.concatenate([[0.0], component.times, [control.final_time]])))
        for component in control.components
        if component.size
    ]
    return 0.5 * float(min(gaps)) if gaps else 0.5 * control.final_time


def _pair_atoms(ref_times: np.ndarray, times: np.ndarray, radius: float) -> np.ndarray:
    """One recovered atom per reference jump, closest pairs first; -1 marks a jump without atom."""
    partner = np.full(ref_times.size, -1)
    if not ref_times.size or not times.size:
        return partner
    distance = np.abs(times[:, None] - ref_times[None, :])
    taken = np.zeros(times.size, dtype=bool)
    for flat in np.argsort(distance, axis=None, kind="stable"):
        atom, jump = np.unravel_index(flat, distance.shape)
        if distance[atom, jump] > radius:
            break
        if taken[atom] or partner[jump] >= 0:
            continue
        taken[atom] = True
        partner[jump] = atom
    return partner


def control_errors(reference: ReferenceSolution, got: MeasureControl, radius: float | None = None) -> ControlErrors:
    """Pair recovered atoms one-to-one with reference jumps within the radius.

    Atoms left without a jump add their |weight| to the amplitude error of the nearest
    jump; they and jumps left without an atom fail the count check.
    """
    ref = reference.control
    if got.n_components != ref.n_components:
        raise ConfigurationError("Controls have different numbers of components")
    radius = match_radius(ref) if radius is None else radius
    positions: list[float] = []
    amplitudes: list[float] = []
    counts: list[int] = []
    unmatched = missing = 0
    for ref_component, component in zip(ref.components, got.components):
        n_ref = ref_component.size
        partner = _pair_atoms(ref_component.times, component.times, radius)
        amp_err = np.zeros(n_ref)
        for j in range(n_ref):
            counts.append(int(np.sum(np.abs(component.times - ref_component.times[j]) <= radius)))
            if partner[j] < 0:
                missing += 1
                positions.append(radius)
                amp_err[j] = abs(ref_component.weights[j])
                continue
            positions.append(abs(float(component.times[partner[j]]) - ref_component.times[j]))
            amp_err[j] = abs(float(component.weights[partner[j]]) - ref_component.weights[j])
        for index in np.setdiff1d(np.arange(component.size), partner[partner >= 0]):
            unmatched += 1
            if n_ref:
                j = int(np.argmin(np.abs(ref_component.times - component.times[index])))
                amp_err[j] += abs(component.weights[index])
        amplitudes.extend(amp_err.tolist())

    l1 = sum(l1_distance(u, w) for u, w in zip(reference.steps, apply_B(got)))
    offset_err = float(np.max(np.abs(ref.offsets - got.offsets), initial=0.0))
    tv_err = abs(float(np.sum(ref.total_variation())) - float(np.sum(got.total_variation())))
    count_ok = unmatched == 0 and missing == 0
    if not count_ok:
        logger.warning(
            "Contagem de átomos incorreta: %d átomos sem salto, %d saltos sem átomo (por salto: %s)",
            unmatched,
            missing,
            counts,
        )
    return ControlErrors(
        control_l1=float(l1),
        jump_positions=np.array(positions),
        jump_amplitudes=np.array(amplitudes),
        offset_err=offset_err,
        tv_err=tv_err,
        count_ok=count_ok,
        atoms_per_jump=tuple(counts),
        unmatched=unmatched,
        missing=missing,
    )


def cost_error(reference: ReferenceSolution, cost: float) -> float:
    """|J(v_ref, c_ref) - J_h(v_h, c_h)|."""
    return abs(reference.cost - cost)


def richardson_reference_error(fine: SpaceTimeField, coarse: SpaceTimeField) -> float:
    """Second-order estimate ||ref_fine - ref_coarse|| / 3 of the reference error."""
    return state_l2_error(fine, coarse) / 3.0


def fit_rates(levels: Sequence[int], errors: Sequence[float], converged: Sequence[bool]) -> list[float]:
    """log2(e_k / e_{k+1}) between consecutive rows; NaN where undefined."""
    rates = []
    for j in range(len(errors) - 1):
        e0, e1 = errors[j], errors[j + 1]
        valid = (
            converged[j]
            and converged[j + 1]
            and levels[j + 1] != levels[j]
            and np.isfinite(e0)
            and np.isfinite(e1)
            and e0 > 0.0
            and e1 > 0.0
        )
        rates.append(math.log2(e0 / e1) / (levels[j + 1] - levels[j]) if valid else math.nan)
    return rates


@dataclass
class LevelResult:
    k: int
    tau: float
    h: float
    state_l2: float
    control_l1: float
    jump_pos_max: float
    jump_amp_max: float
    offset_err: float
    cost_err: float
    tv_err: float
    pdap_iters: int
    converged: bool
    atoms: int = 0
    count_ok: bool = True

    def to_row(self) -> dict:
        return {column: getattr(self, column) for column in CSV_COLUMNS}


@dataclass
class RateTable:
    rows: list[LevelResult] = field(default_factory=list)
    reference_error: float = math.nan
    phi_variant: str = "corrected"

    def rates(self) -> dict[str, list[float]]:
        levels = [row.k for row in self.rows]
        converged = [row.converged for row in self.rows]
        return {
            column: fit_rates(levels, [getattr(row, column) for row in self.rows], converged)
            for column in RATE_COLUMNS
        }

    def above_noise(self) -> bool:
        """Every state error at least NOISE_FACTOR times the reference error estimate."""
        if not np.isfinite(self.reference_error):
            return False
        return all(row.state_l2 >= NOISE_FACTOR * self.reference_error for row in self.rows)

    def accepted(self, threshold: float = RATE_THRESHOLD) -> bool:
        if self.phi_variant != "corrected" or len(self.rows) < 2:
            return False
        if not all(row.converged and row.count_ok for row in self.rows):
            return False
        fitted = [r for values in self.rates().values() for r in values]
        return all(np.isfinite(r) and r >= threshold for r in fitted) and self.above_noise()

    def to_csv(self, path: Path) -> Path:
        return write_csv(path, CSV_COLUMNS, [row.to_row() for row in self.rows])

    def gnuplot_script(self, csv_name: str) -> str:
        lines = [
            "# log-log convergence plot",
            "set datafile separator ','",
            "set logscale xy",
            "set key left top",
            "set xlabel 'tau'",
            "set ylabel 'error'",
            "set format y '10^{%L}'",
            "set terminal pngcairo size 900,600",
            "set output 'convergence.png'",
        ]
        plots = [
            f"'{csv_name}' every ::1 using 2:{CSV_COLUMNS.index(column) + 1} with linespoints title '{column}'"
            for column in RATE_COLUMNS
        ]
        plots.append(f"'{csv_name}' every ::1 using 2:($2**2) with lines dashtype 2 title 'O(tau^2)'")
        lines.append("plot " + ", \\\n     ".join(plots))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "levels": [row.k for row in self.rows],
            "rates": {key: [None if math.isnan(r) else r for r in values] for key, values in self.rates().items()},
            "reference_error": None if math.isnan(self.reference_error) else self.reference_error,
            "above_noise": self.above_noise(),
            "phi_variant": self.phi_variant,
            "accepted": self.accepted(),
        }


def solve_level(
    data: ProblemData,
    reference: ReferenceSolution,
    k: int,
    params: SchemeParams | None = None,
    settings: PdapSettings | None = None,
    *,
    norm2: float | None = None,
) -> tuple[LevelResult, MeasureControl]:
    """PDAP on level k and all errors against the reference."""
    problem = build_discrete_problem(data, reference.state, k, params, norm2=norm2)
    control, history = run_pdap(problem, settings)
    state = discrete_state(problem, control)
    cost = PdapSolver(problem, settings).tracking(state) + float(problem.alpha @ control.total_variation())
    errors = control_errors(reference, control)
    state_err = state_l2_error(reference.state, state) if reference.state is not None else math.nan
    result = LevelResult(
        k=k,
        tau=problem.grid.tau,
        h=problem.mesh.h,
        state_l2=state_err,
        control_l1=errors.control_l1,
        jump_pos_max=errors.jump_pos_max,
        jump_amp_max=errors.jump_amp_max,
        offset_err=errors.offset_err,
        cost_err=cost_error(reference, cost),
        tv_err=errors.tv_err,
        pdap_iters=history.iterations,
        converged=history.converged,
        atoms=control.atom_count(),
        count_ok=errors.count_ok,
    )
    return result, control


def convergence_study(
    levels: Sequence[int],
    k_ref: int,
    data: ProblemData,
    reference: ReferenceSolution,
    params: SchemeParams | None = None,
    settings: PdapSettings | None = None,
    *,
    k_ref_time: int | None = None,
) -> RateTable:
    """Simultaneous refinement tau = 2^-k, h = 2 sqrt(2) 2^-k against a fine reference."""
    levels = [int(k) for k in levels]
    if not levels:
        raise ConfigurationError("At least one level is required")
    if any(b < a for a, b in zip(levels, levels[1:])):
        raise ConfigurationError(f"Levels must be ascending, got {levels}")
    if k_ref <= max(levels):
        raise ConfigurationError(f"k_ref={k_ref} must exceed the largest study level {max(levels)}")
    k_time = k_ref if k_ref_time is None else k_ref_time

    ref_state = compute_reference_state(data, k_ref, k_time, params)
    reference = reference.with_state(ref_state, reference_cost(data, reference, ref_state))
    ref_error = math.nan
    if k_ref - 1 >= 1:
        coarse_ref = compute_reference_state(data, k_ref - 1, k_time - 1, params)
        ref_error = richardson_reference_error(ref_state, coarse_ref)
    norm2 = target_norm2(data, ref_state)

    table = RateTable(reference_error=ref_error, phi_variant=data.phi_variant)
    for k in levels:
        logger.info("Resolvendo nível k=%d", k)
        row, _ = solve_level(data, reference, k, params, settings, norm2=norm2)
        table.rows.append(row)
        logger.info(
            "Nível k=%d: erro de estado %.3e, erro L1 %.3e, %d átomos%s",
            k,
            row.state_l2,
            row.control_l1,
            row.atoms,
            "" if row.converged else " (não convergiu)",
        )
    return table


def standing_wave_field(k: int, params: SchemeParams | None = None) -> SpaceTimeField:
    """Discrete solution for y0 = g, y1 = 0, f = 0; exact solution cos(omega t) g."""
    mesh = build_uniform_mesh(k)
    grid = TimeGrid.from_level(k, FINAL_TIME)
    return WaveSolver(mesh, grid, params).solve_forward(None, cosine_bump(), None)


def standing_wave_error(field_: SpaceTimeField) -> float:
    """max_m ||y_h(t_m) - cos(omega t_m) g||_{L^2}."""
    g = cosine_bump()
    return max(
        l2_error(field_.mesh, field_.values[m], lambda x1, x2, t=t: math.cos(WAVE_FREQUENCY * t) * g(x1, x2))
        for m, t in enumerate(field_.grid.nodes)
    )


def standing_wave_errors(levels: Sequence[int], params: SchemeParams | None = None) -> list[tuple[int, float]]:
    results = []
    for k in levels:
        error = standing_wave_error(standing_wave_field(k, params))
        logger.debug("Standing wave level %d: error %.6e", k, error)
        results.append((k, error))
    return results


def random_load(grid: TimeGrid, mesh: TriMesh, seed: int) -> TimeLoad:
    """Seeded load with the hat-integral scaling of a smooth source."""
    rng = np.random.default_rng(seed)
    weights = time_mass_matrix(grid).diagonal()
    return TimeLoad(grid, mesh, rng.standard_normal((grid.steps + 1, mesh.n_interior)) * weights[:, None] * mesh.h**2)


__all__ = [
    "CSV_COLUMNS",
    "ControlErrors",
    "CosineSeries",
    "FINAL_TIME",
    "LevelResult",
    "PHI_VARIANTS",
    "ProblemData",
    "RATE_COLUMNS",
    "REFERENCE_ALPHA",
    "RateTable",
    "ReferenceSolution",
    "SeparableTerm",
    "WAVE_FREQUENCY",
    "build_discrete_problem",
    "build_reference_scenario",
    "build_zero_scenario",
    "compute_reference_state",
    "control_errors",
    "convergence_study",
    "corrected_psi",
    "cosine_bump",
    "cost_error",
    "discrete_state",
    "fit_rates",
    "match_radius",
    "printed_psi",
    "prolongate_field",
    "random_load",
    "reference_cost",
    "restrict_load",
    "richardson_reference_error",
    "solve_level",
    "standing_wave_error",
    "standing_wave_errors",
    "standing_wave_field",
    "state_l2_error",
    "target_norm2",
]
