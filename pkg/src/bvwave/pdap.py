"""BV-PDAP: greedy atom insertion plus an L1-penalized magnitude/offset subproblem."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
import scipy.linalg

from .control_ops import (
    ComponentMeasure,
    MeasureControl,
    PiecewiseQuadratic,
    StepFunction,
    compute_p1,
    dual_certificate,
    global_max_abs,
)
from .errors import ConfigurationError, NumericalError
from .mesh_fem import TriMesh
from .wave_solver import SpaceTimeField, TimeGrid, TimeLoad, WaveSolver, field_load, separable_load

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SubproblemSettings:
    gamma_decay: float = 0.1
    gamma_min_rel: float = 1e-12
    newton_max_iter: int = 50
    fallback_max_iter: int = 20000
    kkt_tol: float = 1e-10

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma_decay < 1.0:
            raise ConfigurationError(f"gamma_decay must lie in (0, 1), got {self.gamma_decay}")
        for name in ("gamma_min_rel", "kkt_tol"):
            if getattr(self, name) <= 0.0:
                raise ConfigurationError(f"{name} must be positive")
        if self.newton_max_iter < 1 or self.fallback_max_iter < 1:
            raise ConfigurationError("Iteration limits must be at least 1")


@dataclass(frozen=True)
class PdapSettings:
    gap_tol_rel: float = 1e-9
    k_max: int = 200
    tol_kkt: float = 1e-2
    tv_cap_factor: float = 10.0
    merge_tol: float = 1e-12
    prune_tol: float = 0.0
    subproblem: SubproblemSettings = field(default_factory=SubproblemSettings)

    def __post_init__(self) -> None:
        for name in ("gap_tol_rel", "tol_kkt", "tv_cap_factor", "merge_tol"):
            if getattr(self, name) <= 0.0:
                raise ConfigurationError(f"{name} must be positive")
        if self.prune_tol < 0.0:
            raise ConfigurationError("prune_tol must be non-negative")
        if self.k_max < 1:
            raise ConfigurationError("k_max must be at least 1")


@dataclass(frozen=True, order=True)
class ColumnKey:
    """An atom column (component, time) or, with time None, the offset column of a component."""

    component: int
    time: float | None = None

    @property
    def is_offset(self) -> bool:
        return self.time is None


class ActiveSet:
    """Sorted candidate times per component."""

    def __init__(self, n_components: int, final_time: float) -> None:
        self.final_time = final_time
        self._times: list[list[float]] = [[] for _ in range(n_components)]
        self.iteration = 0

    @property
    def n_components(self) -> int:
        return len(self._times)

    def times(self, component: int) -> list[float]:
        return list(self._times[component])

    def size(self, component: int | None = None) -> int:
        if component is None:
            return sum(len(t) for t in self._times)
        return len(self._times[component])

    def insert(self, component: int, time: float, merge_tol: float) -> bool:
        """Add time unless it lies within merge_tol * T of a present one or outside (0, T)."""
        if not 0.0 < time < self.final_time:
            return False
        current = self._times[component]
        if any(abs(time - t) <= merge_tol * self.final_time for t in current):
            return False
        current.append(float(time))
        current.sort()
        return True

    def reset_from(self, control: MeasureControl) -> None:
        self._times = [list(map(float, component.times)) for component in control.components]

    def atom_keys(self) -> list[ColumnKey]:
        return [ColumnKey(i, t) for i, times in enumerate(self._times) for t in times]


@dataclass(frozen=True, eq=False)
class SubproblemModel:
    """Quadratic model over q = (lambda, c): atoms first, then one offset per component."""

    gram: np.ndarray
    linear: np.ndarray
    penalty: np.ndarray
    n_offsets: int

    def __post_init__(self) -> None:
        gram = np.asarray(self.gram, dtype=float)
        linear = np.asarray(self.linear, dtype=float)
        penalty = np.asarray(self.penalty, dtype=float)
        n = linear.size
        if gram.shape != (n, n) or penalty.size + self.n_offsets != n:
            raise ConfigurationError("Inconsistent subproblem dimensions")
        if np.any(penalty <= 0.0):
            raise ConfigurationError("Atom penalties must be positive")
        if self.n_offsets < 1:
            raise ConfigurationError("At least one offset column is required")
        object.__setattr__(self, "gram", 0.5 * (gram + gram.T))
        object.__setattr__(self, "linear", linear)
        object.__setattr__(self, "penalty", penalty)

    @property
    def n_atoms(self) -> int:
        return int(self.penalty.size)

    @property
    def size(self) -> int:
        return int(self.linear.size)

    def check_offset_block(self) -> None:
        block = self.gram[self.n_atoms :, self.n_atoms :]
        try:
            scipy.linalg.cholesky(block, lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError("Offset block of the Gram matrix is not positive definite") from exc

    def weights(self) -> np.ndarray:
        """Penalty weight per unknown, zero on the offsets."""
        return np.concatenate([self.penalty, np.zeros(self.n_offsets)])

    def objective(self, q: np.ndarray, gamma: float = 0.0) -> float:
        lam = q[: self.n_atoms]
        return float(
            0.5 * q @ (self.gram @ q) - q @ self.linear + self.penalty @ np.abs(lam) + 0.5 * gamma * lam @ lam
        )

    def kkt_residual(self, q: np.ndarray, gamma: float = 0.0) -> float:
        """Distance of -grad of the smooth part to the subdifferential, in gradient units."""
        n = self.n_atoms
        mu = self.linear - self.gram @ q
        mu[:n] -= gamma * q[:n]
        lam, a = q[:n], self.penalty
        atoms = np.where(
            lam > 0.0, np.abs(mu[:n] - a), np.where(lam < 0.0, np.abs(mu[:n] + a), np.maximum(np.abs(mu[:n]) - a, 0.0))
        )
        offsets = np.abs(mu[n:])
        return float(max(np.max(atoms, initial=0.0), np.max(offsets, initial=0.0)))


@dataclass(frozen=True)
class SubproblemResult:
    magnitudes: np.ndarray
    offsets: np.ndarray
    objective: float
    kkt_residual: float
    gamma: float
    newton_iterations: int
    used_fallback: bool


def _solve_restricted(model: SubproblemModel, hessian: np.ndarray, active: np.ndarray, signs: np.ndarray) -> np.ndarray:
    weights = model.weights()
    q = np.zeros(model.size)
    index = np.flatnonzero(active)
    rhs = model.linear[index] - weights[index] * signs[index]
    factor = scipy.linalg.cho_factor(hessian[np.ix_(index, index)], lower=True)
    q[index] = scipy.linalg.cho_solve(factor, rhs)
    return q


def _active_set_newton(
    model: SubproblemModel, hessian: np.ndarray, gamma: float, start: np.ndarray, max_iter: int
) -> tuple[np.ndarray, int] | None:
    """Primal-dual active set (semismooth Newton) on q = prox(q + c mu); None when it cycles or stalls."""
    n = model.n_atoms
    weights = model.weights()
    c = 1.0 / gamma
    q = start.copy()
    previous: tuple[bytes, bytes] | None = None
    for iteration in range(1, max_iter + 1):
        mu = model.linear - hessian @ q
        trial = q + c * mu
        active = np.abs(trial) > c * weights
        active[n:] = True
        signs = np.where(active, np.sign(trial), 0.0)
        signs[n:] = 0.0
        pattern = (active.tobytes(), signs.tobytes())
        if pattern == previous:
            return q, iteration
        previous = pattern
        try:
            q = _solve_restricted(model, hessian, active, signs)
        except scipy.linalg.LinAlgError:
            logger.debug("Restricted Newton system singular at gamma=%g", gamma)
            return None
    return None


def _proximal_gradient(
    model: SubproblemModel, hessian: np.ndarray, gamma: float, start: np.ndarray, max_iter: int, tol: float
) -> np.ndarray:
    """FISTA at fixed gamma, followed by a solve on the identified support."""
    n = model.n_atoms
    weights = model.weights()
    lipschitz = float(scipy.linalg.eigvalsh(hessian)[-1])
    step = 1.0 / max(lipschitz, np.finfo(float).tiny)
    q = start.copy()
    z = q.copy()
    momentum = 1.0
    for _ in range(max_iter):
        trial = z + step * (model.linear - hessian @ z)
        shrunk = np.sign(trial) * np.maximum(np.abs(trial) - step * weights, 0.0)
        shrunk[n:] = trial[n:]
        next_momentum = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum * momentum))
        z = shrunk + ((momentum - 1.0) / next_momentum) * (shrunk - q)
        q, momentum = shrunk, next_momentum
        if model.kkt_residual(q, gamma) <= tol:
            return q
    active = q != 0.0
    active[n:] = True
    signs = np.sign(q)
    signs[n:] = 0.0
    try:
        polished = _solve_restricted(model, hessian, active, signs)
    except scipy.linalg.LinAlgError:
        return q
    consistent = np.all(np.sign(polished[:n][active[:n]]) == signs[:n][active[:n]])
    if consistent and model.kkt_residual(polished, gamma) < model.kkt_residual(q, gamma):
        return polished
    return q


def solve_magnitude_subproblem(
    model: SubproblemModel, settings: SubproblemSettings | None = None
) -> SubproblemResult:
    """Minimize 1/2 q'Gq - q'r + sum alpha |lambda| by continuation in an added (gamma/2)|lambda|^2 term."""
    settings = settings or SubproblemSettings()
    model.check_offset_block()
    n = model.n_atoms
    scale = max(1.0, float(np.max(np.abs(model.linear), initial=0.0)))
    tol = settings.kkt_tol * scale
    gamma0 = float(np.trace(model.gram)) / model.size
    if gamma0 <= 0.0:
        gamma0 = 1.0
    gamma_min = settings.gamma_min_rel * gamma0

    schedule = [gamma0]
    while schedule[-1] > gamma_min:
        schedule.append(max(schedule[-1] * settings.gamma_decay, gamma_min))

    q = np.zeros(model.size)
    total_iterations = 0
    used_fallback = False
    for gamma in schedule:
        hessian = model.gram.copy()
        hessian[np.arange(n), np.arange(n)] += gamma
        outcome = _active_set_newton(model, hessian, gamma, q, settings.newton_max_iter)
        if outcome is not None and model.kkt_residual(outcome[0], gamma) <= tol:
            q, iterations = outcome
            total_iterations += iterations
            continue
        logger.debug("Active-set Newton failed at gamma=%g, switching to proximal gradient", gamma)
        used_fallback = True
        q = _proximal_gradient(model, hessian, gamma, q, settings.fallback_max_iter, tol)

    residual = model.kkt_residual(q, gamma_min)
    if residual > tol:
        raise NumericalError(f"Subproblem did not converge: KKT residual {residual:.3e} > {tol:.3e}")
    return SubproblemResult(
        magnitudes=q[:n].copy(),
        offsets=q[n:].copy(),
        objective=model.objective(q),
        kkt_residual=residual,
        gamma=gamma_min,
        newton_iterations=total_iterations,
        used_fallback=used_fallback,
    )


@dataclass(eq=False)
class DiscreteProblem:
    """Reduced problem on one level: state y = Q + L(B(v, c) g), target y_d given by its load and norm."""

    solver: WaveSolver
    spatial_loads: np.ndarray
    alpha: np.ndarray
    target_load: TimeLoad
    target_norm2: float
    base_state: SpaceTimeField | None = None
    label: str = ""

    def __post_init__(self) -> None:
        self.spatial_loads = np.atleast_2d(np.asarray(self.spatial_loads, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if self.alpha.size != self.spatial_loads.shape[0]:
            raise ConfigurationError("One alpha per spatial factor is required")
        if np.any(self.alpha <= 0.0):
            raise ConfigurationError("alpha must be positive")
        if self.spatial_loads.shape[1] != self.solver.mesh.n_interior:
            raise ConfigurationError("Spatial loads do not match the mesh")
        if self.base_state is None:
            self.base_state = SpaceTimeField.zeros(self.solver.grid, self.solver.mesh)

    @property
    def grid(self) -> TimeGrid:
        return self.solver.grid

    @property
    def mesh(self) -> TriMesh:
        return self.solver.mesh

    @property
    def n_components(self) -> int:
        return int(self.alpha.size)

    @property
    def final_time(self) -> float:
        return self.solver.grid.final_time


def atom_basis(time: float, final_time: float) -> StepFunction:
    """1_{(t, T]} - (T - t)/T."""
    if not 0.0 < time < final_time:
        raise ConfigurationError(f"Atom time {time} outside (0, {final_time})")
    return StepFunction(np.array([0.0, time, final_time]), np.array([-(final_time - time) / final_time, time / final_time]))


@dataclass
class PdapState:
    control: MeasureControl
    state: SpaceTimeField
    p1: PiecewiseQuadratic
    eta: PiecewiseQuadratic
    cost: float
    gap: float
    max_violation: float
    certificate_violation: float
    iteration: int = 0
    inserted: tuple[float | None, ...] = ()


@dataclass
class PdapHistory:
    records: list[dict] = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    def record(self, state: PdapState, active_sizes: Iterable[int], solves: int) -> None:
        self.records.append(
            {
                "iteration": state.iteration,
                "cost": state.cost,
                "max_violation": state.max_violation,
                "certificate_violation": state.certificate_violation,
                "gap": state.gap,
                "atoms": state.control.atom_count(),
                "active": list(active_sizes),
                "solves": solves,
            }
        )

    @property
    def iterations(self) -> int:
        return self.records[-1]["iteration"] if self.records else 0

    def costs(self) -> np.ndarray:
        return np.array([r["cost"] for r in self.records])

    def to_rows(self) -> list[dict]:
        return [{**r, "active": " ".join(str(n) for n in r["active"])} for r in self.records]


class PdapSolver:
    """Column cache and state/adjoint evaluation for one discrete problem."""

    def __init__(self, problem: DiscreteProblem, settings: PdapSettings | None = None) -> None:
        self.problem = problem
        self.settings = settings or PdapSettings()
        self._fields: dict[ColumnKey, np.ndarray] = {}
        self._loads: dict[ColumnKey, np.ndarray] = {}
        self.initial_cost: float | None = None

    def column_field(self, key: ColumnKey) -> SpaceTimeField:
        """L(basis * g_i) with zero initial data; cached per key."""
        if key not in self._fields:
            problem = self.problem
            if key.is_offset:
                basis = StepFunction.constant(1.0, problem.final_time)
            else:
                basis = atom_basis(key.time, problem.final_time)
            load = separable_load(basis, problem.spatial_loads[key.component], problem.grid, problem.mesh)
            column = problem.solver.solve_forward(load)
            self._fields[key] = column.values
            self._loads[key] = field_load(column).values
            logger.debug("Column %s solved (%d cached)", key, len(self._fields))
        return SpaceTimeField(self.problem.grid, self.problem.mesh, self._fields[key])

    def forget(self, keep: Iterable[ColumnKey]) -> None:
        keep = set(keep)
        for key in [k for k in self._fields if k not in keep]:
            del self._fields[key]
            del self._loads[key]

    def offset_keys(self) -> list[ColumnKey]:
        return [ColumnKey(i) for i in range(self.problem.n_components)]

    def build_model(self, atom_keys: list[ColumnKey]) -> SubproblemModel:
        keys = atom_keys + self.offset_keys()
        for key in keys:
            self.column_field(key)
        values = np.stack([self._fields[k].ravel() for k in keys])
        loads = np.stack([self._loads[k].ravel() for k in keys])
        gram = values @ loads.T
        asymmetry = float(np.max(np.abs(gram - gram.T))) / max(float(np.max(np.abs(gram))), 1e-300)
        if asymmetry > 1e-8:
            logger.warning("Gram matrix asymmetry %.2e", asymmetry)
        problem = self.problem
        linear = values @ problem.target_load.values.ravel() - loads @ problem.base_state.values.ravel()
        penalty = np.array([problem.alpha[k.component] for k in atom_keys])
        return SubproblemModel(gram, linear, penalty, problem.n_components)

    def state(self, control: MeasureControl) -> SpaceTimeField:
        values = self.problem.base_state.values.copy()
        for i, component in enumerate(control.components):
            for t, w in zip(component.times, component.weights):
                values += w * self.column_field(ColumnKey(i, float(t))).values
            if control.offsets[i] != 0.0:
                values += control.offsets[i] * self.column_field(ColumnKey(i)).values
        return SpaceTimeField(self.problem.grid, self.problem.mesh, values)

    def tracking(self, state: SpaceTimeField) -> float:
        """1/2 ||y - y_d||^2 on Omega_T."""
        problem = self.problem
        norm2 = field_load(state).pair(state) - 2.0 * problem.target_load.pair(state) + problem.target_norm2
        return 0.5 * max(norm2, 0.0)

    def cost(self, control: MeasureControl, state: SpaceTimeField | None = None) -> float:
        state = state if state is not None else self.state(control)
        return self.tracking(state) + float(self.problem.alpha @ control.total_variation())

    def adjoint(self, state: SpaceTimeField) -> SpaceTimeField:
        return self.problem.solver.solve_adjoint(field_load(state) - self.problem.target_load)

    def diagnose(self, control: MeasureControl, iteration: int = 0) -> PdapState:
        """State, adjoint, p1, certificate, cost and gap of a control."""
        problem = self.problem
        state = self.state(control)
        p1 = compute_p1(self.adjoint(state), problem.spatial_loads)
        eta = dual_certificate(p1)
        cost = self.cost(control, state)
        if self.initial_cost is None:
            self.initial_cost = cost
        alpha = problem.alpha
        cap = self.settings.tv_cap_factor * max(self.initial_cost, 1e-300) / float(np.min(alpha))
        sup_p1 = np.array([global_max_abs(p1, i)[1] for i in range(problem.n_components)])
        sup_eta = np.array([global_max_abs(eta, i)[1] for i in range(problem.n_components)])
        start = p1.node_values()[:, 0]
        gap = cap * float(np.sum(np.abs(start)))
        for i, component in enumerate(control.components):
            pairing = float(component.weights @ eta(component.times, i)) if component.size else 0.0
            gap += cap * max(sup_eta[i] - alpha[i], 0.0) + alpha[i] * component.norm() - pairing
        return PdapState(
            control=control,
            state=state,
            p1=p1,
            eta=eta,
            cost=cost,
            gap=max(gap, 0.0),
            max_violation=float(np.max(sup_p1 / alpha - 1.0)),
            certificate_violation=float(np.max(sup_eta / alpha - 1.0)),
            iteration=iteration,
        )

    def is_converged(self, state: PdapState) -> bool:
        return state.gap <= self.settings.gap_tol_rel * max(self.initial_cost or 0.0, 1e-300)


def pdap_iterate(state: PdapState, solver: PdapSolver, active: ActiveSet | None = None) -> PdapState:
    """Insert argmax |eta_i| per component, solve the subproblem, prune zero magnitudes."""
    problem = solver.problem
    settings = solver.settings
    if active is None:
        active = ActiveSet(problem.n_components, problem.final_time)
        active.reset_from(state.control)
    inserted: list[float | None] = []
    for i in range(problem.n_components):
        t_hat, value = global_max_abs(state.eta, i)
        added = value > 0.0 and active.insert(i, t_hat, settings.merge_tol)
        inserted.append(t_hat if added else None)
    active.iteration = state.iteration + 1

    keys = active.atom_keys()
    result = solve_magnitude_subproblem(solver.build_model(keys), settings.subproblem)
    components: list[list[tuple[float, float]]] = [[] for _ in range(problem.n_components)]
    for key, weight in zip(keys, result.magnitudes):
        if abs(weight) > settings.prune_tol:
            components[key.component].append((key.time, float(weight)))
    control = MeasureControl(
        tuple(
            ComponentMeasure(np.array([t for t, _ in atoms]), np.array([w for _, w in atoms]))
            for atoms in components
        ),
        result.offsets,
        problem.final_time,
    )
    active.reset_from(control)
    solver.forget(active.atom_keys() + solver.offset_keys())
    new_state = solver.diagnose(control, state.iteration + 1)
    new_state.inserted = tuple(inserted)
    logger.debug(
        "PDAP iteration %d: inserted=%s atoms=%d cost=%.12e gap=%.3e",
        new_state.iteration,
        inserted,
        control.atom_count(),
        new_state.cost,
        new_state.gap,
    )
    return new_state


def run_pdap(problem: DiscreteProblem, settings: PdapSettings | None = None) -> tuple[MeasureControl, PdapHistory]:
    """Iterate from (v, c) = (0, 0) until the gap criterion holds or k_max is reached."""
    solver = PdapSolver(problem, settings)
    settings = solver.settings
    history = PdapHistory()
    state = solver.diagnose(MeasureControl.zeros(problem.n_components, problem.final_time))
    history.record(state, [0] * problem.n_components, problem.solver.solve_count)
    best = state
    active = ActiveSet(problem.n_components, problem.final_time)
    logger.info("PDAP iniciado (%s): custo inicial %.6e", problem.label or "nível", state.cost)

    if solver.is_converged(state):
        history.converged, history.reason = True, "initial"
    while not history.converged and state.iteration < settings.k_max:
        previous = state
        state = pdap_iterate(state, solver, active)
        history.record(state, [active.size(i) for i in range(problem.n_components)], problem.solver.solve_count)
        if state.cost > previous.cost + 1e-12 * solver.initial_cost:
            logger.warning(
                "Cost increased at iteration %d: %.12e -> %.12e", state.iteration, previous.cost, state.cost
            )
        if state.cost <= best.cost:
            best = state
        if solver.is_converged(state):
            history.converged, history.reason = True, "gap"

    if not history.converged:
        history.reason = "k_max"
        logger.warning("PDAP atingiu k_max=%d sem convergir (gap %.3e)", settings.k_max, state.gap)
        state = best
    logger.info(
        "PDAP concluído após %d iterações: %d átomos, custo %.6e, gap %.3e",
        history.iterations,
        state.control.atom_count(),
        state.cost,
        state.gap,
    )
    return state.control, history


def settings_to_dict(settings: PdapSettings) -> dict:
    return asdict(settings)


__all__ = [
    "ActiveSet",
    "ColumnKey",
    "DiscreteProblem",
    "PdapHistory",
    "PdapSettings",
    "PdapSolver",
    "PdapState",
    "SubproblemModel",
    "SubproblemResult",
    "SubproblemSettings",
    "atom_basis",
    "pdap_iterate",
    "run_pdap",
    "settings_to_dict",
    "solve_magnitude_subproblem",
]
