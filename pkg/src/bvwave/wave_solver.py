"""Space-time P1 discretization of the wave equation: forward, adjoint and oracle solvers."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Protocol

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh, splu

from .errors import ConfigurationError, GridMismatchError, NumericalError, StabilityGateError
from .mesh_fem import SEVEN_POINT, QuadratureRule, SpatialFunction, TriMesh, assemble_load, ritz_projection

logger = logging.getLogger(__name__)

DENSE_EIGEN_LIMIT = 400


class HatIntegrable(Protocol):
    """Time factor whose integrals against the hat functions are known exactly."""

    def hat_integrals(self, grid: "TimeGrid") -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class TimeGrid:
    final_time: float
    steps: int

    def __post_init__(self) -> None:
        if self.final_time <= 0.0 or self.steps < 1:
            raise ConfigurationError(f"Invalid time grid: T={self.final_time}, M={self.steps}")

    @classmethod
    def from_level(cls, k: int, final_time: float = 2.0) -> "TimeGrid":
        """Uniform grid with tau = 2^-k."""
        steps = final_time * 2.0**k
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigurationError(f"T={final_time} is not a multiple of tau=2^-{k}")
        return cls(final_time, int(round(steps)))

    @property
    def tau(self) -> float:
        return self.final_time / self.steps

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.final_time, self.steps + 1)

    def same_as(self, other: "TimeGrid") -> bool:
        return self.steps == other.steps and self.final_time == other.final_time


def time_mass_matrix(grid: TimeGrid) -> sp.csr_matrix:
    """Exact (e_m, e_n)_{L^2(0,T)} for the hat functions."""
    n = grid.steps + 1
    diag = np.full(n, 2.0 * grid.tau / 3.0)
    diag[[0, -1]] = grid.tau / 3.0
    off = np.full(n - 1, grid.tau / 6.0)
    return sp.diags([off, diag, off], [-1, 0, 1], format="csr")


def time_stiffness_matrix(grid: TimeGrid) -> sp.csr_matrix:
    """Exact (e_m', e_n')_{L^2(0,T)} for the hat functions."""
    n = grid.steps + 1
    diag = np.full(n, 2.0 / grid.tau)
    diag[[0, -1]] = 1.0 / grid.tau
    off = np.full(n - 1, -1.0 / grid.tau)
    return sp.diags([off, diag, off], [-1, 0, 1], format="csr")


def time_prolongation(coarse: TimeGrid, fine: TimeGrid) -> sp.csr_matrix:
    """Values of the coarse hat functions at the fine time nodes."""
    if coarse.final_time != fine.final_time or fine.steps % coarse.steps:
        raise GridMismatchError(f"Time grids with M={coarse.steps} and M={fine.steps} are not nested")
    ratio = fine.steps // coarse.steps
    fine_index = np.arange(fine.steps + 1)
    left = fine_index // ratio
    frac = (fine_index % ratio) / ratio
    rows = np.concatenate([fine_index, fine_index])
    cols = np.concatenate([left, np.minimum(left + 1, coarse.steps)])
    data = np.concatenate([1.0 - frac, frac])
    keep = data > 0.0
    matrix = sp.coo_matrix((data[keep], (rows[keep], cols[keep])), shape=(fine.steps + 1, coarse.steps + 1))
    return matrix.tocsr()


@dataclass(frozen=True)
class SchemeParams:
    """Stabilization parameter and the constants of the stability conditions."""

    sigma: float = 0.25
    epsilon0: float = 0.5
    c2: float = 1.0

    def __post_init__(self) -> None:
        if self.sigma < 0.0:
            raise ConfigurationError(f"sigma must be non-negative, got {self.sigma}")
        if not 0.0 < self.epsilon0 <= 1.0:
            raise ConfigurationError(f"epsilon0 must lie in (0, 1], got {self.epsilon0}")
        if self.c2 <= 0.0:
            raise ConfigurationError(f"c2 must be positive, got {self.c2}")

    @property
    def stability_mode(self) -> str:
        return "unconditional" if self.sigma >= 0.25 else "gated"


@dataclass(eq=False)
class SpaceTimeField:
    """Coefficients y[m, i] of a function piecewise linear in time and P1 in space."""

    grid: TimeGrid
    mesh: TriMesh
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.array(self.values, dtype=float)
        expected = (self.grid.steps + 1, self.mesh.n_interior)
        if self.values.shape != expected:
            raise ConfigurationError(f"Field shape {self.values.shape} does not match {expected}")
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("Space-time field contains non-finite entries")
        self.values.setflags(write=False)

    @classmethod
    def zeros(cls, grid: TimeGrid, mesh: TriMesh) -> "SpaceTimeField":
        return cls(grid, mesh, np.zeros((grid.steps + 1, mesh.n_interior)))

    def _check_compatible(self, other: "SpaceTimeField") -> None:
        if other.mesh is not self.mesh or not other.grid.same_as(self.grid):
            raise GridMismatchError("Fields live on different discretizations")

    def __add__(self, other: "SpaceTimeField") -> "SpaceTimeField":
        self._check_compatible(other)
        return SpaceTimeField(self.grid, self.mesh, self.values + other.values)

    def __sub__(self, other: "SpaceTimeField") -> "SpaceTimeField":
        self._check_compatible(other)
        return SpaceTimeField(self.grid, self.mesh, self.values - other.values)

    def scaled(self, factor: float) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, self.mesh, factor * self.values)

    def reversed(self) -> "SpaceTimeField":
        return SpaceTimeField(self.grid, self.mesh, self.values[::-1].copy())

    def slice_norms(self) -> np.ndarray:
        """||y(t_m)||_{L^2(Omega)} for every time node."""
        mass = self.mesh.mass
        return np.sqrt(np.maximum(np.einsum("mi,mi->m", self.values, (mass @ self.values.T).T), 0.0))

    def at_time(self, t: float) -> np.ndarray:
        """Spatial coefficients at time t (linear interpolation between nodes)."""
        nodes = self.grid.nodes
        index = int(np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, self.grid.steps - 1))
        weight = (t - nodes[index]) / self.grid.tau
        return (1.0 - weight) * self.values[index] + weight * self.values[index + 1]

    def evaluate(self, t: float, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        return self.mesh.evaluate(self.at_time(t), x1, x2)


@dataclass(eq=False)
class TimeLoad:
    """Right-hand side values F[m, i] = int_0^T int_Omega f e_m phi_i dx dt."""

    grid: TimeGrid
    mesh: TriMesh
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.grid.steps + 1, self.mesh.n_interior)
        if self.values.shape != expected:
            raise ConfigurationError(f"Load shape {self.values.shape} does not match {expected}")

    @classmethod
    def zeros(cls, grid: TimeGrid, mesh: TriMesh) -> "TimeLoad":
        return cls(grid, mesh, np.zeros((grid.steps + 1, mesh.n_interior)))

    def __add__(self, other: "TimeLoad") -> "TimeLoad":
        return TimeLoad(self.grid, self.mesh, self.values + other.values)

    def __sub__(self, other: "TimeLoad") -> "TimeLoad":
        return TimeLoad(self.grid, self.mesh, self.values - other.values)

    def scaled(self, factor: float) -> "TimeLoad":
        return TimeLoad(self.grid, self.mesh, factor * self.values)

    def reversed(self) -> "TimeLoad":
        """Load of t -> f(T - t); the hat e_m maps onto e_{M-m}."""
        return TimeLoad(self.grid, self.mesh, self.values[::-1].copy())

    def pair(self, field: SpaceTimeField) -> float:
        """Exact space-time L^2 pairing of the load's source with a discrete field."""
        return float(np.sum(self.values * field.values))

    def l1_l2_norm(self) -> float:
        """sum_m ||M^-1 F_m||_M, the L^1(0, T; L^2) norm of the source as seen by the load."""
        projected = self.mesh.mass_factor.solve(self.values.T).T
        return float(np.sum(np.sqrt(np.maximum(np.einsum("mi,mi->m", projected, self.values), 0.0))))


def field_load(field: SpaceTimeField) -> TimeLoad:
    mass_t = time_mass_matrix(field.grid)
    values = mass_t @ (field.mesh.mass @ field.values.T).T
    return TimeLoad(field.grid, field.mesh, values)


def separable_load(time_factor: HatIntegrable, spatial_load: np.ndarray, grid: TimeGrid, mesh: TriMesh) -> TimeLoad:
    """Load of f(t, x) = u(t) g(x) given u and the vector (g, phi_i)."""
    weights = np.asarray(time_factor.hat_integrals(grid), dtype=float)
    return TimeLoad(grid, mesh, np.outer(weights, spatial_load))


def space_time_inner(a: SpaceTimeField, b: SpaceTimeField) -> float:
    """Exact L^2(Omega_T) inner product of two fields on the same discretization."""
    a._check_compatible(b)
    return field_load(b).pair(a)


def max_generalized_eigenvalue(stiffness: sp.spmatrix, mass: sp.spmatrix) -> float:
    n = stiffness.shape[0]
    if n <= DENSE_EIGEN_LIMIT:
        values = scipy.linalg.eigh(stiffness.toarray(), mass.toarray(), eigvals_only=True)
        return float(values[-1])
    value = eigsh(stiffness.tocsc(), k=1, M=mass.tocsc(), which="LA", return_eigenvectors=False)
    return float(value[0])


@dataclass(frozen=True)
class GateReport:
    """Outcome of the stability conditions for one (sigma, tau, h) triple."""

    sigma: float
    tau: float
    h: float
    c1: float
    c2: float
    epsilon0: float
    margins: tuple[float, float, float]
    required: tuple[bool, bool, bool]

    @property
    def failed(self) -> list[int]:
        return [index + 1 for index, (margin, req) in enumerate(zip(self.margins, self.required)) if req and margin < 0.0]

    @property
    def passed(self) -> bool:
        return not self.failed

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "tau": self.tau,
            "h": self.h,
            "c1": self.c1,
            "c2": self.c2,
            "epsilon0": self.epsilon0,
            "margins": list(self.margins),
            "required": list(self.required),
            "failed": self.failed,
            "passed": self.passed,
        }


def stability_gate(params: SchemeParams, grid: TimeGrid, mesh: TriMesh, *, c1: float | None = None) -> GateReport:
    """Check the three (sigma, tau, h) conditions; the first two are implied when sigma >= 1/4.

    c1 is measured as 1/(h^2 lambda_max) so that the first condition is the exact
    von Neumann bound sigma >= 1/4 - 1/(tau^2 lambda_max) when epsilon0 -> 0.
    """
    tau, h = grid.tau, mesh.h
    if c1 is None:
        lam_max = max_generalized_eigenvalue(mesh.stiffness, mesh.mass)
        c1 = 1.0 / (h * h * lam_max)
    sigma, eps2, c2 = params.sigma, params.epsilon0**2, params.c2
    ratio = c1 * h * h / (tau * tau)
    margins = (
        sigma - (0.25 - ratio * (1.0 - eps2)),
        sigma - ((1.0 + eps2) / 4.0 - ratio),
        2.0 * (c2 * h * h + tau * tau) - abs(sigma) * tau * tau,
    )
    gated = params.stability_mode == "gated"
    report = GateReport(sigma, tau, h, c1, c2, params.epsilon0, margins, (gated, gated, True))
    logger.debug("Stability gate: sigma=%g tau=%g h=%g c1=%.4g margins=%s", sigma, tau, h, c1, margins)
    return report


@dataclass(frozen=True)
class StabilityReport:
    state_norm: float
    data_norm: float

    @property
    def ratio(self) -> float | None:
        """None when both norms vanish (vacuous bound)."""
        if self.data_norm == 0.0:
            return None if self.state_norm == 0.0 else math.inf
        return self.state_norm / self.data_norm


def stability_norm_check(
    field: SpaceTimeField,
    *,
    y0: np.ndarray | None = None,
    y1: np.ndarray | None = None,
    f_l1_l2: float = 0.0,
) -> StabilityReport:
    """Compare max_m ||y_m|| with ||y0||_{H^1_0} + ||y1||_{L^2} + ||f||_{L^1(L^2)}."""
    mesh = field.mesh
    data = f_l1_l2
    if y0 is not None:
        data += math.sqrt(max(float(y0 @ (mesh.stiffness @ y0)), 0.0))
    if y1 is not None:
        data += math.sqrt(max(float(y1 @ (mesh.mass @ y1)), 0.0))
    return StabilityReport(float(np.max(field.slice_norms())), float(data))


class WaveSolver:
    """Three-level time stepping for the stabilized space-time scheme.

    Interior steps solve (M + sigma tau^2 K) D^2 y_m + K y_m = F_m / tau, the first
    step (M + sigma tau^2 K)(y_1 - y_0)/tau + tau/2 K y_0 = (y1, phi) + F_0.
    The matrix M + sigma tau^2 K is factored once.
    """

    def __init__(
        self,
        mesh: TriMesh,
        grid: TimeGrid,
        params: SchemeParams | None = None,
        *,
        rule: QuadratureRule = SEVEN_POINT,
        gate: GateReport | None = None,
    ) -> None:
        self.mesh = mesh
        self.grid = grid
        self.params = params or SchemeParams()
        self.rule = rule
        self.mass = mesh.mass
        self.stiffness = mesh.stiffness
        self.gate = gate or stability_gate(self.params, grid, mesh)
        if not self.gate.passed:
            raise StabilityGateError(self.gate.failed, self.gate)
        lhs = self.mass + (self.params.sigma * grid.tau**2) * self.stiffness
        try:
            self._factor = splu(lhs.tocsc())
        except RuntimeError as exc:
            raise NumericalError("Factorization of M + sigma tau^2 K failed") from exc
        self.solve_count = 0
        logger.debug(
            "Factored step matrix for level %d, M=%d, sigma=%g", mesh.level, grid.steps, self.params.sigma
        )

    def _initial_displacement(self, y0: SpatialFunction | np.ndarray | None) -> np.ndarray:
        if y0 is None:
            return np.zeros(self.mesh.n_interior)
        if isinstance(y0, np.ndarray):
            return np.asarray(y0, dtype=float)
        return ritz_projection(self.mesh, y0, self.rule)

    def _initial_velocity_load(self, y1: SpatialFunction | np.ndarray | None) -> np.ndarray:
        if y1 is None:
            return np.zeros(self.mesh.n_interior)
        if isinstance(y1, np.ndarray):
            return self.mass @ y1
        return assemble_load(self.mesh, y1, self.rule)

    def solve_forward(
        self,
        load: TimeLoad | None = None,
        y0: SpatialFunction | np.ndarray | None = None,
        y1: SpatialFunction | np.ndarray | None = None,
    ) -> SpaceTimeField:
        """y_theta for source load and initial data; functions y0 are Ritz-projected."""
        grid, tau = self.grid, self.grid.tau
        if load is None:
            forcing = np.zeros((grid.steps + 1, self.mesh.n_interior))
        else:
            if load.mesh is not self.mesh or not load.grid.same_as(grid):
                raise GridMismatchError("Load and solver live on different discretizations")
            forcing = load.values
        y = np.zeros((grid.steps + 1, self.mesh.n_interior))
        y[0] = self._initial_displacement(y0)
        rhs = self._initial_velocity_load(y1) + forcing[0] - 0.5 * tau * (self.stiffness @ y[0])
        y[1] = y[0] + tau * self._factor.solve(rhs)
        for m in range(1, grid.steps):
            rhs = forcing[m] / tau - self.stiffness @ y[m]
            y[m + 1] = 2.0 * y[m] - y[m - 1] + tau * tau * self._factor.solve(rhs)
        self.solve_count += 1
        if not np.all(np.isfinite(y)):
            raise NumericalError("Time stepping produced non-finite values")
        return SpaceTimeField(grid, self.mesh, y)

    def solve_adjoint(self, w: TimeLoad | SpaceTimeField) -> SpaceTimeField:
        """Discrete adjoint by time reversal; vanishes at t = T."""
        load = field_load(w) if isinstance(w, SpaceTimeField) else w
        return self.solve_forward(load.reversed()).reversed()


def galerkin_oracle(
    load: TimeLoad | None,
    y0: np.ndarray | None,
    y1: np.ndarray | None,
    params: SchemeParams,
    grid: TimeGrid,
    mesh: TriMesh,
    *,
    max_size: int = 2000,
) -> SpaceTimeField:
    """Solve the coupled space-time system of the weak form directly (small problems only).

    Test functions e_n phi_i for n = 0..M-1; the first block row pins y(0) = y0.
    """
    n_dofs = mesh.n_interior
    size = (grid.steps + 1) * n_dofs
    if size > max_size:
        raise ConfigurationError(f"Space-time system of size {size} exceeds the oracle limit {max_size}")
    mass = mesh.mass.toarray()
    stiff = mesh.stiffness.toarray()
    tau = grid.tau
    d_t = time_stiffness_matrix(grid).toarray()[:-1]
    m_t = time_mass_matrix(grid).toarray()[:-1]
    block = (
        -np.kron(d_t, mass)
        - (params.sigma - 1.0 / 6.0) * tau * tau * np.kron(d_t, stiff)
        + np.kron(m_t, stiff)
    )
    initial = np.zeros((n_dofs, size))
    initial[:, :n_dofs] = np.eye(n_dofs)
    system = np.vstack([initial, block])

    forcing = np.zeros((grid.steps + 1, n_dofs)) if load is None else load.values
    rhs_rows = forcing[:-1].copy()
    if y1 is not None:
        rhs_rows[0] += mass @ y1
    start = np.zeros(n_dofs) if y0 is None else np.asarray(y0, dtype=float)
    rhs = np.concatenate([start, rhs_rows.ravel()])
    try:
        solution = scipy.linalg.solve(system, rhs)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError("Space-time Galerkin system is singular") from exc
    return SpaceTimeField(grid, mesh, solution.reshape(grid.steps + 1, n_dofs))


__all__ = [
    "GateReport",
    "HatIntegrable",
    "SchemeParams",
    "SpaceTimeField",
    "StabilityReport",
    "TimeGrid",
    "TimeLoad",
    "WaveSolver",
    "field_load",
    "galerkin_oracle",
    "max_generalized_eigenvalue",
    "separable_load",
    "space_time_inner",
    "stability_gate",
    "stability_norm_check",
    "time_mass_matrix",
    "time_prolongation",
    "time_stiffness_matrix",
]
