"""Uniform P1 triangulations of (-1, 1)^2: assembly, quadrature and Ritz projection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigurationError, GridMismatchError, NumericalError

logger = logging.getLogger(__name__)

MIN_LEVEL = 1
MAX_LEVEL = 10

Field2D = Callable[[np.ndarray, np.ndarray], np.ndarray]
Gradient2D = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class SpatialFunction:
    """Scalar function on the domain, optionally with its analytic gradient."""

    value: Field2D
    gradient: Gradient2D | None = None
    name: str = "f"

    def __call__(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        out = np.asarray(self.value(x1, np.asarray(x2, dtype=float)), dtype=float)
        return np.broadcast_to(out, x1.shape).copy()

    def grad(self, x1: np.ndarray, x2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.gradient is None:
            raise ConfigurationError(f"Function {self.name!r} has no gradient")
        x1 = np.asarray(x1, dtype=float)
        d1, d2 = self.gradient(x1, np.asarray(x2, dtype=float))
        return (
            np.broadcast_to(np.asarray(d1, dtype=float), x1.shape).copy(),
            np.broadcast_to(np.asarray(d2, dtype=float), x1.shape).copy(),
        )


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Symmetric rule on a triangle; weights are normalized to sum to one."""

    name: str
    points: np.ndarray  # (n, 3) barycentric coordinates
    weights: np.ndarray  # (n,)
    degree: int


def edge_midpoint_rule() -> QuadratureRule:
    """Three-point rule at the edge midpoints, exact for degree 2."""
    points = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    return QuadratureRule("three_point", points, np.full(3, 1.0 / 3.0), 2)


def seven_point_rule() -> QuadratureRule:
    """Degree-5 rule: centroid plus two three-point orbits."""
    root = math.sqrt(15.0)
    a1, b1 = (9.0 - 2.0 * root) / 21.0, (6.0 + root) / 21.0
    a2, b2 = (9.0 + 2.0 * root) / 21.0, (6.0 - root) / 21.0
    w1, w2 = (155.0 + root) / 1200.0, (155.0 - root) / 1200.0
    points = np.array(
        [
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            [a1, b1, b1],
            [b1, a1, b1],
            [b1, b1, a1],
            [a2, b2, b2],
            [b2, a2, b2],
            [b2, b2, a2],
        ]
    )
    weights = np.array([9.0 / 40.0, w1, w1, w1, w2, w2, w2])
    return QuadratureRule("seven_point", points, weights, 5)


THREE_POINT = edge_midpoint_rule()
SEVEN_POINT = seven_point_rule()
_RULES = {"three_point": THREE_POINT, "seven_point": SEVEN_POINT}


def get_rule(name: str) -> QuadratureRule:
    try:
        return _RULES[name]
    except KeyError as exc:
        raise ConfigurationError(f"Unknown quadrature rule: {name}") from exc


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Criss-cross triangulation of (-1, 1)^2 with 2^k x 2^k squares."""

    level: int
    nodes: np.ndarray  # (n_nodes, 2)
    triangles: np.ndarray  # (n_triangles, 3), counter-clockwise
    boundary_mask: np.ndarray  # (n_nodes,)
    h: float

    @property
    def cells_per_side(self) -> int:
        return 2**self.level

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @property
    def n_interior(self) -> int:
        return int(self.interior.size)

    @cached_property
    def interior_index(self) -> np.ndarray:
        """Map from node number to interior dof number (-1 on the boundary)."""
        index = np.full(len(self.nodes), -1, dtype=np.int64)
        index[self.interior] = np.arange(self.n_interior)
        return index

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """Constant gradients of the three barycentric coordinates, shape (n_t, 3, 2)."""
        p = self.nodes[self.triangles]
        twice_area = 2.0 * self.signed_areas
        grads = np.empty((len(self.triangles), 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            grads[:, a, 0] = (p[:, b, 1] - p[:, c, 1]) / twice_area
            grads[:, a, 1] = (p[:, c, 0] - p[:, b, 0]) / twice_area
        return grads

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return assemble_mass(self)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        return assemble_stiffness(self)

    @cached_property
    def mass_factor(self):
        return _factorize(self.mass, "Mass")

    @cached_property
    def stiffness_factor(self):
        """Sparse LU of the interior stiffness matrix, shared by all Ritz projections."""
        return _factorize(self.stiffness, "Stiffness")

    def quadrature_points(self, rule: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
        p = self.nodes[self.triangles]
        x = np.einsum("qa,tad->tqd", rule.points, p)
        return x[..., 0], x[..., 1]

    def to_full(self, coefficients: np.ndarray) -> np.ndarray:
        """Extend interior coefficients by the homogeneous boundary values."""
        coefficients = np.asarray(coefficients, dtype=float)
        full = np.zeros(coefficients.shape[:-1] + (len(self.nodes),))
        full[..., self.interior] = coefficients
        return full

    def locate(self, x1: np.ndarray, x2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return the containing triangle and barycentric coordinates of each point."""
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        x2 = np.atleast_1d(np.asarray(x2, dtype=float))
        tol = 1e-12
        if np.any(np.abs(x1) > 1.0 + tol) or np.any(np.abs(x2) > 1.0 + tol):
            raise GridMismatchError("Point outside of the domain (-1, 1)^2")
        n = self.cells_per_side
        s1 = (x1 + 1.0) * n / 2.0
        s2 = (x2 + 1.0) * n / 2.0
        ix = np.clip(np.floor(s1), 0, n - 1).astype(np.int64)
        iy = np.clip(np.floor(s2), 0, n - 1).astype(np.int64)
        u = s1 - ix
        v = s2 - iy
        lower = v <= u
        square = iy * n + ix
        triangle = np.where(lower, square, n * n + square)
        bary = np.where(
            lower[:, None],
            np.column_stack([1.0 - u, u - v, v]),
            np.column_stack([1.0 - v, u, v - u]),
        )
        return triangle, bary

    def evaluate(self, coefficients: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Evaluate the P1 function with the given interior coefficients at points."""
        shape = np.shape(x1)
        triangle, bary = self.locate(np.ravel(x1), np.ravel(x2))
        full = self.to_full(coefficients)
        values = np.einsum("pa,pa->p", bary, full[self.triangles[triangle]])
        return values.reshape(shape)


def _factorize(matrix: sp.csr_matrix, name: str):
    try:
        return splu(matrix.tocsc())
    except RuntimeError as exc:
        raise NumericalError(f"{name} matrix is singular") from exc


def build_uniform_mesh(k: int) -> TriMesh:
    """Split 2^k x 2^k squares of (-1, 1)^2 along the lower-left/upper-right diagonal."""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not MIN_LEVEL <= k <= MAX_LEVEL:
        raise ConfigurationError(f"Mesh level must be an integer in [{MIN_LEVEL}, {MAX_LEVEL}], got {k!r}")
    k = int(k)
    n = 2**k
    coords = np.linspace(-1.0, 1.0, n + 1)
    x1, x2 = np.meshgrid(coords, coords, indexing="xy")
    nodes = np.column_stack([x1.ravel(), x2.ravel()])
    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    a = (iy * (n + 1) + ix).ravel()
    b = a + 1
    c = a + n + 2
    d = a + n + 1
    triangles = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    boundary = (np.abs(nodes[:, 0]) == 1.0) | (np.abs(nodes[:, 1]) == 1.0)

    p = nodes[triangles]
    edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    h = float(np.max(np.linalg.norm(edges, axis=2)))
    mesh = TriMesh(level=k, nodes=nodes, triangles=triangles, boundary_mask=boundary, h=h)
    if np.any(mesh.signed_areas <= 0.0):
        raise NumericalError("Mesh construction produced a degenerate or inverted triangle")
    logger.debug("Built level-%d mesh: %d nodes, %d triangles, h=%.6g", k, len(nodes), len(triangles), h)
    return mesh


def _assemble(mesh: TriMesh, local: np.ndarray, full: bool) -> sp.csr_matrix:
    rows = np.repeat(mesh.triangles[:, :, None], 3, axis=2).ravel()
    cols = np.repeat(mesh.triangles[:, None, :], 3, axis=1).ravel()
    n = len(mesh.nodes)
    # Off-diagonal entries receive at most two contributions, so the sum is order independent.
    matrix = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    if full:
        return matrix
    inner = mesh.interior
    return matrix[inner][:, inner].tocsr()


def assemble_mass(mesh: TriMesh, *, full: bool = False) -> sp.csr_matrix:
    """Consistent P1 mass matrix, closed-form element integrals."""
    template = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = mesh.signed_areas[:, None, None] * template[None, :, :]
    return _assemble(mesh, local, full)


def assemble_stiffness(mesh: TriMesh, *, full: bool = False) -> sp.csr_matrix:
    """P1 stiffness matrix (grad phi_i, grad phi_j)."""
    grads = mesh.barycentric_gradients
    local = mesh.signed_areas[:, None, None] * np.einsum("tad,tbd->tab", grads, grads)
    return _assemble(mesh, local, full)


def assemble_load(
    mesh: TriMesh,
    f: SpatialFunction | Field2D,
    rule: QuadratureRule = SEVEN_POINT,
    *,
    full: bool = False,
) -> np.ndarray:
    """Load vector b_i = int f phi_i dx computed with the given triangle rule."""
    x1, x2 = mesh.quadrature_points(rule)
    values = np.broadcast_to(np.asarray(f(x1, x2), dtype=float), x1.shape)
    local = mesh.signed_areas[:, None] * np.einsum("q,tq,qa->ta", rule.weights, values, rule.points)
    vector = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=len(mesh.nodes))
    return vector if full else vector[mesh.interior]


def ritz_projection(
    mesh: TriMesh,
    y0: SpatialFunction | np.ndarray,
    rule: QuadratureRule = SEVEN_POINT,
) -> np.ndarray:
    """Solve (grad R_h y0, grad phi) = (grad y0, grad phi) for all interior phi."""
    stiffness = mesh.stiffness
    if isinstance(y0, np.ndarray):
        if y0.shape != (mesh.n_interior,):
            raise ConfigurationError("Coefficient vector does not match the interior dofs")
        rhs = stiffness @ y0
    else:
        x1, x2 = mesh.quadrature_points(rule)
        d1, d2 = y0.grad(x1, x2)
        mean_grad = np.stack(
            [np.einsum("q,tq->t", rule.weights, d1), np.einsum("q,tq->t", rule.weights, d2)], axis=1
        )
        local = mesh.signed_areas[:, None] * np.einsum("tad,td->ta", mesh.barycentric_gradients, mean_grad)
        full = np.bincount(mesh.triangles.ravel(), weights=local.ravel(), minlength=len(mesh.nodes))
        rhs = full[mesh.interior]
    return mesh.stiffness_factor.solve(rhs)


def l2_error(
    mesh: TriMesh,
    coefficients: np.ndarray,
    f: SpatialFunction | Field2D | None = None,
    rule: QuadratureRule = SEVEN_POINT,
) -> float:
    """||u_h - f||_{L^2} by quadrature; with f=None the norm of u_h."""
    x1, x2 = mesh.quadrature_points(rule)
    full = mesh.to_full(coefficients)
    uh = np.einsum("qa,ta->tq", rule.points, full[mesh.triangles])
    if f is not None:
        uh = uh - np.broadcast_to(np.asarray(f(x1, x2), dtype=float), x1.shape)
    return float(np.sqrt(np.sum(mesh.signed_areas[:, None] * rule.weights[None, :] * uh**2)))


def prolongation_matrix(coarse: TriMesh, fine: TriMesh) -> sp.csr_matrix:
    """Interpolate the interior coarse P1 basis onto the interior nodes of a nested mesh."""
    if fine.level < coarse.level:
        raise GridMismatchError(f"Level {fine.level} is coarser than level {coarse.level}")
    points = fine.nodes[fine.interior]
    triangle, bary = coarse.locate(points[:, 0], points[:, 1])
    coarse_nodes = coarse.triangles[triangle]
    columns = coarse.interior_index[coarse_nodes]
    rows = np.repeat(np.arange(fine.n_interior)[:, None], 3, axis=1)
    keep = (columns >= 0) & (bary > 1e-14)
    matrix = sp.coo_matrix(
        (bary[keep], (rows[keep], columns[keep])), shape=(fine.n_interior, coarse.n_interior)
    )
    return matrix.tocsr()


__all__ = [
    "MAX_LEVEL",
    "MIN_LEVEL",
    "QuadratureRule",
    "SEVEN_POINT",
    "SpatialFunction",
    "THREE_POINT",
    "TriMesh",
    "assemble_load",
    "assemble_mass",
    "assemble_stiffness",
    "build_uniform_mesh",
    "edge_midpoint_rule",
    "get_rule",
    "l2_error",
    "prolongation_matrix",
    "ritz_projection",
    "seven_point_rule",
]
