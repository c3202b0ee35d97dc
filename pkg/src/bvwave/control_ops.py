"""Measure controls, their BV representatives and the adjoint switching functions."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ControlError
from .wave_solver import SpaceTimeField, TimeGrid

logger = logging.getLogger(__name__)

BREAKPOINT_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Piecewise constant function: values[k] on (breakpoints[k], breakpoints[k + 1]]."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        breaks = np.asarray(self.breakpoints, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if breaks.ndim != 1 or values.shape != (breaks.size - 1,) or breaks.size < 2:
            raise ConfigurationError("Step function needs K+1 breakpoints for K values")
        if np.any(np.diff(breaks) <= 0.0):
            raise ConfigurationError("Step function breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", breaks)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value: float, final_time: float) -> "StepFunction":
        return cls(np.array([0.0, final_time]), np.array([value]))

    @classmethod
    def from_jumps(
        cls, times: Sequence[float], heights: Sequence[float], offset: float, final_time: float
    ) -> "StepFunction":
        """u(t) = sum_l c_l (1_{(t_l, T]}(t) - (T - t_l)/T) + offset."""
        times = np.asarray(times, dtype=float)
        heights = np.asarray(heights, dtype=float)
        order = np.argsort(times, kind="stable")
        times, heights = times[order], heights[order]
        base = offset - float(np.sum(heights * (final_time - times))) / final_time
        values = base + np.concatenate([[0.0], np.cumsum(heights)])
        return cls(np.concatenate([[0.0], times, [final_time]]), values)

    @property
    def final_time(self) -> float:
        return float(self.breakpoints[-1])

    def __call__(self, t: np.ndarray | float) -> np.ndarray:
        index = np.searchsorted(self.breakpoints, t, side="left") - 1
        return self.values[np.clip(index, 0, self.values.size - 1)]

    def integral(self) -> float:
        return float(np.sum(self.values * np.diff(self.breakpoints)))

    def mean(self) -> float:
        return self.integral() / (self.breakpoints[-1] - self.breakpoints[0])

    def l1_norm(self) -> float:
        return float(np.sum(np.abs(self.values) * np.diff(self.breakpoints)))

    def total_variation(self) -> float:
        return float(np.sum(np.abs(np.diff(self.values))))

    def jumps(self) -> tuple[np.ndarray, np.ndarray]:
        """Interior breakpoints with a non-zero jump and the jump heights."""
        heights = np.diff(self.values)
        keep = heights != 0.0
        return self.breakpoints[1:-1][keep], heights[keep]

    def hat_integrals(self, grid: TimeGrid) -> np.ndarray:
        """Exact int_0^T u e_m dt for every hat function of the grid."""
        nodes = grid.nodes
        tol = BREAKPOINT_TOL * grid.final_time
        points = np.union1d(nodes, np.clip(self.breakpoints, 0.0, grid.final_time))
        a, b = points[:-1], points[1:]
        keep = b - a > tol
        a, b = a[keep], b[keep]
        mid = 0.5 * (a + b)
        values = self(mid)
        interval = np.clip(np.searchsorted(nodes, mid), 1, grid.steps)
        left = nodes[interval - 1]
        tau = nodes[interval] - left
        rising = ((b - left) ** 2 - (a - left) ** 2) / (2.0 * tau)
        falling = (b - a) - rising
        out = np.zeros(grid.steps + 1)
        np.add.at(out, interval, values * rising)
        np.add.at(out, interval - 1, values * falling)
        return out


@dataclass(frozen=True, eq=False)
class ComponentMeasure:
    """Finite Dirac sum sum_l weights[l] delta_{times[l]} for one control component."""

    times: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if times.shape != weights.shape or times.ndim != 1:
            raise ControlError("Atom times and weights must be 1-D arrays of equal length")
        if np.any(np.diff(times) <= 0.0):
            raise ControlError("Atom times must be strictly increasing")
        if not np.all(np.isfinite(weights)):
            raise ControlError("Atom weights must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def empty(cls) -> "ComponentMeasure":
        return cls(np.zeros(0), np.zeros(0))

    @property
    def size(self) -> int:
        return int(self.times.size)

    def norm(self) -> float:
        """Total variation norm of the measure."""
        return float(np.sum(np.abs(self.weights)))


@dataclass(frozen=True, eq=False)
class MeasureControl:
    """Pair (v, c): per-component Dirac measures and the offsets (means)."""

    components: tuple[ComponentMeasure, ...]
    offsets: np.ndarray
    final_time: float

    def __post_init__(self) -> None:
        offsets = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        if offsets.shape != (len(self.components),):
            raise ControlError("One offset per control component is required")
        for index, component in enumerate(self.components):
            if component.size and (component.times[0] <= 0.0 or component.times[-1] >= self.final_time):
                raise ControlError(f"Component {index} has atoms outside (0, {self.final_time})")
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def zeros(cls, n_components: int, final_time: float) -> "MeasureControl":
        return cls(tuple(ComponentMeasure.empty() for _ in range(n_components)), np.zeros(n_components), final_time)

    @property
    def n_components(self) -> int:
        return len(self.components)

    def atom_count(self) -> int:
        return sum(component.size for component in self.components)

    def total_variation(self) -> np.ndarray:
        return np.array([component.norm() for component in self.components])

    def pruned(self, tol: float = 0.0) -> "MeasureControl":
        """Drop atoms with |weight| <= tol."""
        kept = []
        for component in self.components:
            mask = np.abs(component.weights) > tol
            kept.append(ComponentMeasure(component.times[mask], component.weights[mask]))
        return MeasureControl(tuple(kept), self.offsets, self.final_time)

    def to_dict(self) -> dict:
        return {
            "final_time": self.final_time,
            "offsets": [float(c) for c in self.offsets],
            "atoms": [
                {"component": index, "time": float(t), "weight": float(w)}
                for index, component in enumerate(self.components)
                for t, w in zip(component.times, component.weights)
            ],
        }


def apply_B(control: MeasureControl) -> tuple[StepFunction, ...]:
    """BV representatives u_i of (v, c); the spatial factors g_i stay separate."""
    return tuple(
        StepFunction.from_jumps(component.times, component.weights, offset, control.final_time)
        for component, offset in zip(control.components, control.offsets)
    )


def recover_control(steps: Sequence[StepFunction]) -> MeasureControl:
    """Inverse of apply_B: jump set and heights as atoms, means as offsets."""
    if not steps:
        raise ConfigurationError("At least one component is required")
    final_time = steps[0].final_time
    components = []
    for step in steps:
        times, heights = step.jumps()
        components.append(ComponentMeasure(times, heights))
    return MeasureControl(tuple(components), np.array([step.mean() for step in steps]), final_time)


@dataclass(frozen=True, eq=False)
class PiecewiseLinear:
    """Continuous piecewise linear functions given by nodal values, shape (m, M+1)."""

    nodes: np.ndarray
    values: np.ndarray

    def __call__(self, t: np.ndarray | float, component: int = 0) -> np.ndarray:
        return np.interp(t, self.nodes, self.values[component])

    def roots(self, component: int = 0) -> np.ndarray:
        """All zeros: nodes with value 0 and sign changes inside intervals."""
        v = self.values[component]
        found = list(self.nodes[v == 0.0])
        left, right = v[:-1], v[1:]
        crossing = np.flatnonzero(left * right < 0.0)
        for m in crossing:
            frac = left[m] / (left[m] - right[m])
            found.append(self.nodes[m] + frac * (self.nodes[m + 1] - self.nodes[m]))
        return np.sort(np.array(found, dtype=float))


@dataclass(frozen=True, eq=False)
class PiecewiseQuadratic:
    """Per interval [t_{m-1}, t_m]: a + b s + c s^2 with s = t - t_{m-1}; coeffs shape (m, M, 3)."""

    nodes: np.ndarray
    coeffs: np.ndarray

    @classmethod
    def antiderivative_from_end(cls, nodes: np.ndarray, rates: np.ndarray) -> "PiecewiseQuadratic":
        """F(t) = -int_t^T s(r) dr for s piecewise linear with nodal values rates (m, M+1)."""
        nodes = np.asarray(nodes, dtype=float)
        rates = np.atleast_2d(np.asarray(rates, dtype=float))
        widths = np.diff(nodes)
        pieces = 0.5 * widths * (rates[:, :-1] + rates[:, 1:])
        at_nodes = np.zeros_like(rates)
        at_nodes[:, :-1] = -np.cumsum(pieces[:, ::-1], axis=1)[:, ::-1]
        coeffs = np.stack(
            [at_nodes[:, :-1], rates[:, :-1], (rates[:, 1:] - rates[:, :-1]) / (2.0 * widths)], axis=2
        )
        return cls(nodes, coeffs)

    @property
    def n_components(self) -> int:
        return int(self.coeffs.shape[0])

    @property
    def final_time(self) -> float:
        return float(self.nodes[-1])

    def __call__(self, t: np.ndarray | float, component: int = 0) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        index = np.clip(np.searchsorted(self.nodes, t, side="right") - 1, 0, self.nodes.size - 2)
        s = t - self.nodes[index]
        a, b, c = (self.coeffs[component, index, j] for j in range(3))
        return a + s * (b + s * c)

    def node_values(self) -> np.ndarray:
        """Values at all nodes, shape (m, M+1), the last one from the final interval."""
        widths = np.diff(self.nodes)
        last = self.coeffs[:, -1]
        end = last[:, 0] + widths[-1] * (last[:, 1] + widths[-1] * last[:, 2])
        return np.concatenate([self.coeffs[:, :, 0], end[:, None]], axis=1)

    def continuity_mismatch(self) -> float:
        widths = np.diff(self.nodes)
        a, b, c = self.coeffs[..., 0], self.coeffs[..., 1], self.coeffs[..., 2]
        right = a + widths * (b + widths * c)
        if right.shape[1] < 2:
            return 0.0
        return float(np.max(np.abs(right[:, :-1] - a[:, 1:])))

    def derivative(self) -> PiecewiseLinear:
        widths = np.diff(self.nodes)
        b, c = self.coeffs[..., 1], self.coeffs[..., 2]
        end = b[:, -1] + 2.0 * c[:, -1] * widths[-1]
        return PiecewiseLinear(self.nodes, np.concatenate([b, end[:, None]], axis=1))

    def plus_linear(self, at_start: np.ndarray, at_end: np.ndarray) -> "PiecewiseQuadratic":
        """Add the linear function through (0, at_start) and (T, at_end) per component."""
        at_start = np.atleast_1d(np.asarray(at_start, dtype=float))
        at_end = np.atleast_1d(np.asarray(at_end, dtype=float))
        t0, t1 = self.nodes[0], self.nodes[-1]
        slope = (at_end - at_start) / (t1 - t0)
        coeffs = self.coeffs.copy()
        coeffs[..., 0] += at_start[:, None] + slope[:, None] * (self.nodes[None, :-1] - t0)
        coeffs[..., 1] += slope[:, None]
        return PiecewiseQuadratic(self.nodes, coeffs)

    def scaled(self, factor: float) -> "PiecewiseQuadratic":
        return PiecewiseQuadratic(self.nodes, factor * self.coeffs)

    def critical_points(self, component: int = 0) -> np.ndarray:
        """Interior vertices of the parabolas, i.e. roots of the derivative inside intervals."""
        widths = np.diff(self.nodes)
        b, c = self.coeffs[component, :, 1], self.coeffs[component, :, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(c != 0.0, -b / (2.0 * c), np.nan)
        inside = np.isfinite(s) & (s > 0.0) & (s < widths)
        return self.nodes[:-1][inside] + s[inside]


def compute_z(p1: PiecewiseQuadratic) -> PiecewiseLinear:
    """Switching function z = d/dt p1."""
    return p1.derivative()


def global_max_abs(p1: PiecewiseQuadratic, component: int = 0) -> tuple[float, float]:
    """Exact maximizer of |p1_i| over [0, T]; ties go to the smallest t."""
    candidates = np.concatenate([p1.nodes, p1.critical_points(component)])
    candidates = np.sort(candidates, kind="stable")
    values = np.abs(p1(candidates, component))
    best = int(np.argmax(values))
    return float(candidates[best]), float(values[best])


def _pairings(field: SpaceTimeField, spatial_loads: np.ndarray) -> np.ndarray:
    """int_Omega q(t_m) g_j dx at every time node, shape (m, M+1)."""
    loads = np.atleast_2d(np.asarray(spatial_loads, dtype=float))
    return loads @ field.values.T


def apply_B_star(q: SpaceTimeField, spatial_loads: np.ndarray) -> tuple[PiecewiseQuadratic, np.ndarray]:
    """Predual of B: w_j'(t) = int_t^T int q g_j + (t - T)/T int_0^T int q g_j, and the pairings."""
    antiderivative = PiecewiseQuadratic.antiderivative_from_end(q.grid.nodes, _pairings(q, spatial_loads))
    totals = -antiderivative.node_values()[:, 0]
    w_prime = antiderivative.scaled(-1.0).plus_linear(-totals, np.zeros_like(totals))
    return w_prime, totals


def compute_p1(p: SpaceTimeField, spatial_loads: np.ndarray) -> PiecewiseQuadratic:
    """p1_i(t) = -int_t^T int_Omega p g_i dx ds, exact for p piecewise linear in time."""
    return PiecewiseQuadratic.antiderivative_from_end(p.grid.nodes, _pairings(p, spatial_loads))


def dual_certificate(p1: PiecewiseQuadratic) -> PiecewiseQuadratic:
    """eta_i(t) = p1_i(t) - (1 - t/T) p1_i(0), the negative measure gradient of the reduced cost."""
    start = p1.node_values()[:, 0]
    return p1.plus_linear(-start, np.zeros_like(start))


def l1_distance(u: StepFunction, w: StepFunction) -> float:
    """Exact ||u - w||_{L^1} by merging the breakpoints."""
    if abs(u.final_time - w.final_time) > BREAKPOINT_TOL * u.final_time:
        raise ConfigurationError("Step functions live on different time intervals")
    points = np.union1d(u.breakpoints, w.breakpoints)
    a, b = points[:-1], points[1:]
    keep = b - a > BREAKPOINT_TOL * u.final_time
    a, b = a[keep], b[keep]
    mid = 0.5 * (a + b)
    return float(np.sum(np.abs(u(mid) - w(mid)) * (b - a)))


@dataclass(frozen=True)
class KktReport:
    """Computable optimality certificate of a candidate control."""

    sup_ratio: tuple[float, ...]
    start_ratio: tuple[float, ...]
    certificate_ratio: tuple[float, ...]
    sign_aligned: tuple[bool, ...]
    tol: float

    @property
    def holds(self) -> bool:
        return (
            all(r <= 1.0 + self.tol for r in self.sup_ratio)
            and all(r <= self.tol for r in self.start_ratio)
            and all(self.sign_aligned)
        )

    def to_dict(self) -> dict:
        return {
            "sup_ratio": list(self.sup_ratio),
            "start_ratio": list(self.start_ratio),
            "certificate_ratio": list(self.certificate_ratio),
            "sign_aligned": list(self.sign_aligned),
            "tol": self.tol,
            "holds": self.holds,
        }


def kkt_certificate(
    p1: PiecewiseQuadratic, control: MeasureControl, alpha: Sequence[float], tol: float = 1e-2
) -> KktReport:
    """||p1_i||_inf <= alpha_i, p1(0) = 0 and sign(weight) = sign(p1_i(t)) at |p1_i(t)| ~ alpha_i."""
    alpha = np.asarray(alpha, dtype=float)
    eta = dual_certificate(p1)
    sup_ratio, start_ratio, cert_ratio, aligned = [], [], [], []
    start = p1.node_values()[:, 0]
    for i, component in enumerate(control.components):
        sup_ratio.append(global_max_abs(p1, i)[1] / alpha[i])
        cert_ratio.append(global_max_abs(eta, i)[1] / alpha[i])
        start_ratio.append(abs(float(start[i])) / alpha[i])
        for t, w in zip(component.times, component.weights):
            value = float(p1(t, i))
            aligned.append(bool(np.sign(w) == np.sign(value) and abs(value) >= (1.0 - tol) * alpha[i]))
    return KktReport(tuple(sup_ratio), tuple(start_ratio), tuple(cert_ratio), tuple(aligned), tol)


__all__ = [
    "BREAKPOINT_TOL",
    "ComponentMeasure",
    "KktReport",
    "MeasureControl",
    "PiecewiseLinear",
    "PiecewiseQuadratic",
    "StepFunction",
    "apply_B",
    "apply_B_star",
    "compute_p1",
    "compute_z",
    "dual_certificate",
    "global_max_abs",
    "kkt_certificate",
    "l1_distance",
    "recover_control",
]
