"""Discrete anisotropic Sobolev norms, weighted trace norms, Green-identity
residuals, and the inflow-vanishing margin surrogate.

Spatial derivatives use mask-aware central stencils (one-sided near the
boundary); the L2 measure is the lattice partial-volume rule times the sphere
and energy quadratures.  Boundary integrals use the triangulated level-set
surface from the geometry module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import EmptyTrace, OrderTooHigh
from .fields import DiscreteField, GridSpec, multi_indices
from .geometry import BoundarySide, SurfaceMesh, escape_times, triangulate_boundary

_MAX_SPATIAL_ORDER = 3


@dataclass(frozen=True)
class NormOrder:
    """Differentiation orders (spatial, angular, energy).

    Only spatial regularity is computed here; angular and energy orders are
    carried for interface completeness and must be zero.
    """

    m1: int
    m2: int = 0
    m3: int = 0

    def __post_init__(self):
        if min(self.m1, self.m2, self.m3) < 0:
            raise ValueError("orders must be nonnegative")


def _check_order(order: NormOrder) -> None:
    if order.m2 != 0 or order.m3 != 0:
        raise OrderTooHigh("angular/energy differentiation orders are not supported")
    if order.m1 > _MAX_SPATIAL_ORDER:
        raise OrderTooHigh(f"spatial order {order.m1} exceeds {_MAX_SPATIAL_ORDER}")


def h_norm(psi: DiscreteField, order: NormOrder) -> float:
    """Discrete mixed Sobolev norm (sum of squared spatial-derivative L2 norms)."""
    _check_order(order)
    grid = psi.grid
    w_phase = grid.sphere_weights[None, :, None] * grid.energy_weights[None, None, :]
    total = float(np.sum(grid.vol_weights[:, None, None] * w_phase * psi.values**2))
    if order.m1 >= 1:
        alphas = [a for a in multi_indices(order.m1) if sum(a) >= 1]
        for k in range(grid.n_energy):
            box = grid.embed(psi.values[:, :, k])
            for alpha in alphas:
                d = grid.extract(grid.derivative_multi(box, alpha, masked=True))
                total += float(np.sum(grid.vol_weights[:, None] * grid.sphere_weights[None, :]
                                      * grid.energy_weights[k] * d**2))
    return float(np.sqrt(total))


def h_inner(psi: DiscreteField, v: DiscreteField, order: NormOrder) -> float:
    """Discrete inner product matching ``h_norm`` (pure central derivatives).

    Central differences with zero extension commute and are antisymmetric
    under the lattice inner product, which the accretivity identities need;
    fields should vanish near the boundary for the derivative terms to be
    trustworthy there.
    """
    _check_order(order)
    grid = psi.grid
    total = 0.0
    for k in range(grid.n_energy):
        box_p = grid.embed(psi.values[:, :, k])
        box_v = grid.embed(v.values[:, :, k])
        for alpha in multi_indices(order.m1):
            dp = grid.derivative_multi(box_p, alpha, masked=False)
            dv = grid.derivative_multi(box_v, alpha, masked=False)
            prod = np.sum(dp * dv * grid.sphere_weights[None, None, None, :], axis=3)
            total += float(np.sum(prod) * np.prod(grid.h) * grid.energy_weights[k])
    return total


# -- traces ------------------------------------------------------------------


@dataclass(frozen=True)
class TraceField:
    """Boundary-restricted field values with surface quadrature data."""

    values: np.ndarray        # (n_surf, n_omega, n_energy)
    dots: np.ndarray          # (n_surf, n_omega) omega . nu(y)
    mesh: SurfaceMesh
    grid: GridSpec
    side: Optional[BoundarySide]

    def selection(self) -> np.ndarray:
        from .geometry import TANGENT_TOL

        if self.side is BoundarySide.INFLOW:
            return self.dots < -TANGENT_TOL
        if self.side is BoundarySide.OUTFLOW:
            return self.dots > TANGENT_TOL
        return np.ones_like(self.dots, dtype=bool)


def trace_from_callable(field: Callable, grid: GridSpec, side: Optional[BoundarySide],
                        subdivisions: int = 3) -> TraceField:
    """Sample a callable field on the boundary quadrature mesh."""
    mesh = triangulate_boundary(grid.domain, subdivisions)
    dots = mesh.normals @ grid.sphere_nodes.T
    vals = np.empty((mesh.points.shape[0], grid.n_omega, grid.n_energy))
    for j in range(grid.n_omega):
        for k in range(grid.n_energy):
            vals[:, j, k] = field(mesh.points, grid.sphere_nodes[j], float(grid.energy_nodes[k]))
    return TraceField(vals, dots, mesh, grid, side)


def _pullin_samples(grid: GridSpec, box: np.ndarray, points: np.ndarray,
                    normals: np.ndarray) -> np.ndarray:
    """Quadratic extrapolation of a box field to surface points along -nu.

    The box is first extended past the mask edge by nearest-interior fill so
    shallow samples are not contaminated by the zero embedding; the sample
    span stays within three lattice spacings of the surface because deeper
    spans turn unresolved interior structure into spurious boundary values.
    """
    from scipy.ndimage import map_coordinates

    filled = grid.fill_from_interior(box)
    s = float(np.mean(grid.h))
    vals = []
    for c in (1.0, 2.0, 3.0):
        p = points - c * s * normals
        coords = ((p - grid.origin) / grid.h).T
        vals.append(map_coordinates(filled, coords, order=1, mode="nearest"))
    return 3.0 * vals[0] - 3.0 * vals[1] + vals[2]


def trace_from_grid_field(psi: DiscreteField, side: Optional[BoundarySide],
                          subdivisions: int = 3) -> TraceField:
    """Extrapolate a grid field to the boundary mesh (second order inward)."""
    grid = psi.grid
    mesh = triangulate_boundary(grid.domain, subdivisions)
    dots = mesh.normals @ grid.sphere_nodes.T
    vals = np.empty((mesh.points.shape[0], grid.n_omega, grid.n_energy))
    for k in range(grid.n_energy):
        box = grid.embed(psi.values[:, :, k])
        for j in range(grid.n_omega):
            vals[:, j, k] = _pullin_samples(grid, box[..., j], mesh.points, mesh.normals)
    return TraceField(vals, dots, mesh, grid, side)


def trace_norm(tr: TraceField, weighting: str = "plain") -> float:
    """T2 norm of a trace: plain uses |omega.nu|, tau adds the chord length."""
    sel = tr.selection()
    if not np.any(sel):
        raise EmptyTrace("trace restriction selected no boundary quadrature point")
    w = np.abs(tr.dots) * sel
    if weighting == "tau":
        tau = np.empty_like(tr.dots)
        for j in range(tr.grid.n_omega):
            omega = tr.grid.sphere_nodes[j]
            fwd = escape_times(tr.grid.domain, tr.mesh.points, -omega)
            bwd = escape_times(tr.grid.domain, tr.mesh.points, omega)
            # tau_- is the forward chord from inflow points, tau_+ the
            # backward chord from outflow points; both vanish tangentially.
            tau[:, j] = np.where(tr.dots[:, j] < 0.0, fwd, bwd)
        w = w * tau
    elif weighting != "plain":
        raise ValueError("weighting must be 'plain' or 'tau'")
    quad = (tr.mesh.areas[:, None, None] * w[:, :, None]
            * tr.grid.sphere_weights[None, :, None] * tr.grid.energy_weights[None, None, :])
    return float(np.sqrt(np.sum(quad * tr.values**2)))


def boundary_h_norm(psi, grid: GridSpec, m: int, subdivisions: int = 3,
                    fd_step: float = 1e-4) -> float:
    """Outflow boundary norm: sum over |alpha| <= m of T2(Gamma_+) norms.

    ``psi`` may be a callable field (derivatives by inward one-sided
    differences of step ``fd_step``) or a DiscreteField (lattice derivatives
    extrapolated to the surface).
    """
    if m > _MAX_SPATIAL_ORDER:
        raise OrderTooHigh(f"order {m} exceeds {_MAX_SPATIAL_ORDER}")
    total = 0.0
    if callable(psi):
        mesh = triangulate_boundary(grid.domain, subdivisions)
        dots = mesh.normals @ grid.sphere_nodes.T
        sel = dots > 0.0
        for alpha in multi_indices(m):
            for j in range(grid.n_omega):
                if not np.any(sel[:, j]):
                    continue
                omega = grid.sphere_nodes[j]
                for k in range(grid.n_energy):
                    f = lambda p: np.asarray(psi(p, omega, float(grid.energy_nodes[k])), dtype=float)
                    d = _onesided_derivative(f, mesh.points, mesh.normals, alpha, fd_step)
                    w = mesh.areas * np.abs(dots[:, j]) * sel[:, j]
                    total += float(np.sum(w * d**2) * grid.sphere_weights[j] * grid.energy_weights[k])
        return float(np.sqrt(total))

    field: DiscreteField = psi
    mesh = triangulate_boundary(grid.domain, subdivisions)
    dots = mesh.normals @ grid.sphere_nodes.T
    sel = dots > 0.0
    for alpha in multi_indices(m):
        for k in range(grid.n_energy):
            box = grid.embed(field.values[:, :, k])
            dbox = grid.derivative_multi(box, alpha, masked=True)
            for j in range(grid.n_omega):
                if not np.any(sel[:, j]):
                    continue
                d = _pullin_samples(grid, dbox[..., j], mesh.points, mesh.normals)
                w = mesh.areas * np.abs(dots[:, j]) * sel[:, j]
                total += float(np.sum(w * d**2) * grid.sphere_weights[j] * grid.energy_weights[k])
    return float(np.sqrt(total))


def _onesided_derivative(f: Callable, points: np.ndarray, normals: np.ndarray,
                         alpha, step: float) -> np.ndarray:
    """Composed one-sided second-order differences pointing into the domain."""
    if sum(alpha) == 0:
        return f(points)
    axis = next(i for i, a in enumerate(alpha) if a > 0)
    rest = tuple(a - (1 if i == axis else 0) for i, a in enumerate(alpha))
    sgn = -np.sign(normals[:, axis])
    sgn[sgn == 0.0] = 1.0
    e = np.zeros((points.shape[0], 3))
    e[:, axis] = sgn * step
    f0 = _onesided_derivative(f, points, normals, rest, step)
    f1 = _onesided_derivative(f, points + e, normals, rest, step)
    f2 = _onesided_derivative(f, points + 2 * e, normals, rest, step)
    return sgn * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * step)


# -- Green identity and margin -----------------------------------------------


def green_residual(psi: DiscreteField, v: DiscreteField, subdivisions: int = 3,
                   psi_trace: Optional[Callable] = None,
                   v_trace: Optional[Callable] = None) -> float:
    """Residual of the transport Green identity

        int (omega.grad psi) v + int (omega.grad v) psi
            - surface int (omega.nu) psi v  =  0.

    Boundary traces are separate data from interior values; when the caller
    knows them (``psi_trace``/``v_trace`` callables) the surface term uses
    them directly, otherwise it falls back to inward extrapolation of the
    lattice values.
    """
    grid = psi.grid
    mesh = triangulate_boundary(grid.domain, subdivisions)
    dots = mesh.normals @ grid.sphere_nodes.T
    vol = 0.0
    surf = 0.0
    for k in range(grid.n_energy):
        E = float(grid.energy_nodes[k])
        box_p = grid.embed(psi.values[:, :, k])
        box_v = grid.embed(v.values[:, :, k])
        stream_p = np.zeros_like(box_p)
        stream_v = np.zeros_like(box_v)
        for axis in range(3):
            stream_p += grid.diff_masked(box_p, axis) * grid.sphere_nodes[None, None, None, :, axis]
            stream_v += grid.diff_masked(box_v, axis) * grid.sphere_nodes[None, None, None, :, axis]
        integrand = grid.extract(stream_p * box_v + stream_v * box_p)
        vol += float(np.sum(grid.vol_weights[:, None] * integrand * grid.sphere_weights[None, :])
                     * grid.energy_weights[k])
        prod_box = box_p * box_v
        for j in range(grid.n_omega):
            omega = grid.sphere_nodes[j]
            if psi_trace is not None and v_trace is not None:
                pv = (np.asarray(psi_trace(mesh.points, omega, E), dtype=float)
                      * np.asarray(v_trace(mesh.points, omega, E), dtype=float))
            else:
                pv = _pullin_samples(grid, prod_box[..., j], mesh.points, mesh.normals)
            surf += float(np.sum(mesh.areas * dots[:, j] * pv)
                          * grid.sphere_weights[j] * grid.energy_weights[k])
    return vol - surf


def h0_margin(psi: DiscreteField, threshold: float = 1e-10) -> tuple[float, bool]:
    """Largest eta with |psi| < threshold wherever the exit time is < eta.

    The discrete surrogate of support disjoint from the inflow closure;
    passes iff eta exceeds two lattice spacings.
    """
    grid = psi.grid
    t = grid.escape_cache()
    nonzero = np.max(np.abs(psi.values), axis=2) >= threshold
    if not np.any(nonzero):
        return grid.domain.diameter, True
    eta = float(np.min(t[nonzero]))
    return eta, eta > 2.0 * float(np.mean(grid.h))
