"""Continuous-slowing-down solver: energy flip / exponential-weight
transform, implicit energy marching with per-step steady transport solves,
the explicit constant-coefficient solution, and compatibility-condition
checks at the cut-off energy.

Marching runs in the transformed variable E' = Em - E with unknown
phi = exp(C E') psi(Em - E'); each backward-Euler step folds the stopping
power and the step size into an effective attenuation coefficient and reuses
the steady scattering solver with the previous slice as a lattice source.
Energy-dependent sources used here (the explicit solution, step sources)
must broadcast over a per-node energy array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .attenuation import RayQuadrature, solve_attenuation_points
from .errors import (
    InsufficientEnergyResolution,
    ShiftTooSmall,
    StoppingPowerViolation,
)
from .fields import CoefficientSet, DiscreteField, EnergyInterval, GridSpec
from .geometry import ConvexDomain, PhasePoint, escape_times, triangulate_boundary
from .scattering import solve_scattering


@dataclass(frozen=True)
class MarchState:
    """Snapshot of one energy step in transformed variables."""

    E_current: float
    phi: np.ndarray       # (n_x, n_omega) slice of the transformed unknown
    step: float


@dataclass
class MarchReport:
    steps: int
    inner_iterations: int
    final_slice_sup: float
    inflow_trace_sup: float


@dataclass(frozen=True)
class CompatibilityReport:
    order: int
    residual: float
    passed: bool
    tolerance: float


def _check_stopping(coeffs: CoefficientSet, grid: GridSpec) -> None:
    if coeffs.stopping is None:
        raise StoppingPowerViolation("continuous slowing down needs a stopping power")
    if coeffs.kappa <= 0.0:
        raise StoppingPowerViolation("kappa must be positive")
    for E in grid.energy_nodes[:: max(1, grid.n_energy // 4)]:
        a = np.asarray(coeffs.stopping(grid.coords, float(E)), dtype=float)
        if np.any(-a < coeffs.kappa):
            raise StoppingPowerViolation("-a >= kappa violated on grid nodes")


def _march_grid(grid: GridSpec, n_steps: int) -> GridSpec:
    """Single companion grid holding the transformed energy axis."""
    L = grid.interval.length
    return GridSpec(grid.domain, grid.shape[0], grid.n_polar, grid.n_azimuth,
                    EnergyInterval(0.0, L), n_steps + 1)


def _steps_for(grid: GridSpec, dE: Optional[float]) -> int:
    """Step count: a multiple of the grid's energy intervals so that marched
    slices land exactly on grid nodes."""
    L = grid.interval.length
    n_seg = grid.n_energy - 1
    if n_seg < 1:
        raise InsufficientEnergyResolution("continuous slowing down needs n_energy >= 2")
    if dE is None:
        dE = L / 64.0
    factor = max(1, math.ceil(L / (dE * n_seg) - 1e-12))
    return factor * n_seg


def march_energy(f: Callable, coeffs: CoefficientSet, grid: GridSpec,
                 quad: RayQuadrature, dE: Optional[float] = None,
                 tol: float = 1e-10, max_iter: int = 60,
                 snapshot_cb: Optional[Callable] = None,
                 n_trace_samples: int = 32) -> tuple[DiscreteField, MarchReport]:
    """Backward-Euler march of the transformed evolution problem.

    Starts from the zero slice, and at each step solves the steady problem

        omega.grad phi + [Sigma^ + a^ (C - 1/dE)] phi - K^ phi
            = (-a^/dE) phi_prev + exp(C E') f^

    with coefficients frozen at the step energy; the inflow condition is
    enforced by the characteristic integral itself (and sampled into the
    report).  Returns the transformed field on the companion march grid.
    """
    _check_stopping(coeffs, grid)
    n_steps = _steps_for(grid, dE)
    L = grid.interval.length
    Em = grid.interval.Em
    step = L / n_steps
    C = coeffs.shift
    mgrid = _march_grid(grid, n_steps)

    # solvability of the implicit step: effective absorption must stay
    # positive with room for the scattering kernel
    sig_min = math.inf
    for Ep in (0.0, 0.5 * L, L):
        Ehat = Em - Ep
        a = np.asarray(coeffs.stopping(mgrid.coords, Ehat), dtype=float)
        for j in range(0, mgrid.n_omega, max(1, mgrid.n_omega // 4)):
            s = np.asarray(coeffs.sigma_t(mgrid.coords, mgrid.sphere_nodes[j], Ehat), dtype=float)
            sig_min = min(sig_min, float(np.min(s + a * (C - 1.0 / step))))
    if sig_min <= 0.0:
        raise ShiftTooSmall(
            f"effective absorption {sig_min:.3g} <= 0: decrease the energy step or raise the shift")

    # The implicit step concentrates the ray integrand in a boundary layer of
    # width ~1/absorption; panels must resolve it and the tail beyond ~38
    # mean free paths is below double precision.
    step_quad = RayQuadrature(max(quad.panels_per_unit_length, math.ceil(sig_min / 2.0)),
                              quad.nodes_per_panel)
    t_cap = 38.0 / sig_min

    mesh = triangulate_boundary(grid.domain, 2)
    rng_idx = np.linspace(0, mesh.points.shape[0] - 1, min(n_trace_samples, mesh.points.shape[0])).astype(int)
    trace_pts = mesh.points[rng_idx]
    slice_grid = _march_grid(grid, 0)

    phi = np.zeros((mgrid.n_interior, mgrid.n_omega, n_steps + 1))
    inner_total = 0
    trace_sup = 0.0
    prev = phi[:, :, 0]
    for n in range(1, n_steps + 1):
        Ep = n * step
        Ehat = Em - Ep
        a_vals = np.asarray(coeffs.stopping(mgrid.coords, Ehat), dtype=float)

        def sigma_eff(xs, omega, E, _Ehat=Ehat):
            a = np.asarray(coeffs.stopping(np.atleast_2d(xs), _Ehat), dtype=float)
            s = np.asarray(coeffs.sigma_t(xs, omega, _Ehat), dtype=float)
            return s + a * (C - 1.0 / step)

        scatter_eff = None
        if coeffs.scatter is not None:
            def scatter_eff(xs, wi, wo, E, _Ehat=Ehat):
                return coeffs.scatter(xs, wi, wo, _Ehat)

        weight = math.exp(C * Ep)

        def src(xs, omega, E, _Ehat=Ehat, _w=weight):
            return _w * np.asarray(f(xs, omega, _Ehat), dtype=float)

        eff = CoefficientSet(sigma_t=sigma_eff, scatter=scatter_eff, shift=0.0)
        lattice = ((-a_vals / step)[:, None] * prev)[:, :, None]
        out, rep = solve_scattering(src, eff, slice_grid, step_quad, tol=tol, max_iter=max_iter,
                                    check_threshold=False, grid_source=lattice,
                                    psi0=prev[:, :, None], t_cap=t_cap)
        prev = out.values[:, :, 0]
        phi[:, :, n] = prev
        inner_total += rep.iterations
        for j in range(0, mgrid.n_omega, max(1, mgrid.n_omega // 8)):
            omega = mgrid.sphere_nodes[j]
            dots = mesh.normals[rng_idx] @ omega
            ys = trace_pts[dots < -1e-3]
            if ys.size:
                vals = solve_attenuation_points(src, eff, grid.domain, ys, omega, 0.0, quad)
                trace_sup = max(trace_sup, float(np.max(np.abs(vals))))
        if snapshot_cb is not None:
            snapshot_cb(MarchState(Ep, prev, step))

    report = MarchReport(steps=n_steps, inner_iterations=inner_total,
                         final_slice_sup=float(np.max(np.abs(phi[:, :, 0]))),
                         inflow_trace_sup=trace_sup)
    return DiscreteField(phi, mgrid), report


def transform_from_march(phi: DiscreteField, grid: GridSpec, C: float) -> DiscreteField:
    """Map the transformed march field back to psi on the grid energy nodes:
    psi(E) = exp(-C (Em - E)) phi(Em - E)."""
    L = grid.interval.length
    n_march = phi.grid.n_energy - 1
    factor = n_march // (grid.n_energy - 1)
    out = np.empty(grid.phase_shape)
    for k in range(grid.n_energy):
        Ep = grid.interval.Em - grid.energy_nodes[k]
        idx = (grid.n_energy - 1 - k) * factor
        out[:, :, k] = math.exp(-C * Ep) * phi.values[:, :, idx]
    return DiscreteField(out, grid)


def transform_roundtrip(psi: DiscreteField, C: float) -> DiscreteField:
    """Flip-and-weight followed by its inverse (bookkeeping identity).

    phi(E') = exp(C E') psi(Em - E') on the reversed node order, then
    psi(E) = exp(-C (Em - E)) phi(Em - E) recovers the field exactly.
    """
    grid = psi.grid
    Em = grid.interval.Em
    N = grid.n_energy
    phi = np.empty_like(psi.values)
    for n in range(N):
        Ep = Em - grid.energy_nodes[N - 1 - n]
        phi[:, :, n] = math.exp(C * Ep) * psi.values[:, :, N - 1 - n]
    back = np.empty_like(phi)
    for k in range(N):
        Ep = Em - grid.energy_nodes[k]
        back[:, :, k] = math.exp(-C * Ep) * phi[:, :, N - 1 - k]
    return psi.with_values(back)


def solve_csda(f: Callable, coeffs: CoefficientSet, grid: GridSpec, quad: RayQuadrature,
               dE: Optional[float] = None, tol: float = 1e-10,
               max_iter: int = 60) -> tuple[DiscreteField, MarchReport]:
    """Full continuous-slowing-down solve on the grid.

    Transforms, marches, and maps back; the returned field carries zero
    cut-off-energy and inflow traces by construction of the march.
    """
    phi, report = march_energy(f, coeffs, grid, quad, dE=dE, tol=tol, max_iter=max_iter)
    return transform_from_march(phi, grid, coeffs.shift), report


def explicit_csda_points(f: Callable, sigma_const: float, interval: EnergyInterval,
                         domain: ConvexDomain, xs, omega, E: float,
                         quad: RayQuadrature) -> np.ndarray:
    """Explicit solution for unit stopping power and constant attenuation:

        psi(x, omega, E) = int_0^min(Em - E, t(x, omega))
                               exp(-Sigma s) f(x - s omega, omega, E + s) ds.

    The source must accept a per-node energy array.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    omega = np.asarray(omega, dtype=float).reshape(3)
    T = np.minimum(escape_times(domain, xs, omega), interval.Em - E)
    out = np.zeros(xs.shape[0])
    active = T > 1e-14
    if not np.any(active):
        return out
    idx = np.flatnonzero(active)
    counts = quad.n_panels(T[idx])
    xi, eta = quad.ref_nodes, quad.ref_weights
    for npan in np.unique(counts):
        sel = idx[counts == npan]
        width = T[sel] / npan
        s = (np.arange(npan)[None, :, None] + xi[None, None, :]) * width[:, None, None]
        pts = xs[sel][:, None, None, :] - s[..., None] * omega[None, None, None, :]
        fv = np.asarray(f(pts.reshape(-1, 3), omega, (E + s).reshape(-1)), dtype=float).reshape(s.shape)
        w = eta[None, None, :] * width[:, None, None] * np.exp(-sigma_const * s)
        out[sel] = np.einsum("ipq,ipq->i", w, fv)
    return out


def explicit_csda(f: Callable, sigma_const: float, interval: EnergyInterval,
                  domain: ConvexDomain, p: PhasePoint, quad: RayQuadrature) -> float:
    return float(explicit_csda_points(f, sigma_const, interval, domain,
                                      p.x.reshape(1, 3), p.omega, p.E, quad)[0])


def explicit_csda_grid(f: Callable, sigma_const: float, grid: GridSpec,
                       quad: RayQuadrature) -> DiscreteField:
    out = np.empty(grid.phase_shape)
    for j in range(grid.n_omega):
        for k in range(grid.n_energy):
            out[:, j, k] = explicit_csda_points(f, sigma_const, grid.interval, grid.domain,
                                                grid.coords, grid.sphere_nodes[j],
                                                float(grid.energy_nodes[k]), quad)
    return DiscreteField(out, grid)


def kr_energy_derivative_gap(scatter: Callable, dscatter_dE: Callable, grid: GridSpec,
                             phi: Callable, E: float, dE: float) -> float:
    """Sup gap between the difference quotient of the collision operator in
    energy and the operator with the energy-differentiated kernel; first
    order in dE for smooth kernels."""
    worst = 0.0
    xs = grid.coords
    for j in range(grid.n_omega):
        wo = grid.sphere_nodes[j]
        quot = np.zeros(len(xs))
        deriv = np.zeros(len(xs))
        for jp in range(grid.n_omega):
            wi = grid.sphere_nodes[jp]
            pv = np.asarray(phi(xs, wi), dtype=float)
            hi = np.asarray(scatter(xs, wi, wo, E + dE), dtype=float)
            lo = np.asarray(scatter(xs, wi, wo, E), dtype=float)
            quot += grid.sphere_weights[jp] * (hi - lo) / dE * pv
            deriv += grid.sphere_weights[jp] * np.asarray(dscatter_dE(xs, wi, wo, E), dtype=float) * pv
        worst = max(worst, float(np.max(np.abs(quot - deriv))))
    return worst


def compatibility_check(g: Callable, F: Callable, order: int, grid: GridSpec,
                        coeffs: Optional[CoefficientSet] = None,
                        tolerance: float = 1e-6, subdivisions: int = 2,
                        fd_step: float = 1e-5) -> CompatibilityReport:
    """Compatibility of inflow data with the zero cut-off-energy condition.

    order 0:  g(., ., Em) = 0 on the inflow boundary set
    order 1:  dg/dE(., ., Em) = F(., ., Em)
    order 2:  d2g/dE2(., ., Em) = (P F)(., ., Em) + dF/dE(., ., Em)

    with P the first-order transport action -(1/a)(omega.grad + Sigma - K);
    energy derivatives use one-sided stencils on the grid energy nodes.
    """
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1, or 2")
    need = {0: 1, 1: 3, 2: 4}[order]
    if grid.n_energy < need:
        raise InsufficientEnergyResolution(
            f"order {order} needs at least {need} energy nodes, grid has {grid.n_energy}")
    if order == 2 and coeffs is None:
        raise ValueError("order 2 needs the coefficient set for the transport action")

    mesh = triangulate_boundary(grid.domain, subdivisions)
    Em = grid.interval.Em
    dE = grid.energy_nodes[-1] - grid.energy_nodes[-2] if grid.n_energy > 1 else 0.0
    worst = 0.0
    for j in range(grid.n_omega):
        omega = grid.sphere_nodes[j]
        dots = mesh.normals @ omega
        ys = mesh.points[dots < -1e-9]
        if ys.size == 0:
            continue
        if order == 0:
            res = np.abs(np.asarray(g(ys, omega, Em), dtype=float))
        elif order == 1:
            dg = (3.0 * np.asarray(g(ys, omega, Em), dtype=float)
                  - 4.0 * np.asarray(g(ys, omega, Em - dE), dtype=float)
                  + np.asarray(g(ys, omega, Em - 2 * dE), dtype=float)) / (2.0 * dE)
            res = np.abs(dg - np.asarray(F(ys, omega, Em), dtype=float))
        else:
            d2g = (2.0 * np.asarray(g(ys, omega, Em), dtype=float)
                   - 5.0 * np.asarray(g(ys, omega, Em - dE), dtype=float)
                   + 4.0 * np.asarray(g(ys, omega, Em - 2 * dE), dtype=float)
                   - np.asarray(g(ys, omega, Em - 3 * dE), dtype=float)) / dE**2
            dF = (3.0 * np.asarray(F(ys, omega, Em), dtype=float)
                  - 4.0 * np.asarray(F(ys, omega, Em - dE), dtype=float)
                  + np.asarray(F(ys, omega, Em - 2 * dE), dtype=float)) / (2.0 * dE)
            stream = np.zeros(len(ys))
            inward = ys - fd_step * 2 * mesh.normals[dots < -1e-9]
            for ax in range(3):
                e = np.zeros(3)
                e[ax] = fd_step
                stream += omega[ax] * (np.asarray(F(inward + e, omega, Em), dtype=float)
                                       - np.asarray(F(inward - e, omega, Em), dtype=float)) / (2 * fd_step)
            sig = np.asarray(coeffs.sigma_t(ys, omega, Em), dtype=float)
            kf = np.zeros(len(ys))
            if coeffs.scatter is not None:
                for jp in range(grid.n_omega):
                    wi = grid.sphere_nodes[jp]
                    kf += grid.sphere_weights[jp] \
                        * np.asarray(coeffs.scatter(ys, wi, omega, Em), dtype=float) \
                        * np.asarray(F(ys, wi, Em), dtype=float)
            a = np.asarray(coeffs.stopping(ys, Em), dtype=float)
            PF = -(stream + sig * np.asarray(F(ys, omega, Em), dtype=float) - kf) / a
            res = np.abs(d2g - PF - dF)
        worst = max(worst, float(np.max(res)))
    return CompatibilityReport(order, worst, worst < tolerance, tolerance)
