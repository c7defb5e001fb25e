"""Coefficient fields, structured grids, field sampling, and sup-norm bounds.

Callable conventions used throughout the package:

- scalar fields        f(x, omega, E) -> (n,)     x: (n, 3), omega: (3,), E: float
- scattering kernels   s(x, omega_in, omega_out, E) -> (n,)
- stopping power       a(x, E) -> (n,)

All callables must be pure and vectorized over the position batch; grids and
sampled fields are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .errors import GridTooCoarse, NonFiniteValue, OrderTooHigh
from .geometry import ConvexDomain, escape_times

_MAX_ORDER = 4


# -- multi-index helpers ----------------------------------------------------


def multi_indices(m: int, dim: int = 3) -> list[tuple[int, ...]]:
    """All multi-indices alpha with |alpha| <= m, graded lexicographic."""
    out = [a for a in product(range(m + 1), repeat=dim) if sum(a) <= m]
    out.sort(key=lambda a: (sum(a), a))
    return out


def sub_indices(alpha) -> list[tuple[int, ...]]:
    """All beta <= alpha componentwise."""
    ranges = [range(a + 1) for a in alpha]
    return [b for b in product(*ranges)]


def mi_binom(alpha, beta) -> int:
    return int(np.prod([math.comb(a, b) for a, b in zip(alpha, beta)]))


def leibniz_constant(m: int) -> float:
    """Constructive product-rule constant c(m) for the multiplication bound
    |Sigma psi|_(m) <= c(m) |Sigma|_(W-inf,m) |psi|_(m).

    Computed as the worst l2-aggregated binomial weight over spatial
    multi-indices of order <= m.
    """
    if m < 0:
        raise ValueError("order must be nonnegative")
    best = 0.0
    for alpha in multi_indices(m):
        s = sum(mi_binom(alpha, beta) ** 2 for beta in sub_indices(alpha))
        best = max(best, math.sqrt(s))
    return best


# -- domain types -----------------------------------------------------------


@dataclass(frozen=True)
class EnergyInterval:
    E0: float
    Em: float

    def __post_init__(self):
        if not (0.0 <= self.E0 < self.Em < math.inf):
            raise ValueError("require 0 <= E0 < Em < inf")

    @property
    def length(self) -> float:
        return self.Em - self.E0


@dataclass(frozen=True)
class CoefficientSet:
    """Attenuation, optional scattering kernel and stopping power, and the
    solver shift constant."""

    sigma_t: Callable
    scatter: Optional[Callable] = None
    stopping: Optional[Callable] = None
    kappa: float = 0.0
    shift: float = 0.0


class GridSpec:
    """Structured discretization of domain x sphere x energy interval.

    Spatial nodes form a uniform lattice over the domain bounding box with
    an interior mask; quadrature weights near the boundary carry a
    partial-volume correction from the signed level function.  The sphere
    rule is a Gauss-Legendre (polar cosine) x uniform trapezoid (azimuth)
    product; energy nodes are uniform with trapezoid weights.
    """

    def __init__(self, domain: ConvexDomain, n_spatial: int, n_polar: int,
                 n_azimuth: int, interval: EnergyInterval, n_energy: int):
        if n_spatial < 3:
            raise GridTooCoarse("need at least 3 lattice nodes per axis")
        self.domain = domain
        self.interval = interval
        box = domain.bounding_box()
        self.origin = box[0].copy()
        axes = [np.linspace(box[0, k], box[1, k], n_spatial) for k in range(3)]
        self.h = np.array([ax[1] - ax[0] for ax in axes])
        self.shape = (n_spatial, n_spatial, n_spatial)
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        lv = domain.level(nodes)
        self.mask = (lv < 0.0).reshape(self.shape)
        self.interior_idx = np.flatnonzero(self.mask.ravel())
        if self.interior_idx.size == 0:
            raise GridTooCoarse("no lattice node falls inside the domain")
        self.coords = nodes[self.interior_idx]
        grad = domain.level_gradient(self.coords)
        signed = lv[self.interior_idx] / np.maximum(np.linalg.norm(grad, axis=1), 1e-300)
        self.boundary_dist = -signed
        hbar = float(np.mean(self.h))
        # Partial-volume weights: nodes deeper than one cell carry full cells;
        # the boundary-adjacent node carries its cut cell plus the inside
        # share of the just-outside neighbor (values up to 1.5).
        frac = np.where(signed <= -hbar, 1.0, 0.5 - signed / hbar)
        self.vol_weights = float(np.prod(self.h)) * frac

        mu, wmu = np.polynomial.legendre.leggauss(n_polar)
        phi = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
        wphi = 2.0 * np.pi / n_azimuth
        st = np.sqrt(1.0 - mu**2)
        omegas = np.empty((n_polar * n_azimuth, 3))
        weights = np.empty(n_polar * n_azimuth)
        for k in range(n_polar):
            sl = slice(k * n_azimuth, (k + 1) * n_azimuth)
            omegas[sl, 0] = st[k] * np.cos(phi)
            omegas[sl, 1] = st[k] * np.sin(phi)
            omegas[sl, 2] = mu[k]
            weights[sl] = wmu[k] * wphi
        self.sphere_nodes = omegas
        self.sphere_weights = weights
        self.n_polar, self.n_azimuth = n_polar, n_azimuth

        self.energy_nodes = np.linspace(interval.E0, interval.Em, n_energy)
        if n_energy == 1:
            self.energy_weights = np.array([interval.length])
        else:
            dE = self.energy_nodes[1] - self.energy_nodes[0]
            w = np.full(n_energy, dE)
            w[0] = w[-1] = 0.5 * dE
            self.energy_weights = w

        self._escape = None
        self._fill_idx = None
        for arr in (self.coords, self.vol_weights, self.boundary_dist,
                    self.sphere_nodes, self.sphere_weights,
                    self.energy_nodes, self.energy_weights):
            arr.setflags(write=False)

    # -- sizes -------------------------------------------------------------

    @property
    def n_interior(self) -> int:
        return self.interior_idx.size

    @property
    def n_omega(self) -> int:
        return self.sphere_nodes.shape[0]

    @property
    def n_energy(self) -> int:
        return self.energy_nodes.size

    @property
    def phase_shape(self) -> tuple[int, int, int]:
        return (self.n_interior, self.n_omega, self.n_energy)

    def escape_cache(self) -> np.ndarray:
        """Exit times at every (interior node, sphere node) pair.

        Computed on first use; recomputation races are benign because the
        result is deterministic.
        """
        if self._escape is None:
            out = np.empty((self.n_interior, self.n_omega))
            for j in range(self.n_omega):
                out[:, j] = escape_times(self.domain, self.coords, self.sphere_nodes[j])
            out.setflags(write=False)
            self._escape = out
        return self._escape

    # -- embedding and finite differences -----------------------------------

    def embed(self, values: np.ndarray) -> np.ndarray:
        """Scatter interior-node values into the full box (zeros outside)."""
        values = np.asarray(values)
        out = np.zeros(self.shape + values.shape[1:], dtype=values.dtype)
        out.reshape(-1, *values.shape[1:])[self.interior_idx] = values
        return out

    def extract(self, box: np.ndarray) -> np.ndarray:
        return box.reshape(-1, *box.shape[3:])[self.interior_idx]

    def fill_from_interior(self, box: np.ndarray) -> np.ndarray:
        """Replace exterior box values with the nearest interior value.

        Removes the zero-extension jump at the mask edge before boundary
        extrapolation; the nearest-neighbor index map is cached per grid.
        """
        if self._fill_idx is None:
            idx = ndimage.distance_transform_edt(~self.mask, return_distances=False,
                                                 return_indices=True)
            self._fill_idx = tuple(idx)
        return box[self._fill_idx]

    def diff_central(self, box: np.ndarray, axis: int) -> np.ndarray:
        """Pure central difference on the embedded box, zero beyond the faces.

        Together with zero embedding this operator is antisymmetric under the
        lattice inner product, which the accretivity checks rely on.
        """
        up = np.roll(box, -1, axis=axis)
        dn = np.roll(box, 1, axis=axis)
        sl_lo = [slice(None)] * box.ndim
        sl_hi = [slice(None)] * box.ndim
        sl_lo[axis] = slice(0, 1)
        sl_hi[axis] = slice(box.shape[axis] - 1, box.shape[axis])
        up[tuple(sl_hi)] = 0.0
        dn[tuple(sl_lo)] = 0.0
        out = (up - dn) / (2.0 * self.h[axis])
        return out

    def diff_masked(self, box: np.ndarray, axis: int) -> np.ndarray:
        """Mask-aware first derivative: central in the bulk, second-order
        one-sided where a neighbor leaves the interior mask."""
        m = self.mask
        extra = box.ndim - 3
        mb = m.reshape(m.shape + (1,) * extra) if extra else m

        def shift(arr, k):
            s = np.roll(arr, -k, axis=axis)
            idx = [slice(None)] * arr.ndim
            if k > 0:
                idx[axis] = slice(arr.shape[axis] - k, arr.shape[axis])
            else:
                idx[axis] = slice(0, -k)
            s[tuple(idx)] = 0 if arr.dtype != bool else False
            return s

        f_p1, f_m1 = shift(box, 1), shift(box, -1)
        f_p2, f_m2 = shift(box, 2), shift(box, -2)
        m_p1, m_m1 = shift(m, 1), shift(m, -1)
        m_p2, m_m2 = shift(m, 2), shift(m, -2)
        h = self.h[axis]

        central = (f_p1 - f_m1) / (2 * h)
        fwd2 = (-3 * box + 4 * f_p1 - f_p2) / (2 * h)
        bwd2 = (3 * box - 4 * f_m1 + f_m2) / (2 * h)
        fwd1 = (f_p1 - box) / h
        bwd1 = (box - f_m1) / h

        def bc(cond):
            c = cond
            return c.reshape(c.shape + (1,) * extra) if extra else c

        use_central = bc(m_p1 & m_m1)
        use_f2 = bc(m_p1 & m_p2)
        use_b2 = bc(m_m1 & m_m2)
        use_f1 = bc(m_p1)
        use_b1 = bc(m_m1)

        out = np.where(use_central, central,
                       np.where(use_f2, fwd2,
                                np.where(use_b2, bwd2,
                                         np.where(use_f1, fwd1,
                                                  np.where(use_b1, bwd1, 0.0)))))
        return np.where(mb, out, 0.0)

    def derivative_multi(self, box: np.ndarray, alpha, masked: bool = True) -> np.ndarray:
        """Apply the composed spatial derivative of multi-index alpha."""
        op = self.diff_masked if masked else self.diff_central
        out = box
        for axis, count in enumerate(alpha):
            for _ in range(count):
                out = op(out, axis)
        return out

    def eroded_mask(self, iterations: int) -> np.ndarray:
        """Interior mask shrunk so that iterated central stencils stay inside."""
        if iterations <= 0:
            return self.mask
        structure = ndimage.generate_binary_structure(3, 1)
        return ndimage.binary_erosion(self.mask, structure, iterations=iterations)


@dataclass(frozen=True)
class DiscreteField:
    """Field values sampled at (interior node, sphere node, energy node)."""

    values: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.phase_shape:
            raise ValueError(f"values shape {v.shape} != grid shape {self.grid.phase_shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteValue("field contains non-finite values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def with_values(self, values: np.ndarray) -> "DiscreteField":
        return DiscreteField(values, self.grid)

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))


def sample_field(field: Callable, grid: GridSpec) -> DiscreteField:
    """Evaluate a callable field at every grid node."""
    out = np.empty(grid.phase_shape)
    for j in range(grid.n_omega):
        omega = grid.sphere_nodes[j]
        for k in range(grid.n_energy):
            vals = np.asarray(field(grid.coords, omega, float(grid.energy_nodes[k])), dtype=float)
            if not np.all(np.isfinite(vals)):
                bad = int(np.flatnonzero(~np.isfinite(vals))[0])
                raise NonFiniteValue(f"non-finite value at spatial node {bad}, sphere node {j}, energy node {k}")
            out[:, j, k] = vals
    return DiscreteField(out, grid)


def sup_norm_estimate(field: Callable, m: int, grid: GridSpec,
                      n_omega_samples: int = 4, n_energy_samples: int = 5) -> float:
    """Estimate of the spatial W-infinity norm of order m.

    Max over |alpha| <= m of the grid sup of central finite differences,
    restricted to interior nodes more than m*h from the boundary.  Direction
    and energy nodes are subsampled (coefficients rarely vary in omega).
    """
    if m > _MAX_ORDER:
        raise OrderTooHigh(f"order {m} exceeds supported stencil width {_MAX_ORDER}")
    oj = np.unique(np.linspace(0, grid.n_omega - 1, min(n_omega_samples, grid.n_omega)).astype(int))
    ek = np.unique(np.linspace(0, grid.n_energy - 1, min(n_energy_samples, grid.n_energy)).astype(int))
    hbar = float(np.mean(grid.h))
    safe = grid.eroded_mask(m)
    if m > 0:
        far = np.zeros(grid.shape, dtype=bool)
        far.reshape(-1)[grid.interior_idx] = grid.boundary_dist > m * hbar
        safe = safe & far
    if not np.any(safe):
        raise GridTooCoarse("no interior node is far enough from the boundary")
    best = 0.0
    for j in oj:
        omega = grid.sphere_nodes[j]
        for k in ek:
            vals = np.asarray(field(grid.coords, omega, float(grid.energy_nodes[k])), dtype=float)
            box = grid.embed(vals)
            for alpha in multi_indices(m):
                d = grid.derivative_multi(box, alpha, masked=False)
                best = max(best, float(np.max(np.abs(d[safe]))))
    return best


@dataclass(frozen=True)
class SupportCheckReport:
    passed: bool
    worst_violation: float
    worst_node: Optional[int] = None
    worst_alpha: Optional[tuple] = None


def kernel_support_check(scatter: Callable, m: int, eta: float, grid: GridSpec,
                         tol: float = 1e-10, max_pairs: int = 256) -> SupportCheckReport:
    """Check that the scattering kernel vanishes near the boundary.

    Passes iff |d^alpha scatter| < tol for |alpha| <= m-1 at all interior
    nodes closer than eta to the boundary (central differences with the grid
    step; the kernel must be evaluable in an h-neighborhood of the closure).
    """
    near = grid.boundary_dist < eta
    if m < 1 or not np.any(near):
        return SupportCheckReport(True, 0.0)
    xs = grid.coords[near]
    node_ids = np.flatnonzero(near)
    pairs = [(a, b) for a in range(grid.n_omega) for b in range(grid.n_omega)]
    if len(pairs) > max_pairs:
        stride = max(1, len(pairs) // max_pairs)
        pairs = pairs[::stride]
    alphas = multi_indices(m - 1)
    worst = 0.0
    worst_node = None
    worst_alpha = None
    h = grid.h
    for a, b in pairs:
        w_in, w_out = grid.sphere_nodes[a], grid.sphere_nodes[b]
        for E in grid.energy_nodes:
            for alpha in alphas:
                vals = _central_derivative_callable(
                    lambda p: np.asarray(scatter(p, w_in, w_out, float(E)), dtype=float),
                    xs, alpha, h)
                i = int(np.argmax(np.abs(vals)))
                v = abs(float(vals[i]))
                if v > worst:
                    worst, worst_node, worst_alpha = v, int(node_ids[i]), alpha
    return SupportCheckReport(worst < tol, worst, worst_node, worst_alpha)


def _central_derivative_callable(f: Callable, xs: np.ndarray, alpha, h) -> np.ndarray:
    """Composed central differences of a vectorized callable at points xs."""
    order = sum(alpha)
    if order == 0:
        return f(xs)
    axis = next(i for i, a in enumerate(alpha) if a > 0)
    rest = tuple(a - (1 if i == axis else 0) for i, a in enumerate(alpha))
    e = np.zeros(3)
    e[axis] = h[axis]
    up = _central_derivative_callable(f, xs + e, rest, h)
    dn = _central_derivative_callable(f, xs - e, rest, h)
    return (up - dn) / (2.0 * h[axis])


def validate_coefficients(coeffs: CoefficientSet, grid: GridSpec, n_check: int = 64) -> None:
    """Spot-check coefficient invariants at sampled grid nodes."""
    from .errors import StoppingPowerViolation

    idx = np.unique(np.linspace(0, grid.n_interior - 1, min(n_check, grid.n_interior)).astype(int))
    xs = grid.coords[idx]
    if coeffs.stopping is not None:
        for E in grid.energy_nodes[:: max(1, grid.n_energy // 4)]:
            a = np.asarray(coeffs.stopping(xs, float(E)), dtype=float)
            if np.any(-a < coeffs.kappa) or coeffs.kappa <= 0.0:
                raise StoppingPowerViolation("-a >= kappa > 0 violated at sampled nodes")
    if coeffs.scatter is not None:
        for j in range(0, grid.n_omega, max(1, grid.n_omega // 4)):
            v = np.asarray(coeffs.scatter(xs, grid.sphere_nodes[j], grid.sphere_nodes[0],
                                          float(grid.energy_nodes[0])), dtype=float)
            if np.any(v < 0.0):
                raise ValueError("scattering kernel must be nonnegative")
