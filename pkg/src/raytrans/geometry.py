"""Strictly convex domains, boundary classification, and exit-time maps.

A domain is described by a smooth level function r with interior {r < 0} and
boundary {r = 0}.  All position arguments are numpy arrays; operations accept
either a single point of shape (3,) or a batch of shape (n, 3) and are pure
functions of immutable domain data.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateGradient,
    EmptyInput,
    GradientUndefinedOnBoundary,
    NotOnBoundary,
    OutsideDomain,
    RootNotBracketed,
    TangentialStart,
)

# Numerical bands.  The tangential set has measure zero in the continuum;
# classification needs a tolerance band around omega.nu = 0.
BOUNDARY_TOL = 1e-9
TANGENT_TOL = 1e-10
_ROOT_TOL = 1e-12


class DomainKind(enum.Enum):
    UNIT_BALL = "unit_ball"
    BALL = "ball"
    ELLIPSOID = "ellipsoid"


class BoundarySide(enum.Enum):
    INFLOW = "inflow"
    OUTFLOW = "outflow"
    TANGENTIAL = "tangential"


@dataclass(frozen=True)
class BoundaryClass:
    """Classification of a boundary phase point together with omega.nu."""

    side: BoundarySide
    dot: float


@dataclass(frozen=True)
class PhasePoint:
    """A point (x, omega, E) in position x direction x energy space."""

    x: np.ndarray
    omega: np.ndarray
    E: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(3)
        omega = np.asarray(self.omega, dtype=float).reshape(3)
        if abs(np.linalg.norm(omega) - 1.0) > 1e-12:
            raise ValueError("direction must be a unit vector to 1e-12")
        x.setflags(write=False)
        omega.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "omega", omega)


@dataclass(frozen=True)
class ConvexDomain:
    """Strictly convex spatial region given by a smooth level function.

    Attributes
    ----------
    level : callable
        Vectorized level function, (n, 3) -> (n,); interior is {level < 0}.
    level_gradient : callable
        Vectorized gradient, (n, 3) -> (n, 3); nonvanishing on the boundary.
    diameter : float
        diam(G); bounds every exit time.
    kind : DomainKind
    center, radius, semi_axes
        Shape parameters used for boundary sampling and closed forms.
    """

    level: Callable[[np.ndarray], np.ndarray]
    level_gradient: Callable[[np.ndarray], np.ndarray]
    diameter: float
    kind: DomainKind
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0
    semi_axes: np.ndarray = field(default_factory=lambda: np.ones(3))

    @staticmethod
    def unit_ball() -> "ConvexDomain":
        return ConvexDomain.ball(np.zeros(3), 1.0, kind=DomainKind.UNIT_BALL)

    @staticmethod
    def ball(center, radius, kind: DomainKind = DomainKind.BALL) -> "ConvexDomain":
        c = np.asarray(center, dtype=float).reshape(3)
        r = float(radius)
        if r <= 0.0:
            raise ValueError("radius must be positive")

        def level(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return np.sum(((x - c) / r) ** 2, axis=-1) - 1.0

        def level_gradient(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return 2.0 * (x - c) / r**2

        return ConvexDomain(level, level_gradient, 2.0 * r, kind, c, r, np.full(3, r))

    @staticmethod
    def ellipsoid(center, semi_axes) -> "ConvexDomain":
        c = np.asarray(center, dtype=float).reshape(3)
        a = np.asarray(semi_axes, dtype=float).reshape(3)
        if np.any(a <= 0.0):
            raise ValueError("semi-axes must be positive")

        def level(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return np.sum(((x - c) / a) ** 2, axis=-1) - 1.0

        def level_gradient(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return 2.0 * (x - c) / a**2

        return ConvexDomain(
            level, level_gradient, 2.0 * float(np.max(a)), DomainKind.ELLIPSOID, c, float(np.max(a)), a
        )

    # -- basic queries -----------------------------------------------------

    def bounding_box(self) -> np.ndarray:
        """Axis-aligned box [lo, hi] of shape (2, 3) containing the closure."""
        if self.kind in (DomainKind.UNIT_BALL, DomainKind.BALL):
            half = np.full(3, self.radius)
        else:
            half = self.semi_axes
        return np.stack([self.center - half, self.center + half])

    def contains(self, x, tol: float = BOUNDARY_TOL) -> np.ndarray:
        return self.level(x) <= tol

    def boundary_distance(self, x) -> np.ndarray:
        """Approximate distance to the boundary via level / |grad level|."""
        lv = self.level(x)
        gn = np.linalg.norm(self.level_gradient(x), axis=-1)
        return np.abs(lv) / np.maximum(gn, 1e-300)

    def boundary_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Sample n points on the boundary surface (area-biased for ellipsoids)."""
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        if self.kind is DomainKind.ELLIPSOID:
            return self.center + v * self.semi_axes
        return self.center + self.radius * v

    def project_to_boundary(self, p) -> np.ndarray:
        """Radially project points onto {level = 0} (exact for quadric levels)."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        q = self.level(p) + 1.0
        return self.center + (p - self.center) / np.sqrt(q)[:, None]


def _as_points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x.reshape(1, 3), True
    return x, False


def outward_normal(domain: ConvexDomain, y) -> np.ndarray:
    """Unit outward normal grad r / |grad r| at boundary point(s) y."""
    pts, single = _as_points(y)
    lv = domain.level(pts)
    if np.any(np.abs(lv) > BOUNDARY_TOL):
        raise NotOnBoundary(f"|level| = {np.max(np.abs(lv)):.3e} exceeds {BOUNDARY_TOL}")
    g = domain.level_gradient(pts)
    gn = np.linalg.norm(g, axis=-1)
    if np.any(gn < 1e-12):
        raise DegenerateGradient("level gradient below 1e-12 on boundary")
    nu = g / gn[:, None]
    return nu[0] if single else nu


def classify_boundary(domain: ConvexDomain, y, omega) -> BoundaryClass:
    """Classify a boundary phase point as inflow / outflow / tangential."""
    nu = outward_normal(domain, y)
    dot = float(np.dot(np.asarray(omega, dtype=float).reshape(3), nu))
    if dot < -TANGENT_TOL:
        side = BoundarySide.INFLOW
    elif dot > TANGENT_TOL:
        side = BoundarySide.OUTFLOW
    else:
        side = BoundarySide.TANGENTIAL
    return BoundaryClass(side, dot)


def _escape_root(domain: ConvexDomain, xs: np.ndarray, omegas: np.ndarray,
                 lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Safeguarded Newton with bisection fallback for level(x - s*omega) = 0.

    Requires level(x - lo*omega) <= 0 <= level(x - hi*omega) componentwise.
    """
    lo = lo.copy()
    hi = hi.copy()
    s = 0.5 * (lo + hi)
    for _ in range(120):
        p = xs - s[:, None] * omegas
        g = domain.level(p)
        gp = -np.einsum("ij,ij->i", omegas, domain.level_gradient(p))
        neg = g < 0.0
        lo = np.where(neg, s, lo)
        hi = np.where(neg, hi, s)
        with np.errstate(divide="ignore", invalid="ignore"):
            s_newton = s - g / gp
        ok = np.isfinite(s_newton) & (s_newton > lo) & (s_newton < hi)
        s = np.where(ok, s_newton, 0.5 * (lo + hi))
        if np.all(hi - lo < _ROOT_TOL):
            break
    return 0.5 * (lo + hi)


def _quadric_escape(domain: ConvexDomain, xs: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """Closed-form exit time for quadric level sets (balls and ellipsoids).

    In scaled coordinates the level is |u|^2 - 1 and the backward crossing
    solves a quadratic; the positive-part form reproduces the boundary
    extension (zero on inflow/tangential pairs) exactly.
    """
    scale = domain.semi_axes
    u = (xs - domain.center) / scale
    v = omegas / scale
    uv = np.einsum("ij,ij->i", u, v)
    vv = np.einsum("ij,ij->i", v, v)
    disc = uv * uv + vv * (1.0 - np.einsum("ij,ij->i", u, u))
    t = (uv + np.sqrt(np.maximum(disc, 0.0))) / vv
    return np.maximum(t, 0.0)


def escape_times(domain: ConvexDomain, xs, omegas) -> np.ndarray:
    """Extended exit time for batches of phase points.

    xs: (n, 3) positions in the closed domain; omegas: (3,) shared direction
    or (n, 3).  Returns (n,) times: backward distance to the boundary along
    -omega, zero on the inflow/tangential boundary set.  Quadric domains use
    the closed form; ``escape_times_rootfind`` is the generic path and serves
    as the independent cross-check.
    """
    xs, _ = _as_points(xs)
    omegas = np.asarray(omegas, dtype=float)
    if omegas.ndim == 1:
        omegas = np.broadcast_to(omegas, xs.shape)
    lv = domain.level(xs)
    if np.any(lv > BOUNDARY_TOL):
        raise OutsideDomain(f"level = {np.max(lv):.3e} exceeds boundary tolerance")
    if domain.kind in (DomainKind.UNIT_BALL, DomainKind.BALL, DomainKind.ELLIPSOID):
        return _quadric_escape(domain, xs, omegas)
    return escape_times_rootfind(domain, xs, omegas, _skip_level_check=True)


def escape_times_rootfind(domain: ConvexDomain, xs, omegas,
                          _skip_level_check: bool = False) -> np.ndarray:
    """Exit times by safeguarded Newton on the level function (any strictly
    convex domain); bracketed on [0, diameter]."""
    xs, _ = _as_points(xs)
    omegas = np.asarray(omegas, dtype=float)
    if omegas.ndim == 1:
        omegas = np.broadcast_to(omegas, xs.shape)
    n = xs.shape[0]
    lv = domain.level(xs)
    if not _skip_level_check and np.any(lv > BOUNDARY_TOL):
        raise OutsideDomain(f"level = {np.max(lv):.3e} exceeds boundary tolerance")

    times = np.zeros(n)
    on_boundary = np.abs(lv) <= BOUNDARY_TOL
    interior = ~on_boundary

    # Boundary starts: inflow/tangential have time zero by the extension;
    # outflow points trace the chord back across the domain.
    outflow = np.zeros(n, dtype=bool)
    if np.any(on_boundary):
        g = domain.level_gradient(xs[on_boundary])
        gn = np.linalg.norm(g, axis=-1)
        dots = np.einsum("ij,ij->i", omegas[on_boundary], g / np.maximum(gn, 1e-300)[:, None])
        outflow[np.flatnonzero(on_boundary)[dots > TANGENT_TOL]] = True

    d = domain.diameter
    hi0 = d * (1.0 + 1e-9)
    solve = interior | outflow
    if np.any(solve):
        idx = np.flatnonzero(solve)
        x_s, o_s = xs[idx], omegas[idx]
        lo = np.zeros(idx.size)
        # Outflow boundary starts have level(x) = 0; step inside before
        # bracketing.  Rays re-exiting within the step are tangential in all
        # but name and get time zero.
        eps_b = 1e-9 * d
        ob = outflow[idx]
        lo[ob] = eps_b
        g_lo = domain.level(x_s - lo[:, None] * o_s)
        drop = ob & (g_lo >= 0.0)
        g_hi = domain.level(x_s - hi0 * o_s)
        if np.any(g_hi[~drop] < 0.0):
            raise RootNotBracketed("no boundary crossing within the diameter bracket")
        keep = ~drop
        if np.any(keep):
            roots = _escape_root(domain, x_s[keep], o_s[keep], lo[keep], np.full(keep.sum(), hi0))
            times[idx[keep]] = roots
    return times


def extended_escape_time(domain: ConvexDomain, x, omega) -> float:
    """Extended exit time at a single phase point (see ``escape_times``)."""
    return float(escape_times(domain, np.asarray(x, dtype=float).reshape(1, 3), omega)[0])


def ball_escape_closed_form(x, omega, with_gradient: bool = True):
    """Closed-form exit time (and spatial gradient) on the unit ball.

    time = x.omega + sqrt((x.omega)^2 + 1 - |x|^2)
    grad = omega + ((x.omega) omega - x) / sqrt(...)

    The gradient is only defined for interior points; a square-root argument
    below 1e-14 raises ``GradientUndefinedOnBoundary``.
    """
    pts, single = _as_points(x)
    om = np.asarray(omega, dtype=float)
    if om.ndim == 1:
        om = np.broadcast_to(om, pts.shape)
    r2 = np.sum(pts * pts, axis=-1)
    if np.any(r2 > 1.0 + 10 * BOUNDARY_TOL):
        raise OutsideDomain("closed form requires |x| <= 1")
    xw = np.einsum("ij,ij->i", pts, om)
    disc = xw * xw + 1.0 - r2
    disc = np.maximum(disc, 0.0)
    root = np.sqrt(disc)
    time = xw + root
    if not with_gradient:
        return (float(time[0]) if single else time), None
    if np.any(disc < 1e-14):
        raise GradientUndefinedOnBoundary("exit-time gradient singular: sqrt argument < 1e-14")
    grad = om + (xw[:, None] * om - pts) / root[:, None]
    if single:
        return float(time[0]), grad[0]
    return time, grad


def escape_time_gradient(domain: ConvexDomain, x, omega) -> np.ndarray:
    """Spatial gradient of the exit time by implicit differentiation.

    With y = x - t*omega on the boundary, grad_x t = grad r(y) / (omega.grad r(y)).
    Near-tangential exit rays (|omega.grad r(y)| < 1e-8) are rejected: the
    gradient does not extend continuously there.
    """
    from .errors import GradientUnavailable

    pts, single = _as_points(x)
    om = np.asarray(omega, dtype=float)
    if om.ndim == 1:
        om = np.broadcast_to(om, pts.shape)
    t = escape_times(domain, pts, om)
    y = pts - t[:, None] * om
    g = domain.level_gradient(y)
    denom = np.einsum("ij,ij->i", om, g)
    if np.any(np.abs(denom) < 1e-8):
        raise GradientUnavailable("exit ray is near-tangential at the boundary")
    grad = g / denom[:, None]
    return grad[0] if single else grad


def backtrack_to_inflow(domain: ConvexDomain, x, omega):
    """Trace backward along -omega to the inflow boundary.

    Returns (y, s) with s = exit time > 0 and y = x - s*omega on the inflow
    boundary.  Raises ``TangentialStart`` from inflow/tangential starts where
    the extended exit time vanishes.
    """
    x = np.asarray(x, dtype=float).reshape(3)
    om = np.asarray(omega, dtype=float).reshape(3)
    s = extended_escape_time(domain, x, om)
    if s <= BOUNDARY_TOL:
        raise TangentialStart("exit time is zero; no inflow point to return")
    y = x - s * om
    return y, s


def support_margin(domain: ConvexDomain, points: Sequence[PhasePoint]) -> float:
    """Smallest extended exit time over a collection of phase points.

    This is the largest eta such that every point lies in the sublevel-set
    complement {exit time >= eta}; zero as soon as an inflow/tangential
    boundary point is included.
    """
    pts = list(points)
    if not pts:
        raise EmptyInput("support_margin needs at least one phase point")
    xs = np.stack([p.x for p in pts])
    oms = np.stack([p.omega for p in pts])
    return float(np.min(escape_times(domain, xs, oms)))


def support_margin_arrays(domain: ConvexDomain, xs, omegas) -> float:
    """Array-based variant of ``support_margin``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.size == 0:
        raise EmptyInput("support_margin needs at least one phase point")
    return float(np.min(escape_times(domain, xs, omegas)))


# -- boundary surface triangulation ---------------------------------------


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangulated boundary with centroid quadrature data."""

    points: np.ndarray   # (n_tri, 3) centroids projected to the surface
    areas: np.ndarray    # (n_tri,) flat triangle areas
    normals: np.ndarray  # (n_tri, 3) unit outward normals at the centroids

    @property
    def total_area(self) -> float:
        return float(np.sum(self.areas))


_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array([
    [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
    [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
    [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
], dtype=float)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])


def _unit_sphere_mesh(subdivisions: int):
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES
    for _ in range(subdivisions):
        edge_mid = {}
        verts_list = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = verts_list[i] + verts_list[j]
                m /= np.linalg.norm(m)
                verts_list.append(m)
                edge_mid[key] = len(verts_list) - 1
            return edge_mid[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        verts = np.array(verts_list)
        faces = np.array(new_faces)
    return verts, faces


def triangulate_boundary(domain: ConvexDomain, subdivisions: int = 4) -> SurfaceMesh:
    """Triangle-centroid quadrature mesh on the boundary surface."""
    verts, faces = _unit_sphere_mesh(subdivisions)
    if domain.kind is DomainKind.ELLIPSOID:
        mapped = domain.center + verts * domain.semi_axes
    else:
        mapped = domain.center + domain.radius * verts
    tri = mapped[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    centroids = domain.project_to_boundary(tri.mean(axis=1))
    normals = outward_normal(domain, centroids)
    return SurfaceMesh(centroids, areas, normals)
