"""Characteristic-tracing linear Boltzmann transport on strictly convex domains.

Modules cover domain geometry and exit times (``geometry``), coefficient
fields and grids (``fields``), the exact attenuation solve along
characteristics (``attenuation``), source iteration for scattering and the
inflow lift (``scattering``), energy marching for continuous slowing down
(``csda``), discrete mixed Sobolev and trace norms (``norms``), deterministic
invariant suites (``verify``), and a scenario-running CLI (``cli``).
"""

from .attenuation import (
    AccretivityResult,
    RayQuadrature,
    accretivity_functional,
    attenuation_solution,
    derivative_source,
    solve_attenuation,
    solve_attenuation_grid,
    solve_attenuation_gradient,
    solve_attenuation_points,
)
from .csda import (
    CompatibilityReport,
    MarchReport,
    MarchState,
    compatibility_check,
    explicit_csda,
    explicit_csda_grid,
    march_energy,
    solve_csda,
)
from .fields import (
    CoefficientSet,
    DiscreteField,
    EnergyInterval,
    GridSpec,
    kernel_support_check,
    leibniz_constant,
    sample_field,
    sup_norm_estimate,
)
from .geometry import (
    BoundaryClass,
    BoundarySide,
    ConvexDomain,
    DomainKind,
    PhasePoint,
    backtrack_to_inflow,
    ball_escape_closed_form,
    classify_boundary,
    escape_times,
    escape_times_rootfind,
    extended_escape_time,
    outward_normal,
    support_margin,
    triangulate_boundary,
)
from .norms import (
    NormOrder,
    TraceField,
    boundary_h_norm,
    green_residual,
    h0_margin,
    h_norm,
    trace_from_callable,
    trace_from_grid_field,
    trace_norm,
)
from .scattering import (
    IterationReport,
    apply_scatter,
    apply_scatter_grid,
    lift_inflow,
    scatter_norm_bound,
    solvability_threshold,
    solve_scattering,
    solve_with_inflow,
)

__all__ = [
    "AccretivityResult",
    "BoundaryClass",
    "BoundarySide",
    "CoefficientSet",
    "CompatibilityReport",
    "ConvexDomain",
    "DiscreteField",
    "DomainKind",
    "EnergyInterval",
    "GridSpec",
    "IterationReport",
    "MarchReport",
    "MarchState",
    "NormOrder",
    "PhasePoint",
    "RayQuadrature",
    "TraceField",
    "accretivity_functional",
    "apply_scatter",
    "apply_scatter_grid",
    "attenuation_solution",
    "backtrack_to_inflow",
    "ball_escape_closed_form",
    "boundary_h_norm",
    "classify_boundary",
    "compatibility_check",
    "derivative_source",
    "escape_times",
    "escape_times_rootfind",
    "explicit_csda",
    "explicit_csda_grid",
    "extended_escape_time",
    "green_residual",
    "h0_margin",
    "h_norm",
    "kernel_support_check",
    "leibniz_constant",
    "lift_inflow",
    "march_energy",
    "outward_normal",
    "sample_field",
    "scatter_norm_bound",
    "solvability_threshold",
    "solve_attenuation",
    "solve_attenuation_grid",
    "solve_attenuation_gradient",
    "solve_attenuation_points",
    "solve_csda",
    "solve_scattering",
    "solve_with_inflow",
    "support_margin",
    "sup_norm_estimate",
    "trace_from_callable",
    "trace_from_grid_field",
    "trace_norm",
    "triangulate_boundary",
]
