"""Scenario runner: parse a JSON configuration, execute a solver or
verification pipeline, and emit a machine-readable report plus field slices.

Commands:
    raytrans run <config.json> [--out DIR] [--seed N] [--threads N]
    raytrans verify <suite>    [--out DIR] [--seed N] [--threads N]

Environment overrides mirror the flags with the RAYTRANS_ prefix
(RAYTRANS_OUT, RAYTRANS_SEED, RAYTRANS_THREADS); explicit flags win.
Exit status is zero iff every selected property passes.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import attenuation as at
from . import csda
from . import norms as nm
from . import scattering as sc
from .catalog import build_boundary, build_scatter, build_sigma, build_source, build_stopping
from .errors import ConfigError, RayTransError
from .fields import CoefficientSet, DiscreteField, EnergyInterval, GridSpec
from .geometry import ConvexDomain, triangulate_boundary
from .verify import SUITES, run_suite

SCHEMA_VERSION = 1
ENV_PREFIX = "RAYTRANS_"
PROBLEM_KINDS = ("attenuation", "scattering", "scattering_with_inflow", "csda", "explicit_csda")


@dataclass
class RunReport:
    """Self-contained record of one scenario or verification run."""

    command: str
    scenario: dict
    seed: int
    grid_meta: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)
    residuals: list = field(default_factory=list)
    iteration: dict = field(default_factory=dict)
    properties: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(p["pass"] for p in self.properties)

    def to_dict(self, include_timings: bool = True) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "scenario": self.scenario,
            "seed": self.seed,
            "grid": self.grid_meta,
            "norms": self.norms,
            "residuals": self.residuals,
            "iteration": self.iteration,
            "properties": self.properties,
        }
        if include_timings:
            out["timings"] = self.timings
        return out

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), sort_keys=True, indent=2)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration does not parse as JSON: {exc}")


def _get(block: dict, key: str, context: str):
    if key not in block:
        raise ConfigError(f"missing key '{key}' in {context} block")
    return block[key]


def build_domain(block: dict) -> ConvexDomain:
    kind = _get(block, "kind", "domain")
    if kind == "unit_ball":
        return ConvexDomain.unit_ball()
    if kind == "ball":
        return ConvexDomain.ball(block.get("center", (0, 0, 0)), _get(block, "radius", "domain"))
    if kind == "ellipsoid":
        return ConvexDomain.ellipsoid(block.get("center", (0, 0, 0)),
                                      _get(block, "semi_axes", "domain"))
    raise ConfigError(f"unknown domain kind '{kind}'")


def build_grid(block: dict, domain: ConvexDomain) -> GridSpec:
    interval = EnergyInterval(float(block.get("E0", 0.0)), float(block.get("Em", 1.0)))
    return GridSpec(domain,
                    int(_get(block, "n_spatial", "grid")),
                    int(block.get("n_polar", 4)),
                    int(block.get("n_azimuth", 8)),
                    interval,
                    int(block.get("n_energy", 1)))


def build_coefficients(block: dict, grid: GridSpec) -> CoefficientSet:
    sigma = build_sigma(_get(block, "sigma", "coefficients"))
    scatter = None
    if block.get("scatter") is not None:
        scatter = build_scatter(block["scatter"])
    stopping, kappa = (None, 0.0)
    if block.get("stopping") is not None:
        stopping, kappa = build_stopping(block["stopping"])
    shift_spec = block.get("shift", 0.0)
    partial = CoefficientSet(sigma_t=sigma, scatter=scatter, stopping=stopping, kappa=kappa)
    if shift_spec == "auto":
        shift = sc.solvability_threshold(partial, grid, m=0) + 1.0
    else:
        shift = float(shift_spec)
    return CoefficientSet(sigma_t=sigma, scatter=scatter, stopping=stopping,
                          kappa=kappa, shift=shift)


def _quadrature(problem: dict) -> at.RayQuadrature:
    q = problem.get("quadrature", {})
    return at.RayQuadrature(int(q.get("panels_per_unit_length", 16)),
                            int(q.get("nodes_per_panel", 4)))


def _field_norms(fld: DiscreteField) -> dict:
    return {
        "l2": nm.h_norm(fld, nm.NormOrder(0)),
        "h1": nm.h_norm(fld, nm.NormOrder(1)),
        "sup": fld.sup(),
    }


def _grid_meta(grid: GridSpec) -> dict:
    return {
        "h": list(map(float, grid.h)),
        "n_interior": int(grid.n_interior),
        "n_polar": int(grid.n_polar),
        "n_azimuth": int(grid.n_azimuth),
        "n_energy": int(grid.n_energy),
        "E0": float(grid.interval.E0),
        "Em": float(grid.interval.Em),
    }


def _prop(name: str, passed: bool, value: float, tolerance: float) -> dict:
    return {"name": name, "pass": bool(passed), "value": float(value),
            "tolerance": float(tolerance)}


def _inflow_trace_property(f, coeffs, grid, quad) -> dict:
    """Evaluate the solver at sampled inflow boundary pairs (exit time zero:
    the characteristic integral is empty there)."""
    mesh = triangulate_boundary(grid.domain, 2)
    worst = 0.0
    for j in range(0, grid.n_omega, max(1, grid.n_omega // 8)):
        omega = grid.sphere_nodes[j]
        ys = mesh.points[mesh.normals @ omega < -1e-3][:64]
        if ys.size == 0:
            continue
        vals = at.solve_attenuation_points(f, coeffs, grid.domain, ys, omega,
                                           float(grid.energy_nodes[0]), quad)
        worst = max(worst, float(np.max(np.abs(vals))))
    return _prop("inflow_trace_zero", worst < 1e-12, worst, 1e-12)


def _run_attenuation(cfg: dict, grid: GridSpec, coeffs: CoefficientSet, report: RunReport) -> DiscreteField:
    problem = cfg["problem"]
    quad = _quadrature(problem)
    f = build_source(_get(problem, "source", "problem"))
    fld = at.solve_attenuation_grid(f, coeffs, grid, quad)
    report.norms = _field_norms(fld)
    report.properties.append(_inflow_trace_property(f, coeffs, grid, quad))

    src_block = problem["source"]
    sig_block = cfg["coefficients"]["sigma"]
    if src_block.get("name") == "constant" and sig_block.get("name") == "constant":
        sig_total = float(sig_block["value"]) + coeffs.shift
        t = grid.escape_cache()
        if sig_total > 0:
            ref = float(src_block["value"]) * (1.0 - np.exp(-sig_total * t)) / sig_total
        else:
            ref = float(src_block["value"]) * t
        worst = float(np.max(np.abs(fld.values - ref[:, :, None])))
        report.properties.append(_prop("closed_form_agreement", worst < 1e-8, worst, 1e-8))
    if src_block.get("name") in ("constant", "radial_bump") and float(
            src_block.get("value", src_block.get("amplitude", 0.0))) >= 0.0:
        report.properties.append(_prop("nonnegative_solution", float(np.min(fld.values)) >= -1e-12,
                                       float(np.min(fld.values)), 0.0))
    return fld


def _run_scattering(cfg: dict, grid: GridSpec, coeffs: CoefficientSet, report: RunReport,
                    with_inflow: bool) -> DiscreteField:
    problem = cfg["problem"]
    quad = _quadrature(problem)
    f = build_source(_get(problem, "source", "problem"))
    tol = float(problem.get("tol", 1e-8))
    max_iter = int(problem.get("max_iter", 200))
    if with_inflow:
        g = build_boundary(_get(problem, "boundary", "problem"), grid.interval.Em)
        fld, rep = sc.solve_with_inflow(f, g, coeffs, grid, quad, tol=tol, max_iter=max_iter,
                                        lam=float(problem.get("lambda", 0.0)))
    else:
        fld, rep = sc.solve_scattering(f, coeffs, grid, quad, tol=tol, max_iter=max_iter)
    report.norms = _field_norms(fld)
    report.residuals = [float(r) for r in rep.residual_history]
    report.iteration = {
        "iterations": rep.iterations,
        "converged": rep.converged,
        "estimated_rate": None if np.isnan(rep.estimated_rate) else float(rep.estimated_rate),
    }
    report.properties.append(_prop("iteration_converged", rep.converged,
                                   rep.residual_history[-1], tol))
    if coeffs.scatter is not None and not np.isnan(rep.estimated_rate):
        bound = sc.scatter_norm_bound(coeffs.scatter, 0, grid)
        from .fields import leibniz_constant, sup_norm_estimate

        c_prime = leibniz_constant(0) * sup_norm_estimate(coeffs.sigma_t, 0, grid)
        cap = bound / max(coeffs.shift - c_prime, 1e-300) + 0.05
        report.properties.append(_prop("rate_below_bound", rep.estimated_rate <= cap,
                                       rep.estimated_rate, cap))
    if with_inflow:
        g = build_boundary(problem["boundary"], grid.interval.Em)
        tr = nm.trace_from_grid_field(fld, None, subdivisions=3)
        worst = 0.0
        for j in range(grid.n_omega):
            sel = tr.dots[:, j] < -0.3
            if not np.any(sel):
                continue
            expect = np.asarray(g(tr.mesh.points[sel], grid.sphere_nodes[j],
                                  float(grid.energy_nodes[0])), dtype=float)
            worst = max(worst, float(np.max(np.abs(tr.values[sel, j, 0] - expect))))
        htol = 2.0 * float(np.mean(grid.h))
        report.properties.append(_prop("inflow_trace_matches_data", worst < htol, worst, htol))
    return fld


def _run_csda(cfg: dict, grid: GridSpec, coeffs: CoefficientSet, report: RunReport) -> DiscreteField:
    problem = cfg["problem"]
    quad = _quadrature(problem)
    f = build_source(_get(problem, "source", "problem"))
    dE = problem.get("dE")
    dE = float(dE) if dE is not None else None
    tol = float(problem.get("tol", 1e-10))
    snapshots = []
    out_block = cfg.get("output", {})
    snapshot_cb = None
    if out_block.get("write_snapshots"):
        snapshot_cb = lambda state: snapshots.append(
            {"E_prime": float(state.E_current), "step": float(state.step),
             "sup": float(np.max(np.abs(state.phi)))})
    phi, rep = csda.march_energy(f, coeffs, grid, quad, dE=dE, tol=tol,
                                 snapshot_cb=snapshot_cb)
    fld = csda.transform_from_march(phi, grid, coeffs.shift)
    if snapshots and out_block.get("dir"):
        snap_dir = Path(out_block["dir"])
        snap_dir.mkdir(parents=True, exist_ok=True)
        with open(snap_dir / "march_snapshots.jsonl", "w") as fh:
            for rec in snapshots:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    report.norms = _field_norms(fld)
    report.iteration = {"steps": rep.steps, "inner_iterations": rep.inner_iterations}
    report.properties.append(_prop("cutoff_energy_trace", rep.final_slice_sup < 1e-12,
                                   rep.final_slice_sup, 1e-12))
    report.properties.append(_prop("inflow_trace", rep.inflow_trace_sup < 1e-10,
                                   rep.inflow_trace_sup, 1e-10))

    if problem.get("halving_sweep"):
        sig_block = cfg["coefficients"]["sigma"]
        stop_block = cfg["coefficients"].get("stopping") or {}
        explicit_compatible = (sig_block.get("name") == "constant"
                               and coeffs.scatter is None
                               and stop_block.get("name") == "constant"
                               and float(stop_block.get("value", 0.0)) == -1.0
                               and coeffs.shift == 0.0)
        if not explicit_compatible:
            raise ConfigError("halving_sweep needs constant sigma, stopping -1, no scatter, shift 0")
        base_dE = dE if dE is not None else grid.interval.length / 8.0
        ref = csda.explicit_csda_grid(f, float(sig_block["value"]), grid, quad)
        nref = nm.h_norm(ref, nm.NormOrder(0))
        errs = []
        for step in (base_dE, base_dE / 2.0):
            sol, _ = csda.solve_csda(f, coeffs, grid, quad, dE=step, tol=tol)
            err = nm.h_norm(sol.with_values(sol.values - ref.values), nm.NormOrder(0)) / nref
            errs.append({"dE": float(step), "l2_rel_error": float(err)})
        report.norms["halving_sweep"] = errs
        ratio = errs[1]["l2_rel_error"] / errs[0]["l2_rel_error"]
        report.properties.append(_prop("halving_error_ratio", 0.4 <= ratio <= 0.6, ratio, 0.6))
    return fld


def _run_explicit_csda(cfg: dict, grid: GridSpec, coeffs: CoefficientSet,
                       report: RunReport) -> DiscreteField:
    problem = cfg["problem"]
    sig_block = cfg["coefficients"]["sigma"]
    if sig_block.get("name") != "constant":
        raise ConfigError("explicit_csda needs a constant sigma")
    quad = _quadrature(problem)
    f = build_source(_get(problem, "source", "problem"))
    fld = csda.explicit_csda_grid(f, float(sig_block["value"]), grid, quad)
    report.norms = _field_norms(fld)
    report.properties.append(_prop("cutoff_energy_trace",
                                   float(np.max(np.abs(fld.values[:, :, -1]))) < 1e-12,
                                   float(np.max(np.abs(fld.values[:, :, -1]))), 1e-12))
    return fld


def write_field_csv(fld: DiscreteField, path: Path) -> None:
    grid = fld.grid
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "omega_index", "E", "value"])
        for j in range(grid.n_omega):
            for k in range(grid.n_energy):
                E = float(grid.energy_nodes[k])
                for i in range(grid.n_interior):
                    x, y, z = grid.coords[i]
                    writer.writerow([f"{x:.12g}", f"{y:.12g}", f"{z:.12g}",
                                     j, f"{E:.12g}", f"{fld.values[i, j, k]:.17g}"])


def run_scenario(config, out_dir: Optional[str] = None, seed: int = 0,
                 write_fields: Optional[bool] = None) -> RunReport:
    """Execute one configured pipeline and assemble its report."""
    cfg = load_config(config) if not isinstance(config, dict) else config
    for key in ("domain", "grid", "coefficients", "problem"):
        if key not in cfg:
            raise ConfigError(f"missing top-level '{key}' block")
    kind = _get(cfg["problem"], "kind", "problem")
    if kind not in PROBLEM_KINDS:
        raise ConfigError(f"unknown problem kind '{kind}' (choose from {', '.join(PROBLEM_KINDS)})")

    t0 = time.time()
    domain = build_domain(cfg["domain"])
    grid = build_grid(cfg["grid"], domain)
    coeffs = build_coefficients(cfg["coefficients"], grid)
    report = RunReport(command=f"run:{kind}", scenario=cfg, seed=seed,
                       grid_meta=_grid_meta(grid))
    t_setup = time.time() - t0

    t0 = time.time()
    if kind == "attenuation":
        fld = _run_attenuation(cfg, grid, coeffs, report)
    elif kind == "scattering":
        fld = _run_scattering(cfg, grid, coeffs, report, with_inflow=False)
    elif kind == "scattering_with_inflow":
        fld = _run_scattering(cfg, grid, coeffs, report, with_inflow=True)
    elif kind == "csda":
        fld = _run_csda(cfg, grid, coeffs, report)
    else:
        fld = _run_explicit_csda(cfg, grid, coeffs, report)
    t_solve = time.time() - t0

    for suite in cfg.get("verification", []):
        for r in run_suite(suite, seed):
            report.properties.append(r.as_dict())

    report.timings = {"setup_s": t_setup, "solve_s": t_solve}
    out_block = cfg.get("output", {})
    target = out_dir if out_dir is not None else out_block.get("dir")
    if target is not None:
        outp = Path(target)
        outp.mkdir(parents=True, exist_ok=True)
        (outp / "report.json").write_text(report.to_json())
        do_fields = write_fields if write_fields is not None else out_block.get("write_fields", True)
        if do_fields:
            write_field_csv(fld, outp / "field.csv")
    return report


def run_verification_suite(suite: str, seed: int = 0, out_dir: Optional[str] = None) -> RunReport:
    """Run a named invariant suite and wrap it in a report."""
    results = run_suite(suite, seed)
    report = RunReport(command=f"verify:{suite}", scenario={"suite": suite}, seed=seed)
    report.properties = [r.as_dict() for r in results]
    if out_dir is not None:
        outp = Path(out_dir)
        outp.mkdir(parents=True, exist_ok=True)
        (outp / "report.json").write_text(report.to_json())
    return report


def _env_default(name: str, fallback):
    return os.environ.get(ENV_PREFIX + name, fallback)


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(prog="raytrans",
                                     description="transport scenario runner and verifier")
    sub = parser.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="execute a scenario configuration")
    p_run.add_argument("config", help="path to the JSON scenario file")
    p_ver = sub.add_parser("verify", help="run a verification suite")
    p_ver.add_argument("suite", choices=SUITES)
    for p in (p_run, p_ver):
        p.add_argument("--out", default=_env_default("OUT", None), help="output directory")
        p.add_argument("--seed", type=int, default=int(_env_default("SEED", 0)))
        p.add_argument("--threads", type=int, default=None,
                       help="thread budget recorded in the report; exported to "
                            "BLAS thread-count environment variables for child code")
    args = parser.parse_args(argv)

    if args.threads is None and _env_default("THREADS", None) is not None:
        args.threads = int(_env_default("THREADS", "1"))
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    try:
        if args.cmd == "run":
            report = run_scenario(args.config, out_dir=args.out, seed=args.seed)
        else:
            report = run_verification_suite(args.suite, seed=args.seed, out_dir=args.out)
    except RayTransError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    if args.threads is not None:
        report.timings["threads"] = args.threads
    for p in report.properties:
        status = "PASS" if p["pass"] else "FAIL"
        print(f"{status} {p['name']}: value={p['value']:.6g} tolerance={p['tolerance']:.6g}")
    if args.out:
        print(f"report written to {Path(args.out) / 'report.json'}")
    return 0 if report.all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
