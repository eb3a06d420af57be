"""Problem files, expression catalogs, and deterministic run artifacts.

A problem file is a TOML document describing the four boundary sides, the
boundary-condition tags, the PDE data, the quantity of interest, and the
run parameters.  Expressions for the source, the Neumann flux, and the
functional integrands come from small named catalogs so that every entry
carries a closed-form derivative (the adjoint right-hand side needs it).

Output artifacts (run-record CSV, mesh and geometry dumps) are written
atomically and deterministically: identical inputs produce byte-identical
files.
"""
from __future__ import annotations

import math
import os
import tempfile
try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .boundary_fit import BoundaryCurve, ExactBoundary, FitConfig
from .defeature_loop import IterationRecord, RunConfig
from .parameterization import EggConfig, GeometryMap
from .pde import Integrand, PdeProblem, QoiSpec, ScalarField

SIDES = ("south", "east", "north", "west")


class ProblemFileError(ValueError):
    """Raised for unreadable or inconsistent problem files."""


# ---------------------------------------------------------------------------
# expression catalogs
# ---------------------------------------------------------------------------

def _as_entry(value, where: str) -> dict:
    """Normalize a catalog reference: bare string or table with ``name``."""
    if isinstance(value, str):
        return {"name": value}
    if isinstance(value, dict):
        if "name" not in value:
            raise ProblemFileError(f"{where}: catalog entry needs a 'name'")
        return dict(value)
    raise ProblemFileError(f"{where}: expected a name or a table, got "
                           f"{type(value).__name__}")


def scalar_field_from_entry(value, where: str) -> ScalarField:
    """Catalog of closed-form scalar fields on the physical plane.

    ``zero``, ``one``, ``constant`` (value), ``affine`` (c0 + cx*x + cy*y)
    and ``sine_product`` (scale * sin(kx*pi*x) * sin(ky*pi*y)).
    """
    entry = _as_entry(value, where)
    name = entry["name"]
    if name == "zero":
        return ScalarField.zero()
    if name == "one":
        return ScalarField.constant(1.0)
    if name == "constant":
        return ScalarField.constant(float(entry["value"]))
    if name == "affine":
        c0 = float(entry.get("c0", 0.0))
        cx = float(entry.get("cx", 0.0))
        cy = float(entry.get("cy", 0.0))
        return ScalarField(
            lambda x: c0 + cx * x[:, 0] + cy * x[:, 1],
            lambda x: np.broadcast_to([cx, cy], (len(x), 2)).copy())
    if name == "sine_product":
        kx = float(entry.get("kx", 1.0)) * math.pi
        ky = float(entry.get("ky", 1.0)) * math.pi
        sc = float(entry.get("scale", 1.0))
        return ScalarField(
            lambda x: sc * np.sin(kx * x[:, 0]) * np.sin(ky * x[:, 1]),
            lambda x: np.column_stack([
                sc * kx * np.cos(kx * x[:, 0]) * np.sin(ky * x[:, 1]),
                sc * ky * np.sin(kx * x[:, 0]) * np.cos(ky * x[:, 1])]))
    raise ProblemFileError(f"{where}: unknown scalar field '{name}'")


def integrand_from_entry(value, where: str) -> Integrand:
    """Catalog of functional integrands: ``square``, ``identity``, ``one``."""
    entry = _as_entry(value, where)
    name = entry["name"]
    if name == "square":
        return Integrand.square()
    if name == "identity":
        return Integrand.identity()
    if name == "one":
        return Integrand.one()
    raise ProblemFileError(f"{where}: unknown integrand '{name}'")


def curve_from_entry(entry: dict, where: str):
    """Catalog of boundary side curves.

    ``segment`` (p0, p1), ``sine_segment`` (p0, p1, amplitude, frequency:
    the straight segment displaced by amplitude * sin(frequency*pi*s) along
    its left unit normal), and ``spline`` (degree, knots, control).
    Returns a callable ``f(s, deriv=0)`` mapping samples of [0, 1] to
    points (deriv 0) or tangents (deriv 1).
    """
    kind = entry.get("curve")
    if kind == "segment":
        p0 = np.asarray(entry["p0"], dtype=float)
        p1 = np.asarray(entry["p1"], dtype=float)

        def f(s, deriv=0):
            s = np.atleast_1d(np.asarray(s, dtype=float))
            if deriv == 0:
                return p0 + np.outer(s, p1 - p0)
            return np.tile(p1 - p0, (len(s), 1))

        return f
    if kind == "sine_segment":
        p0 = np.asarray(entry["p0"], dtype=float)
        p1 = np.asarray(entry["p1"], dtype=float)
        amp = float(entry["amplitude"])
        om = float(entry["frequency"]) * math.pi
        d = p1 - p0
        nrm = math.hypot(*d)
        if nrm == 0.0:
            raise ProblemFileError(f"{where}: degenerate sine_segment")
        normal = np.array([-d[1], d[0]]) / nrm

        def f(s, deriv=0):
            s = np.atleast_1d(np.asarray(s, dtype=float))
            if deriv == 0:
                return p0 + np.outer(s, d) + amp * np.outer(np.sin(om * s),
                                                            normal)
            return d + amp * om * np.outer(np.cos(om * s), normal)

        return f
    if kind == "spline":
        deg = int(entry["degree"])
        knots = np.asarray(entry["knots"], dtype=float)
        ctrl = np.asarray(entry["control"], dtype=float)
        if ctrl.ndim != 2 or ctrl.shape[1] != 2:
            raise ProblemFileError(f"{where}: control must be a list of "
                                   "2-vectors")
        if len(knots) != len(ctrl) + deg + 1:
            raise ProblemFileError(f"{where}: need len(knots) == "
                                   "len(control) + degree + 1")
        spl = BSpline(knots, ctrl, deg, extrapolate=False)
        der = spl.derivative()

        def f(s, deriv=0):
            s = np.clip(np.atleast_1d(np.asarray(s, dtype=float)),
                        knots[deg], knots[-deg - 1])
            return np.atleast_2d((spl if deriv == 0 else der)(s))

        return f
    raise ProblemFileError(f"{where}: unknown curve kind '{kind}'")


# ---------------------------------------------------------------------------
# problem specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    """A fully validated problem: geometry, data, functional, run config.

    ``canonical`` holds the normalized document the spec was parsed from;
    writing it back with :func:`dump_problem` and re-parsing yields an
    equal spec (``canonical`` dictionaries compare equal).
    """

    exact: ExactBoundary
    prob: PdeProblem
    qoi: QoiSpec
    run: RunConfig
    reference_rounds: int
    reference_sides: tuple[str, ...]
    j_ref: float | None
    boundary_dim_ref: int | None
    canonical: dict

    def __eq__(self, other):
        return isinstance(other, ProblemSpec) and \
            self.canonical == other.canonical

    def __hash__(self):
        return hash(repr(self.canonical))


def _canonical_curve(entry: dict, where: str) -> dict:
    kind = entry.get("curve")
    if kind == "segment":
        return {"curve": "segment",
                "p0": [float(v) for v in entry["p0"]],
                "p1": [float(v) for v in entry["p1"]]}
    if kind == "sine_segment":
        return {"curve": "sine_segment",
                "p0": [float(v) for v in entry["p0"]],
                "p1": [float(v) for v in entry["p1"]],
                "amplitude": float(entry["amplitude"]),
                "frequency": float(entry["frequency"])}
    if kind == "spline":
        return {"curve": "spline", "degree": int(entry["degree"]),
                "knots": [float(v) for v in entry["knots"]],
                "control": [[float(v) for v in row]
                            for row in entry["control"]]}
    raise ProblemFileError(f"{where}: unknown curve kind '{kind}'")


def _canonical_entry(value, where: str) -> dict:
    entry = _as_entry(value, where)
    return {k: (float(v) if isinstance(v, (int, float))
                and not isinstance(v, bool) and k != "name" else v)
            for k, v in sorted(entry.items())}


def parse_problem(doc: dict, source: str = "<problem>") -> ProblemSpec:
    """Build a validated :class:`ProblemSpec` from a parsed TOML document."""
    def section(name, required=True):
        val = doc.get(name)
        if val is None:
            if required:
                raise ProblemFileError(f"{source}: missing [{name}] section")
            return {}
        if not isinstance(val, dict):
            raise ProblemFileError(f"{source}: [{name}] must be a table")
        return val

    geom = section("geometry")
    missing = [s for s in SIDES if s not in geom]
    if missing:
        raise ProblemFileError(f"{source}: [geometry] missing sides "
                               f"{missing}")
    curves = {}
    geom_canon = {}
    for side in SIDES:
        where = f"{source}: [geometry.{side}]"
        curves[side] = curve_from_entry(geom[side], where)
        geom_canon[side] = _canonical_curve(geom[side], where)

    bc = section("bc")
    neumann = bc.get("neumann", [])
    if not isinstance(neumann, list) or \
            any(s not in SIDES for s in neumann):
        raise ProblemFileError(f"{source}: [bc] neumann must list sides "
                               f"out of {list(SIDES)}")
    neumann_sides = frozenset(neumann)
    exact = ExactBoundary(curves, neumann_sides=neumann_sides)

    data = section("data")
    where_f, where_g = f"{source}: [data] f", f"{source}: [data] g"
    f_entry = data.get("f", "zero")
    g_entry = data.get("g", "zero")
    prob = PdeProblem(scalar_field_from_entry(f_entry, where_f),
                      scalar_field_from_entry(g_entry, where_g),
                      neumann_sides)

    qoi_sec = section("qoi")
    j = q = None
    j_region = q_interval = None
    q_side = None
    if "j" in qoi_sec:
        j = integrand_from_entry(qoi_sec["j"], f"{source}: [qoi] j")
        region = qoi_sec.get("j_region")
        if region is not None:
            if len(region) != 4:
                raise ProblemFileError(f"{source}: [qoi] j_region must be "
                                       "[x0, x1, y0, y1]")
            j_region = tuple(float(v) for v in region)
    if "q" in qoi_sec:
        q = integrand_from_entry(qoi_sec["q"], f"{source}: [qoi] q")
        q_side = qoi_sec.get("q_side")
        if q_side not in SIDES:
            raise ProblemFileError(f"{source}: [qoi] q_side must be one of "
                                   f"{list(SIDES)}")
        interval = qoi_sec.get("q_interval")
        if interval is not None:
            q_interval = (float(interval[0]), float(interval[1]))
    if j is None and q is None:
        raise ProblemFileError(f"{source}: [qoi] needs at least one of "
                               "j, q")
    qoi_kwargs = {"j": j, "q": q, "q_side": q_side}
    if j_region is not None:
        qoi_kwargs["j_region"] = j_region
    if q_interval is not None:
        qoi_kwargs["q_interval"] = q_interval
    qoi = QoiSpec(**qoi_kwargs)

    run = section("run")
    epsilon = run.get("epsilon", 1e-7)
    if epsilon == "none":
        epsilon = math.inf
    try:
        cfg = RunConfig(
            epsilon=float(epsilon),
            alpha=float(run.get("alpha", 0.3)),
            initial_cells=int(run.get("initial_cells", 10)),
            degree=int(run.get("degree", 3)),
            fit=FitConfig(kappa0=float(run.get("kappa0", 1.0)),
                          kappa1=float(run.get("kappa1", 1.0))),
            egg=EggConfig(mu=float(run.get("mu", 1e-6))),
            state_depth=int(run.get("state_depth", 2)),
            state_level=(int(run["state_level"])
                         if "state_level" in run else None),
            max_iters=int(run.get("max_iters", 30)))
    except ValueError as exc:
        raise ProblemFileError(f"{source}: [run]: {exc}") from exc

    ref = section("reference", required=False)
    rounds = int(ref.get("rounds", 7))
    sides = ref.get("sides", list(SIDES))
    if any(s not in SIDES for s in sides):
        raise ProblemFileError(f"{source}: [reference] sides must be a "
                               f"subset of {list(SIDES)}")
    j_ref = float(ref["j_e"]) if "j_e" in ref else None
    bdim_ref = int(ref["boundary_dim"]) if "boundary_dim" in ref else None

    run_canon = {"epsilon": ("none" if math.isinf(cfg.epsilon)
                             else cfg.epsilon),
                 "alpha": cfg.alpha, "initial_cells": cfg.initial_cells,
                 "degree": cfg.degree, "kappa0": cfg.fit.kappa0,
                 "kappa1": cfg.fit.kappa1, "mu": cfg.egg.mu,
                 "state_depth": cfg.state_depth,
                 "max_iters": cfg.max_iters}
    if cfg.state_level is not None:
        run_canon["state_level"] = cfg.state_level
    qoi_canon = {}
    if j is not None:
        qoi_canon["j"] = _canonical_entry(qoi_sec["j"], source)
        if j_region is not None:
            qoi_canon["j_region"] = list(j_region)
    if q is not None:
        qoi_canon["q"] = _canonical_entry(qoi_sec["q"], source)
        qoi_canon["q_side"] = q_side
        if q_interval is not None:
            qoi_canon["q_interval"] = list(q_interval)
    ref_canon = {"rounds": rounds, "sides": [s for s in SIDES if s in sides]}
    if j_ref is not None:
        ref_canon["j_e"] = j_ref
    if bdim_ref is not None:
        ref_canon["boundary_dim"] = bdim_ref
    canonical = {
        "geometry": geom_canon,
        "bc": {"neumann": [s for s in SIDES if s in neumann_sides]},
        "data": {"f": _canonical_entry(f_entry, source),
                 "g": _canonical_entry(g_entry, source)},
        "qoi": qoi_canon,
        "run": run_canon,
        "reference": ref_canon,
    }
    return ProblemSpec(exact=exact, prob=prob, qoi=qoi, run=cfg,
                       reference_rounds=rounds,
                       reference_sides=tuple(ref_canon["sides"]),
                       j_ref=j_ref, boundary_dim_ref=bdim_ref,
                       canonical=canonical)


def load_problem(path: str) -> ProblemSpec:
    """Parse and validate a TOML problem file."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ProblemFileError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ProblemFileError(f"{path}: {exc}") from exc
    return parse_problem(doc, source=os.path.basename(path))


# ---------------------------------------------------------------------------
# TOML emission (tomllib only reads)
# ---------------------------------------------------------------------------

def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        text = repr(value)
        return text if any(c in text for c in ".einf") else text + ".0"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ProblemFileError(f"cannot serialize {type(value).__name__}")


def _emit_table(name: str, table: dict, lines: list):
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    if scalars or not subtables:
        lines.append(f"[{name}]")
        for key, val in scalars.items():
            lines.append(f"{key} = {_toml_scalar(val)}")
        lines.append("")
    for key, sub in subtables.items():
        _emit_table(f"{name}.{key}", sub, lines)


def problem_to_toml(spec: ProblemSpec) -> str:
    """Serialize the canonical document back to TOML text."""
    lines: list[str] = []
    for name, table in spec.canonical.items():
        if table:
            _emit_table(name, table, lines)
    return "\n".join(lines) + "\n"


def dump_problem(spec: ProblemSpec, path: str) -> None:
    atomic_write_text(path, problem_to_toml(spec))


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("n", "cells", "dim", "boundary_dim", "boundary_dim_ref",
               "J", "J_rel_err", "estimator", "estimator_rel", "marked",
               "refined_cells")


def _fmt(x: float) -> str:
    return f"{float(x):.16e}"


def atomic_write_text(path: str, text: str) -> None:
    """Write text via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_record_csv(records: list[IterationRecord],
                   j_ref: float | None = None,
                   boundary_dim_ref: int | None = None) -> str:
    """Render iteration records as a CSV table with a fixed column set.

    Relative columns are filled only when a reference value is supplied;
    wall-clock timings are deliberately omitted so identical inputs yield
    byte-identical files.
    """
    lines = [",".join(CSV_COLUMNS)]
    for rec in records:
        rel = err_rel = ""
        if j_ref is not None and j_ref != 0.0:
            rel = _fmt(abs(rec.J - j_ref) / abs(j_ref))
            err_rel = _fmt(rec.estimator / abs(j_ref))
        lines.append(",".join([
            str(rec.n), str(rec.num_cells), str(rec.dim),
            str(rec.boundary_dim),
            "" if boundary_dim_ref is None else str(boundary_dim_ref),
            _fmt(rec.J), rel, _fmt(rec.estimator), err_rel,
            str(rec.marked), str(rec.refined_cells)]))
    return "\n".join(lines) + "\n"


def write_run_record(records, path, j_ref=None, boundary_dim_ref=None):
    atomic_write_text(path, run_record_csv(records, j_ref,
                                           boundary_dim_ref))


def mesh_dump_csv(mesh) -> str:
    """Active cells as ``level,i,j,u0,u1,v0,v1`` rows."""
    lines = ["level,i,j,u0,u1,v0,v1"]
    for cell in mesh.active_cells():
        u0, u1, v0, v1 = mesh.cell_bounds(cell)
        lines.append(f"{cell[0]},{cell[1]},{cell[2]},{_fmt(u0)},{_fmt(u1)},"
                     f"{_fmt(v0)},{_fmt(v1)}")
    return "\n".join(lines) + "\n"


def write_mesh_dump(mesh, path):
    atomic_write_text(path, mesh_dump_csv(mesh))


def control_net_csv(geo: GeometryMap) -> str:
    """Full control net of a geometry map: one ``fn,x,y`` row per function."""
    lines = ["fn,x,y"]
    for i, (x, y) in enumerate(geo.control):
        lines.append(f"{i},{_fmt(x)},{_fmt(y)}")
    return "\n".join(lines) + "\n"


def boundary_dump_csv(curve: BoundaryCurve, samples_per_side: int = 256) -> str:
    """Per-side control polygons and a dense polyline sampling.

    Rows are ``side,kind,index,s,x,y`` where ``kind`` is ``control`` (the
    side's control polygon, ordered along the side; ``s`` is the support
    midpoint) or ``sample`` (uniform polyline samples of the fitted curve).
    """
    basis = curve.basis
    lines = ["side,kind,index,s,x,y"]
    for side in SIDES:
        along = 0 if side in ("south", "north") else 1
        picks = []
        for row, fn in enumerate(curve.dofs.indices):
            u0, u1, v0, v1 = basis.function_support(fn)
            touches = {"south": v0 == 0.0, "north": v1 == 1.0,
                       "west": u0 == 0.0, "east": u1 == 1.0}[side]
            if touches:
                mid = (0.5 * (u0 + u1), 0.5 * (v0 + v1))[along]
                picks.append((mid, row))
        picks.sort()
        for idx, (mid, row) in enumerate(picks):
            x, y = curve.control_points[row]
            lines.append(f"{side},control,{idx},{_fmt(mid)},"
                         f"{_fmt(x)},{_fmt(y)}")
        s = np.linspace(0.0, 1.0, samples_per_side)
        pts = curve.eval(side, s)
        for idx in range(samples_per_side):
            lines.append(f"{side},sample,{idx},{_fmt(s[idx])},"
                         f"{_fmt(pts[idx, 0])},{_fmt(pts[idx, 1])}")
    return "\n".join(lines) + "\n"


def write_geometry_dump(geo: GeometryMap, curve: BoundaryCurve,
                        outdir: str, prefix: str = "final") -> None:
    write_mesh_dump(geo.basis.mesh, os.path.join(outdir,
                                                 f"{prefix}_mesh.csv"))
    atomic_write_text(os.path.join(outdir, f"{prefix}_control_net.csv"),
                      control_net_csv(geo))
    atomic_write_text(os.path.join(outdir, f"{prefix}_boundary.csv"),
                      boundary_dump_csv(curve))
