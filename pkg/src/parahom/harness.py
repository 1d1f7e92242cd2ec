"""Experiment orchestration: homogenization sweeps, diagnostic batteries,
machine-readable reports.

Reports are deterministic: identical config + seed produce byte-identical
files.  Wall-clock timings are kept in memory for resource accounting but
serialized as null so they never break the byte-level contract.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .cell import effective_matrix
from .coeffs import (CoefficientField, constant_matrix_field, field_from_json,
                     preset, scale_field)
from .geometry import GraphDomain, LipschitzCylinder, ParabolicCube, ParabolicPoint
from .maximal import (lateral_norm_cylinder, lp_boundary_norm,
                      nontangential_max, nontangential_max_cylinder)
from .oracles import halfspace_kernel_cell_average, halfspace_measure
from .pde import BoundaryData, ScalarField, SpaceTimeGrid, solve_dirichlet
from .potential import (PotentialConfig, caloric_measure, caloric_measure_field,
                        doubling_ratio, green_symmetry_check,
                        green_measure_equivalence, harnack_ratio,
                        kernel_estimate, local_solvability_ratio,
                        reverse_holder_ratio)

__all__ = [
    "ExperimentConfig",
    "ConvergenceReport",
    "homogenization_experiment",
    "solvability_sweep",
    "local_solvability_at_scale",
    "q_decay_constant",
    "emit_report",
    "load_report",
    "data_from_json",
    "domain_from_json",
    "default_compact_subcylinder",
]


@dataclass
class ExperimentConfig:
    """Knobs for the homogenization experiment and the diagnostic sweep."""

    coeff: object = "laminate"
    domain: Optional[dict] = None
    data: Optional[dict] = None
    eps_list: tuple = (0.5, 0.25, 0.125, 0.0625)
    p_list: tuple = (2.0,)
    resolution: int = 128
    nt: int = 192
    cell_resolution: int = 128
    eta: float = 1.0
    n: int = 1
    seed: int = 0
    outdir: str = "."
    diagnostics: tuple = ("doubling", "rh", "localsolv", "harnack",
                          "comparison", "green-sym", "green-measure")
    r_list: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    min_cells_per_period: int = 8

    def __post_init__(self):
        self.eps_list = tuple(float(e) for e in self.eps_list)
        if any(not (0 < e <= 1) for e in self.eps_list):
            raise ValueError("eps values must lie in (0, 1]")
        self.p_list = tuple(float(p) for p in self.p_list)
        self.r_list = tuple(float(r) for r in self.r_list)

    def required_resolution(self) -> int:
        eps_min = min(self.eps_list)
        return int(np.ceil(self.min_cells_per_period / eps_min))

    @property
    def d(self) -> int:
        return self.n + 1

    @classmethod
    def from_json(cls, spec) -> "ExperimentConfig":
        if isinstance(spec, str):
            spec = json.loads(spec)
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in spec.items() if k in known})

    def to_jsonable(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


def domain_from_json(spec, d: int = 2):
    if spec is None:
        return LipschitzCylinder(base_box=((0.0, 1.0),) * d, T=1.0)
    if spec.get("kind") == "cylinder":
        return LipschitzCylinder.from_json(spec)
    if spec.get("kind") == "graph":
        return GraphDomain.from_json(spec)
    if spec.get("kind") == "halfspace":
        box = spec.get("box", [[-4.0, 4.0]] * (d - 1))
        return GraphDomain(m=0.0, box=[tuple(b) for b in box])
    raise ValueError(f"unknown domain kind {spec.get('kind')!r}")


def data_from_json(spec, d: int = 2) -> BoundaryData:
    """Boundary data from a config dict; default is a smooth ramped bump."""
    if spec is None:
        spec = {"kind": "bump"}
    kind = spec.get("kind", "bump")
    if kind == "bump":
        center = np.asarray(spec.get("center", [0.5] + [0.0] * (d - 1)), dtype=float)
        width = float(spec.get("width", 0.25))
        ramp = float(spec.get("ramp", 0.1))

        def ev(pts, t):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            k = min(pts.shape[1], center.size)
            r2 = np.sum((pts[:, :k] - center[:k]) ** 2, axis=1)
            gt = 1.0 - np.exp(-(max(t, 0.0) / ramp) ** 2)
            return gt * np.exp(-r2 / width ** 2)

        return BoundaryData(ev, classical=True, label="bump")
    if kind == "expr":
        from .coeffs import compile_expression

        fn = compile_expression(spec["expr"], d)
        ramp = float(spec.get("ramp", 0.1))

        def ev2(pts, t):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            pad = np.zeros((pts.shape[0], d))
            pad[:, :pts.shape[1]] = pts
            gt = 1.0 - np.exp(-(max(t, 0.0) / ramp) ** 2)
            return gt * fn(pad)

        return BoundaryData(ev2, classical=True, label=f"expr({spec['expr']})")
    raise ValueError(f"unknown data kind {kind!r}")


def default_compact_subcylinder(dom: LipschitzCylinder):
    """Interior compact K: parabolic margin 1/4 of the domain diameter from
    the lateral boundary, and t >= T/4."""
    widths = [hi - lo for lo, hi in dom.base_box]
    from .geometry import parabolic_norm

    diam = float(parabolic_norm(np.asarray(widths, dtype=float), dom.T))
    margin = min(0.25 * diam, 0.45 * min(widths))
    box = tuple((lo + margin, hi - margin) for lo, hi in dom.base_box)
    return box, dom.T / 4.0


@dataclass
class ConvergenceReport:
    """Rows of the homogenization sweep, sorted by eps descending."""

    rows: list
    Abar: list
    compact_K: dict
    monotone_verdict: bool
    config: dict
    version: str = __version__

    def to_jsonable(self) -> dict:
        rows = []
        for r in self.rows:
            r = dict(r)
            r["runtime"] = None       # volatile; excluded from canonical bytes
            rows.append(r)
        return {"kind": "convergence_report", "version": self.version,
                "config": self.config, "Abar": self.Abar,
                "compact_K": self.compact_K, "rows": rows,
                "monotone_verdict": self.monotone_verdict}


def _cylinder_data_norm(f: BoundaryData, dom: LipschitzCylinder,
                        grid: SpaceTimeGrid, p: float) -> float:
    total = 0.0
    d = grid.d
    for axis in range(d):
        for side in (0, 1):
            tang_axes = [k for k in range(d) if k != axis]
            axes = [grid.axis_centers(k) for k in tang_axes]
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([mm.reshape(-1) for mm in mesh], axis=-1)
            full = np.empty((pts.shape[0], d))
            full[:, tang_axes] = pts
            full[:, axis] = dom.base_box[axis][side]
            w = float(np.prod([grid.h[k] for k in tang_axes]))
            for t in grid.times():
                vals = np.abs(np.asarray(f(full, t), dtype=float))
                total += float(np.sum(vals ** p)) * w * grid.dt
    return total ** (1.0 / p)


def homogenization_experiment(cfg: ExperimentConfig) -> ConvergenceReport:
    """Oscillating solves against the effective limit on a Lipschitz cylinder.

    For each eps the Dirichlet problem with coefficients A(X/eps) is solved
    on the same grid as the effective problem (cancelling discretization
    bias), the sup distance is measured on the compact interior K, and the
    lateral maximal-function norm ratio is recorded.
    """
    if cfg.resolution < cfg.required_resolution():
        raise ValueError(
            f"resolution {cfg.resolution} cannot resolve eps="
            f"{min(cfg.eps_list)}: need at least {cfg.required_resolution()} "
            f"cells per axis ({cfg.min_cells_per_period} per period)")
    d = cfg.d
    A = field_from_json(cfg.coeff, d=d)
    dom = domain_from_json(cfg.domain, d=d)
    if not isinstance(dom, LipschitzCylinder):
        raise ValueError("the homogenization experiment runs on cylinders")
    f = data_from_json(cfg.data, d=d)
    grid = SpaceTimeGrid(tuple(lo for lo, _ in dom.base_box),
                         tuple(hi for _, hi in dom.base_box),
                         (cfg.resolution,) * d, 0.0, dom.T, cfg.nt)

    em = effective_matrix(A, cfg.cell_resolution)
    Abar_field = constant_matrix_field(em.Abar, label="Abar")

    t0 = time.perf_counter()
    ubar = solve_dirichlet(Abar_field, dom, f, grid)
    runtime_bar = time.perf_counter() - t0

    K_box, K_t = default_compact_subcylinder(dom)
    sel = []
    for k in range(d):
        c = grid.axis_centers(k)
        sel.append((c >= K_box[k][0]) & (c <= K_box[k][1]))
    times = grid.times()
    sel_t = times >= K_t

    def restrict(u):
        v = u.values
        v = np.compress(sel_t, v, axis=0)
        for k in range(d):
            v = np.compress(sel[k], v, axis=1 + k)
        return v

    ubar_K = restrict(ubar)
    p = cfg.p_list[0]
    f_norm = _cylinder_data_norm(f, dom, grid, p)

    rows = []
    for eps in sorted(cfg.eps_list, reverse=True):
        t0 = time.perf_counter()
        Aeps = scale_field(A, eps)
        ueps = solve_dirichlet(Aeps, dom, f, grid)
        nfields = nontangential_max_cylinder(ueps, cfg.eta, dom)
        n_norm = lateral_norm_cylinder(nfields, p)
        dist = float(np.abs(restrict(ueps) - ubar_K).max())
        rows.append({"eps": eps, "distance": dist,
                     "nt_norm": n_norm, "nt_ratio": n_norm / f_norm,
                     "distance_over_eps": dist / eps,
                     "runtime": time.perf_counter() - t0})
    last = [r["distance"] for r in rows[-3:]]
    verdict = all(a > b for a, b in zip(last, last[1:]))
    return ConvergenceReport(
        rows=rows,
        Abar=[[float(v) for v in row] for row in em.Abar],
        compact_K={"box": [list(b) for b in K_box], "t_min": K_t,
                   "margin_rule": "parabolic distance >= diam/4, t >= T/4"},
        monotone_verdict=bool(verdict),
        config=cfg.to_jsonable())


# ----------------------------------------------------------------------
# diagnostic sweep


@dataclass
class SweepReport:
    rows: list
    config: dict
    version: str = __version__

    def to_jsonable(self) -> dict:
        rows = []
        for r in self.rows:
            r = dict(r)
            r["runtime"] = None
            rows.append(r)
        return {"kind": "sweep_report", "version": self.version,
                "config": self.config, "rows": rows}

    @property
    def all_passed(self) -> bool:
        return all(r.get("passed", True) for r in self.rows)


def _row(check, coeff, domain, params, value, error_bar=None, passed=True,
         watermark=False, runtime=0.0):
    return {"check": check, "coeff": coeff, "domain": domain,
            "params": json.dumps(params, sort_keys=True), "value": value,
            "error_bar": error_bar, "passed": bool(passed),
            "watermark": bool(watermark), "runtime": runtime}


def solvability_sweep(cfg: ExperimentConfig,
                      pot_cfg: PotentialConfig = None) -> SweepReport:
    """Diagnostic battery over half-space and graph-chart configurations.

    Constant-coefficient rows are checked against the method-of-images
    closed forms (5% tolerance); periodic-preset rows check uniformity of
    the local-solvability ratio across scales (factor 2); inadmissible
    poles are included once, watermarked, to exercise the interface.
    """
    pot_cfg = pot_cfg or PotentialConfig()
    rows = []
    d = cfg.d
    halfspace_dom = GraphDomain(m=0.0, box=((-64.0, 64.0),) * (d - 1))

    # --- constant coefficients vs the images oracle
    A1 = preset("constant", d=d)
    pole = ParabolicPoint(np.asarray([0.0] * (d - 1) + [1.0]), 5.0)
    cube = ParabolicCube(np.zeros(d - 1), 0.0, 0.5)
    t0 = time.perf_counter()
    est = caloric_measure(A1, halfspace_dom, pole, cube, pot_cfg)
    oracle = halfspace_measure(pole.X[:-1], pole.X[-1], pole.t,
                               cube.center_x, cube.center_t, cube.side)
    rel = abs(est.value - oracle) / oracle
    rows.append(_row("caloric-measure-oracle", A1.label, "halfspace",
                     {"r": cube.side}, rel, est.smoothing_error,
                     rel <= 0.05, runtime=time.perf_counter() - t0))

    t0 = time.perf_counter()
    dres = doubling_ratio(A1, halfspace_dom, pole, cube, pot_cfg)
    o_r = halfspace_measure(pole.X[:-1], pole.X[-1], pole.t, cube.center_x,
                            cube.center_t, cube.side)
    o_2r = halfspace_measure(pole.X[:-1], pole.X[-1], pole.t, cube.center_x,
                             cube.center_t, 2 * cube.side)
    rel = abs(dres.ratio - o_2r / o_r) / (o_2r / o_r)
    rows.append(_row("doubling-oracle", A1.label, "halfspace",
                     {"r": cube.side}, rel, None, rel <= 0.05,
                     runtime=time.perf_counter() - t0))

    t0 = time.perf_counter()
    K = kernel_estimate(A1, halfspace_dom, pole, cube, depth=2, cfg=pot_cfg)
    rh = reverse_holder_ratio(K, q=2.0)
    K_or = np.empty_like(K.K)
    for i, tc in enumerate(K.centers_t):
        for j, xc in enumerate(K.centers_x[:, 0]):
            K_or[i, j] = halfspace_kernel_cell_average(
                pole.X[:-1], pole.X[-1], pole.t, [xc], tc,
                cube.side / K.K.shape[1])
    rh_or = float(np.mean(K_or ** 2) ** 0.5 / np.mean(K_or))
    rel = abs(rh.ratio - rh_or) / rh_or
    rows.append(_row("rh-oracle", A1.label, "halfspace", {"q": 2.0}, rel,
                     float(K.error_bar.max()), rel <= 0.05,
                     runtime=time.perf_counter() - t0))

    # watermark row: pole deliberately outside the admissibility window
    import warnings as _warnings

    near_pole = ParabolicPoint(np.asarray([0.0] * (d - 1) + [1.0]), 0.6)
    t0 = time.perf_counter()
    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")
        K_bad = kernel_estimate(A1, halfspace_dom, near_pole, cube, depth=1,
                                cfg=pot_cfg)
        rh_bad = reverse_holder_ratio(K_bad, q=2.0)
    rows.append(_row("rh-inadmissible", A1.label, "halfspace",
                     {"q": 2.0, "tau": near_pole.t}, rh_bad.ratio, None,
                     True, watermark=rh_bad.watermark,
                     runtime=time.perf_counter() - t0))

    # --- local solvability uniformity across scales for periodic presets
    for preset_name in ("trig",):
        A = preset(preset_name, d=d)
        values = []
        t0 = time.perf_counter()
        for r in cfg.r_list:
            res = local_solvability_at_scale(A, r, pot_cfg)
            values.append(res.ratio)
            rows.append(_row("localsolv", A.label, "halfspace", {"r": r},
                             res.ratio, None, True,
                             runtime=time.perf_counter() - t0))
            t0 = time.perf_counter()
        vmax, vmin = max(values), min(values)
        rows.append(_row("localsolv-uniformity", A.label, "halfspace",
                         {"r_list": list(cfg.r_list)}, vmax / vmin, None,
                         vmax / vmin <= 2.0))

    # --- graph-chart configuration (flattening path)
    graph = GraphDomain(m=0.5, box=((-48.0, 48.0),),
                        phi=lambda x: 0.5 * np.abs(np.sin(np.asarray(x)[..., 0])) - 0.25)
    t0 = time.perf_counter()
    est_g = caloric_measure(A1, graph, pole, cube, pot_cfg)
    rows.append(_row("caloric-measure", A1.label, "graph", {"m": 0.5},
                     est_g.value, est_g.smoothing_error,
                     0.0 <= est_g.value <= 1.0 + 1e-6,
                     runtime=time.perf_counter() - t0))
    return SweepReport(rows=rows, config=cfg.to_jsonable())


def q_decay_constant(A: CoefficientField, R_cells: int, period: float = 1.0,
                     cells_per_period: int = 8, steps: int = 160) -> dict:
    """Normalized vertical-difference decay constant at window scale R.

    A Green-like field is generated on the box {|x| < 2R, 0 < lam < 4R}
    (zero lateral data, unit impulse at (0, 3R) released at t = -2R^2) and
    the shifted difference Qu(., lam) = u(., lam + period) - u is measured
    where lam >= R inside the half-height window over (0, 4R^2):

        C(R) = R * sup |Qu| / (R^{-(n+3)} int_{lower window} u^2)^{1/2}.

    Boundedness of C(R) across R is the decay property under test; R is
    given in grid cells (cells_per_period cells resolve one period of A).
    """
    from .pde import SpaceTimeGrid, q_difference, solve_impulse

    h = period / cells_per_period
    R = R_cells * h
    nx = int(round(4 * R / h))
    nlam = int(round(4 * R / h))
    grid = SpaceTimeGrid((-2 * R, 0.0), (2 * R, 4 * R), (nx, nlam),
                         -2 * R * R, 8 * R * R, steps)
    dom = GraphDomain(m=0.0, box=((-2 * R, 2 * R),))
    u = solve_impulse(A, dom, np.asarray([0.0, 3 * R]), -2 * R * R, grid)
    qu = q_difference(u, period)

    times = grid.times()
    lamc = grid.axis_centers(1)
    xc = grid.axis_centers(0)
    sel_t4 = (times > 0) & (times <= 4 * R * R)
    sel_sup = (lamc[:qu.grid.shape[-1]] >= R) & (lamc[:qu.grid.shape[-1]] < 2 * R)
    sup_q = float(np.abs(np.compress(sel_t4, qu.values, axis=0)
                         [:, :, sel_sup]).max())

    sel_t8 = (times > 0) & (times <= 8 * R * R)
    sel_m = lamc < 3 * R
    v = np.compress(sel_t8, u.values, axis=0)[:, :, sel_m]
    mass = float(np.sum(v * v) * grid.cell_volume * grid.dt)
    n = grid.d - 1
    denom = np.sqrt(mass / R ** (n + 3))
    return {"R_cells": R_cells, "R": R, "sup_Q": sup_q, "mass": mass,
            "constant": R * sup_q / denom}


def local_solvability_at_scale(A: CoefficientField, r: float,
                                pot_cfg: PotentialConfig,
                                data_offset: float = 5.5):
    """Solve one vanishing-trace configuration and return its ratio.

    The solution is the caloric measure of a cube placed outside Q_4r, so
    the trace vanishes on the 4x cube while mass flows over T_4r.
    """
    h = min(r / 8.0, 0.25)
    dt = r * r / 12.0
    lo = (-6.0 * r,)
    hi = (max(8.0 * r, data_offset * r + 2.5 * r),)
    height = 6.0 * r
    t_lo = -17.0 * r * r - 2.0 * dt
    t_hi = 16.5 * r * r
    shape = (int(np.ceil((hi[0] - lo[0]) / h)), int(np.ceil(height / h)))
    nt = int(np.ceil((t_hi - t_lo) / dt))
    grid = SpaceTimeGrid(lo + (0.0,), hi + (height,), shape, t_lo, t_hi, nt)
    dom = GraphDomain(m=0.0, box=((lo[0], hi[0]),))
    data_cube = ParabolicCube(np.asarray([data_offset * r]), -16.0 * r * r, r)
    u = caloric_measure_field(A, dom, data_cube, grid)
    return local_solvability_ratio(u, ParabolicCube(np.zeros(1), 0.0, r))


# ----------------------------------------------------------------------
# serialization


def _jsonable(obj):
    if isinstance(obj, (ConvergenceReport, SweepReport)):
        return obj.to_jsonable()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def emit_report(report, fmt: str = "json", outdir: str = ".",
                name: str = "report") -> list:
    """Serialize a report deterministically; returns the written paths.

    json: canonical sorted-key JSON.  csv: one row per sweep/convergence
    entry.  Both formats also get a gnuplot-ready .dat column file when the
    report carries numeric rows.
    """
    import os

    payload = _jsonable(report)
    os.makedirs(outdir, exist_ok=True)
    paths = []
    if fmt == "json":
        path = os.path.join(outdir, f"{name}.json")
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
        paths.append(path)
    elif fmt == "csv":
        path = os.path.join(outdir, f"{name}.csv")
        rows = payload.get("rows", [])
        buf = io.StringIO()
        if rows:
            keys = sorted(rows[0].keys())
            writer = csv.DictWriter(buf, fieldnames=keys)
            writer.writeheader()
            for r in rows:
                writer.writerow({k: _csv_cell(r.get(k)) for k in keys})
        else:
            buf.write("# empty report\n")
        buf.write(f"# config: {json.dumps(payload.get('config', {}), sort_keys=True)}\n")
        buf.write(f"# version: {payload.get('version', '')}\n")
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())
        paths.append(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")

    rows = payload.get("rows", [])
    numeric_keys = []
    if rows:
        numeric_keys = [k for k in sorted(rows[0].keys())
                        if isinstance(rows[0][k], (int, float))
                        and rows[0][k] is not None]
    if numeric_keys:
        dat = os.path.join(outdir, f"{name}.dat")
        with open(dat, "w") as fh:
            fh.write("# " + " ".join(numeric_keys) + "\n")
            for r in rows:
                fh.write(" ".join(_csv_cell(r.get(k, "nan"))
                                  for k in numeric_keys) + "\n")
        paths.append(dat)
    return paths


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_report(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)
