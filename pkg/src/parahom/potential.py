"""Caloric measure, kernel densities, Green functions and the quantitative
diagnostic battery: doubling, reverse Holder, local solvability, Harnack,
comparison, Green-measure equivalence, positivity floors.

Conventions.  The Green field is propagated forward from a discrete unit
impulse at the pole time; the adjoint field is obtained by reversing time
in the inputs (the coefficients are time-independent and symmetric, so one
solver serves both).  Measures are computed by solving with a mollified
indicator (width one grid cell) as lateral data and reading the solution
at the pole; halving the mollification bounds the smoothing error.
Admissibility windows are enforced as preconditions with explicit margins;
inadmissible exploratory runs are allowed but watermarked in the results.

Empirical constants are never asserted against book values; callers check
uniformity and stability instead.

Every diagnostic owns its solves; diagnostics over different poles or
cubes can run concurrently since all shared inputs are immutable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .coeffs import CoefficientField
from .geometry import GraphDomain, ParabolicCube, ParabolicPoint, parabolic_norm
from .pde import (BoundaryData, ScalarField, SpaceTimeGrid, graded_axis,
                  nt_trace_ratio, solve_dirichlet_multi, solve_impulse,
                  solve_probe_final)

__all__ = [
    "PotentialConfig",
    "MeasureEstimate",
    "KernelEstimate",
    "GreenField",
    "caloric_measure",
    "caloric_measure_field",
    "kernel_estimate",
    "greens_function",
    "green_symmetry_check",
    "doubling_ratio",
    "reverse_holder_ratio",
    "local_solvability_ratio",
    "harnack_ratio",
    "comparison_ratio",
    "green_measure_equivalence",
    "measure_positivity_floor",
    "MeasureBelowNoiseError",
]


class MeasureBelowNoiseError(RuntimeError):
    """A measure value sits below the configured noise floor."""


@dataclass(frozen=True)
class PotentialConfig:
    """Resolution and admissibility knobs shared by the diagnostics.

    margin_mult multiplies the parabolic diameter of the active
    configuration (data support, pole, elapsed time) to size the truncation
    margin of the half-space box; region_A is the free constant in the
    Green-measure region condition |(x0,0) - (x,lam)|^2 <= region_A |t - t0|.
    """

    cells_per_r: float = 16.0
    steps_per_r2: float = 24.0
    margin_mult: float = 4.0
    mollify_halving: bool = True
    truncation_check: bool = False
    region_A: float = 1.0
    noise_floor: float = 1e-8
    max_cells_per_axis: int = 768


DEFAULT_CONFIG = PotentialConfig()


# ----------------------------------------------------------------------
# mollified cube data


def _edge_profile(s, edge, w, rising: bool):
    if rising:
        return np.clip((s - edge) / w + 0.5, 0.0, 1.0)
    return np.clip((edge - s) / w + 0.5, 0.0, 1.0)


def _interval_profile(s, a, b, w):
    return _edge_profile(s, a, w, True) * _edge_profile(s, b, w, False)


def _cube_column(cube: ParabolicCube, w_x, w_t):
    """Mollified-indicator evaluator (points, t) -> values for one cube."""
    def fn(pts, t):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        val = np.ones(pts.shape[0])
        for k in range(cube.center_x.size):
            a = cube.center_x[k] - cube.side
            b = cube.center_x[k] + cube.side
            val = val * _interval_profile(pts[:, k], a, b, w_x)
        tt = _interval_profile(np.asarray([t]), cube.center_t - cube.side ** 2,
                               cube.center_t + cube.side ** 2, w_t)[0]
        return val * tt
    return fn


def _partition_edges(a, b, m):
    return np.linspace(a, b, m + 1)


def _partition_profiles(s, edges, w):
    """Tent partition over the sub-intervals of `edges`; columns sum to the
    outer mollified indicator exactly (shared internal ramps telescope)."""
    m = len(edges) - 1
    out = np.empty((len(s), m))
    for i in range(m):
        out[:, i] = _edge_profile(s, edges[i], w, True) \
            * _edge_profile(s, edges[i + 1], w, False)
    return out


# ----------------------------------------------------------------------
# grid construction


def _config_diameter(cube: ParabolicCube, pole: ParabolicPoint,
                     t_start: float) -> float:
    """Parabolic diameter of the active configuration."""
    pts = []
    r = cube.side
    for sx in (-1.0, 1.0):
        for st in (-1.0, 1.0):
            pts.append((cube.center_x + sx * r, 0.0, cube.center_t + st * r * r))
    pts.append((pole.X[:-1], pole.X[-1], pole.t))
    pts.append((cube.center_x, 0.0, t_start))
    diam = 0.0
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            dx = np.append(np.atleast_1d(pts[i][0]) - np.atleast_1d(pts[j][0]),
                           pts[i][1] - pts[j][1])
            diam = max(diam, float(parabolic_norm(dx, pts[i][2] - pts[j][2])))
    return diam


def _measure_grid(pole: ParabolicPoint, cube: ParabolicCube,
                  cfg: PotentialConfig) -> SpaceTimeGrid:
    """Graded half-space grid: fine cells over the cube and around the pole,
    geometric coarsening across gaps and the truncation margin."""
    from .pde import composite_axis

    r = cube.side
    n = cube.center_x.size
    h = r / cfg.cells_per_r
    dt = r * r / cfg.steps_per_r2
    t_start = min(cube.center_t - r * r, pole.t) - 2 * dt
    margin = cfg.margin_mult * _config_diameter(cube, pole, t_start)
    faces = []
    for k in range(n):
        segs = [(cube.center_x[k] - 1.5 * r, cube.center_x[k] + 1.5 * r, h)]
        segs.append((pole.X[k] - r, pole.X[k] + r, h))
        lo = min(s[0] for s in segs) - margin
        hi = max(s[1] for s in segs) + margin
        faces.append(composite_axis(segs, lo, hi))
    lam_segs = [(0.0, 2.0 * r, h), (max(0.0, pole.X[-1] - r),
                                    pole.X[-1] + r, h)]
    faces.append(composite_axis(lam_segs, 0.0, pole.X[-1] + r + margin))
    nt = max(8, min(1024, int(np.ceil((pole.t - t_start) / dt))))
    return SpaceTimeGrid.from_faces(faces, t_start, pole.t, nt)


def _require_pole_clearance(grid: SpaceTimeGrid, pole: ParabolicPoint,
                            cells: int = 4):
    for k in range(grid.d):
        f = grid.axis_faces(k)
        below = int(np.searchsorted(f, pole.X[k]))
        if below < cells or f.size - 1 - below < cells:
            what = "boundary" if k == grid.d - 1 else "truncation face"
            raise ValueError(
                f"pole coordinate {pole.X[k]:.4g} on axis {k} is within "
                f"{cells} cells of the {what}")


# ----------------------------------------------------------------------
# caloric measure


@dataclass(frozen=True)
class MeasureEstimate:
    """omega^{pole}(cube) with smoothing / truncation error bounds."""

    value: float
    pole: ParabolicPoint
    cube: ParabolicCube
    smoothing_error: Optional[float] = None
    truncation_error: Optional[float] = None
    flags: tuple = ()


def _bottom_key(grid: SpaceTimeGrid):
    return (grid.d - 1, 0)


def _bottom_points(grid: SpaceTimeGrid) -> np.ndarray:
    axes = [grid.axis_centers(k) for k in range(grid.d - 1)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([mm.reshape(-1) for mm in mesh], axis=-1)


def caloric_measure(A: CoefficientField, dom: GraphDomain,
                    pole: ParabolicPoint, cube: ParabolicCube,
                    cfg: PotentialConfig = DEFAULT_CONFIG) -> MeasureEstimate:
    """Measure of a boundary cube seen from an interior pole.

    Solves with the mollified indicator of the cube as lateral data and
    evaluates at the pole; a second column at half mollification brings a
    smoothing-error bound, and an optional margin-doubled re-solve bounds
    the truncation error.
    """
    r = cube.side
    if cube.center_t - r * r >= pole.t:
        return MeasureEstimate(0.0, pole, cube, 0.0, 0.0, ("causal-zero",))
    grid = _measure_grid(pole, cube, cfg)
    _require_pole_clearance(grid, pole)
    value, smooth = _measure_values(A, dom, grid, cube, [pole], cfg)
    flags = []
    trunc = None
    if cfg.truncation_check:
        big = PotentialConfig(**{**cfg.__dict__, "margin_mult": 2 * cfg.margin_mult,
                                 "truncation_check": False})
        grid2 = _measure_grid(pole, cube, big)
        v2, _ = _measure_values(A, dom, grid2, cube, [pole], big)
        trunc = abs(value[0] - v2[0])
    return MeasureEstimate(float(value[0]), pole, cube,
                           float(smooth[0]) if smooth is not None else None,
                           trunc, tuple(flags))


def _fine_spacing(grid: SpaceTimeGrid) -> float:
    return float(min(grid.axis_spacings(k).min() for k in range(grid.d - 1)))


def _measure_values(A, dom, grid, cube, probes, cfg):
    """Pole values of the measure solve; returns (values, smoothing_errs)."""
    pts = _bottom_points(grid)
    w_x = _fine_spacing(grid)
    w_t = grid.dt
    col = _cube_column(cube, w_x, w_t)
    cols = [col]
    if cfg.mollify_halving:
        cols.append(_cube_column(cube, 0.5 * w_x, 0.5 * w_t))

    def data(t):
        return np.stack([c(pts, t) for c in cols], axis=1)

    probe_pts = [p.X for p in probes]
    t_end = cube.center_t + cube.side ** 2 + 2 * grid.dt
    out = solve_probe_final(A, dom, {_bottom_key(grid): data}, grid,
                            probe_pts, t_end)
    vals = out[:, 0]
    smooth = np.abs(out[:, 1] - vals) if len(cols) == 2 else None
    return vals, smooth


def caloric_measure_field(A: CoefficientField, dom: GraphDomain,
                          cube: ParabolicCube, grid: SpaceTimeGrid,
                          mollify: float = 1.0) -> ScalarField:
    """Full space-time field u(X, t) = omega^{(X, t)}(cube) on a given grid."""
    pts = _bottom_points(grid)
    col = _cube_column(cube, mollify * _fine_spacing(grid), mollify * grid.dt)

    def data(t):
        return col(pts, t)[:, None]

    out = solve_dirichlet_multi(A, dom, {_bottom_key(grid): data}, grid)
    values = out[:, :, 0].reshape((grid.nt + 1,) + grid.shape)
    bottom = np.empty((grid.nt + 1, pts.shape[0]))
    for k, t in enumerate(grid.times()):
        bottom[k] = col(pts, t)
    meta = {"coeff": A.label, "measure_cube": (tuple(cube.center_x),
                                               cube.center_t, cube.side),
            "bottom_data": bottom}
    return ScalarField(grid, values, meta)


# ----------------------------------------------------------------------
# kernel density


@dataclass(frozen=True)
class KernelEstimate:
    """Per-cell densities K_i = omega(Q_i)/|Q_i| on a partition of a cube."""

    pole: ParabolicPoint
    cube: ParabolicCube
    depth: int
    centers_x: np.ndarray          # (mx, n) tangential centers
    centers_t: np.ndarray          # (mt,)
    K: np.ndarray                  # (mt, mx)
    masses: np.ndarray             # omega(Q_i), same shape as K
    cell_volume: float
    error_bar: np.ndarray          # coarse-fine gap per cell
    omega_total: float
    mass_consistency: float        # |sum omega_i - omega(cube)|
    method: str = "measure-ratio"

    def mean(self, q: float = 1.0) -> float:
        return float(np.mean(np.abs(self.K) ** q) ** (1.0 / q))


def kernel_estimate(A: CoefficientField, dom: GraphDomain,
                    pole: ParabolicPoint, cube: ParabolicCube,
                    depth: int = 2, method: str = "measure-ratio",
                    cfg: PotentialConfig = DEFAULT_CONFIG) -> KernelEstimate:
    """Partitioned estimate of the boundary kernel density on a cube.

    method "measure-ratio" (the defining limit): the cube is split into
    2^depth parabolic sub-cubes per tangential axis and 4^depth time slabs;
    all sub-cube measures come from one batched march (shared
    factorization), their tent-mollified indicators summing exactly to the
    mollified indicator of the whole cube.  The coarse (depth-1) densities
    aggregated from the same solve give per-cell error bars; the fine
    densities are the estimate.

    method "trace": one forward Green solve with the pole at time zero;
    time reversal and symmetry turn its boundary-layer trace G/lam (with
    the second-layer Richardson correction) into the kernel at each
    sub-cell center.  Independent route, useful as a cross-check.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    n = cube.center_x.size
    if n != 1:
        raise NotImplementedError("kernel partitions are implemented for n = 1")
    if method == "trace":
        return _kernel_by_trace(A, dom, pole, cube, depth, cfg)
    if method != "measure-ratio":
        raise ValueError(f"unknown kernel method {method!r}")
    r = cube.side
    grid = _measure_grid(pole, cube, cfg)
    _require_pole_clearance(grid, pole)

    mx, mt = 2 ** depth, 4 ** depth
    ex = _partition_edges(cube.center_x[0] - r, cube.center_x[0] + r, mx)
    et = _partition_edges(cube.center_t - r * r, cube.center_t + r * r, mt)
    w_x = _fine_spacing(grid)
    w_t = grid.dt
    pts = _bottom_points(grid)
    px = _partition_profiles(pts[:, 0], ex, w_x)      # (mpts, mx)

    full_col = _cube_column(cube, w_x, w_t)

    def data(t):
        pt = _partition_profiles(np.asarray([t]), et, w_t)[0]   # (mt,)
        cols = px[:, None, :] * pt[:, None]                      # (mpts, mt, mx)
        cols = cols.reshape(pts.shape[0], mt * mx)
        return np.concatenate([cols, full_col(pts, t)[:, None]], axis=1)

    t_end = cube.center_t + r * r + 2 * grid.dt
    out = solve_probe_final(A, dom, {_bottom_key(grid): data}, grid,
                            [pole.X], t_end)
    vals = out[0, :]
    omega_total = float(vals[-1])
    masses = vals[:-1].reshape(mt, mx)
    sub_vol = (2 * r / mx) * 2 * (r ** 2 / mt) * 2 ** (n - 1)
    K = masses / sub_vol

    # coarse parents from the same masses
    Kc = masses.reshape(mt // 4, 4, mx // 2, 2).sum(axis=(1, 3)) / (8 * sub_vol)
    err = np.abs(K - np.repeat(np.repeat(Kc, 4, axis=0), 2, axis=1))

    centers_x = 0.5 * (ex[:-1] + ex[1:])[:, None]
    centers_t = 0.5 * (et[:-1] + et[1:])
    consistency = abs(float(masses.sum()) - omega_total)
    return KernelEstimate(pole, cube, depth, centers_x, centers_t, K, masses,
                          sub_vol, err, omega_total, consistency)


def _kernel_by_trace(A, dom, pole, cube, depth, cfg):
    """Kernel from the boundary trace of one time-reversed Green field.

    With time-independent symmetric coefficients, G(Z, tau; x, t, lam)
    equals the forward Green field from pole Z at elapsed time tau - t, so
    a single impulse solve gives K over the whole cube partition.
    """
    r = cube.side
    mx, mt = 2 ** depth, 4 ** depth
    ex = _partition_edges(cube.center_x[0] - r, cube.center_x[0] + r, mx)
    et = _partition_edges(cube.center_t - r * r, cube.center_t + r * r, mt)
    cx = 0.5 * (ex[:-1] + ex[1:])
    ct = 0.5 * (et[:-1] + et[1:])
    horizon = pole.t - (cube.center_t - r * r)
    zero_pole = ParabolicPoint(pole.X, 0.0)
    corners = [np.append(x, 0.0) for x in
               (cube.center_x - r, cube.center_x + r)]
    G = greens_function(A, dom, zero_pole, horizon * 1.02,
                        extra_pts=corners, cfg=cfg)
    lamc = G.field.grid.axis_centers(G.field.grid.d - 1)
    lam1, lam2 = float(lamc[0]), float(lamc[1])
    interp = G.field.interpolator()
    K = np.empty((mt, mx))
    for i, tc in enumerate(ct):
        s = pole.t - tc            # elapsed time in the reversed frame
        pts1 = np.column_stack([np.full(mx, s), cx, np.full(mx, lam1)])
        pts2 = np.column_stack([np.full(mx, s), cx, np.full(mx, lam2)])
        r1 = interp(pts1) / lam1
        r2 = interp(pts2) / lam2
        K[i] = r1 - lam1 * (r2 - r1) / (lam2 - lam1)
    K = np.maximum(K, 0.0)
    sub_vol = (2 * r / mx) * 2 * (r ** 2 / mt)
    masses = K * sub_vol
    omega_total = float(masses.sum())
    return KernelEstimate(pole, cube, depth, cx[:, None], ct, K, masses,
                          sub_vol, np.zeros_like(K), omega_total, 0.0,
                          method="trace")


# ----------------------------------------------------------------------
# Green functions


@dataclass(frozen=True)
class GreenField:
    """Forward Green field with pole (Z, tau); zero before the pole time."""

    pole: ParabolicPoint
    field: ScalarField
    delta_cells: int = 1

    def value_at(self, X, t) -> float:
        if t < self.pole.t:
            return 0.0
        return self.field.value_at(X, t)


def _green_grid(pole: ParabolicPoint, horizon: float, extra_pts,
                cfg: PotentialConfig) -> SpaceTimeGrid:
    """Graded grid sized by the diffusion scale sqrt(horizon).

    The core axes are aligned so the pole lands exactly on a cell center:
    the discrete impulse then carries no placement offset.
    """
    scale = np.sqrt(horizon)
    h = scale / cfg.cells_per_r
    dt = horizon / (cfg.steps_per_r2 * 4)
    margin = cfg.margin_mult * scale
    xs = [pole.X] + [np.asarray(p, dtype=float) for p in extra_pts]
    n = pole.X.size - 1
    faces = []
    for k in range(n):
        vals = [p[k] for p in xs]
        core_lo, core_hi = min(vals) - scale, max(vals) + scale
        core_lo += (((pole.X[k] - core_lo) / h) % 1.0 - 0.5) * h
        core_hi = core_lo + np.ceil((core_hi - core_lo) / h) * h
        faces.append(graded_axis(core_lo, core_hi, h,
                                 core_lo - margin, core_hi + margin))
    lam_core = max(p[-1] for p in xs) + scale
    m_lam = max(1, int(round(pole.X[-1] / h - 0.5)))
    h_lam = pole.X[-1] / (m_lam + 0.5)
    lam_core = np.ceil(lam_core / h_lam) * h_lam
    faces.append(graded_axis(0.0, lam_core, h_lam, 0.0, lam_core + margin))
    nt = max(16, int(np.ceil(horizon / dt)))
    return SpaceTimeGrid.from_faces(faces, pole.t, pole.t + horizon, nt)


def greens_function(A: CoefficientField, dom: GraphDomain,
                    pole: ParabolicPoint, horizon: float,
                    grid: Optional[SpaceTimeGrid] = None,
                    extra_pts: Sequence = (),
                    mollify_cells: int = 1,
                    cfg: PotentialConfig = DEFAULT_CONFIG) -> GreenField:
    """Green function by forward propagation of a discrete unit impulse."""
    if grid is None:
        grid = _green_grid(pole, horizon, extra_pts, cfg)
    if pole.X[-1] <= 0:
        raise ValueError("pole must lie strictly inside the half space")
    _require_pole_clearance(grid, pole, cells=2)
    f = solve_impulse(A, dom, pole.X, pole.t, grid,
                      mollify_cells=mollify_cells)
    return GreenField(pole, f, mollify_cells)


@dataclass(frozen=True)
class GreenSymmetryResult:
    deviation: float
    g_direct: float
    g_swapped: float
    shift: float


def green_symmetry_check(A: CoefficientField, dom: GraphDomain,
                         pole: ParabolicPoint, point: ParabolicPoint,
                         shift: float = 0.0,
                         cfg: PotentialConfig = DEFAULT_CONFIG
                         ) -> GreenSymmetryResult:
    """Space-symmetry / time-invariance deviation of the Green function.

    Compares G(X, t; Z, tau) against G(Z, t + t0; X, tau + t0): the first
    field has pole (Z, tau) and is read at (X, t); the second has pole
    (X, tau + t0) and is read at (Z, t + t0).
    """
    if point.t <= pole.t:
        raise ValueError("the evaluation time must come after the pole time")
    horizon = (point.t - pole.t) * 1.05
    g1 = greens_function(A, dom, pole, horizon, extra_pts=[point.X], cfg=cfg)
    v1 = g1.value_at(point.X, point.t)
    pole2 = ParabolicPoint(point.X, pole.t + shift)
    g2 = greens_function(A, dom, pole2, horizon, extra_pts=[pole.X], cfg=cfg)
    v2 = g2.value_at(pole.X, point.t + shift)
    dev = abs(v1 - v2) / max(abs(v1), abs(v2), 1e-300)
    return GreenSymmetryResult(dev, v1, v2, shift)


# ----------------------------------------------------------------------
# ratio diagnostics


@dataclass(frozen=True)
class DoublingResult:
    ratio: float
    omega_r: float
    omega_2r: float
    flags: tuple = ()


def doubling_ratio(A: CoefficientField, dom: GraphDomain,
                   pole: ParabolicPoint, cube: ParabolicCube,
                   cfg: PotentialConfig = DEFAULT_CONFIG) -> DoublingResult:
    """omega(Q_2r)/omega(Q_r) from one batched solve on the 2r grid."""
    cube2 = cube.scaled(2.0)
    grid = _measure_grid(pole, cube2, cfg)
    _require_pole_clearance(grid, pole)
    pts = _bottom_points(grid)
    w_x = _fine_spacing(grid)
    w_t = grid.dt
    c1 = _cube_column(cube, w_x, w_t)
    c2 = _cube_column(cube2, w_x, w_t)

    def data(t):
        return np.stack([c1(pts, t), c2(pts, t)], axis=1)

    t_end = cube2.center_t + cube2.side ** 2 + 2 * grid.dt
    out = solve_probe_final(A, dom, {_bottom_key(grid): data}, grid,
                            [pole.X], t_end)
    w_r, w_2r = float(out[0, 0]), float(out[0, 1])
    if w_r <= 10.0 * cfg.noise_floor:
        raise MeasureBelowNoiseError(
            f"omega(Q_r) = {w_r:.3e} is below 10x the noise floor")
    return DoublingResult(w_2r / w_r, w_r, w_2r)


@dataclass(frozen=True)
class ReverseHolderResult:
    ratio: float
    exponent: float
    admissible: bool
    watermark: bool


def reverse_holder_ratio(K: KernelEstimate, q: float = 2.0
                         ) -> ReverseHolderResult:
    """Power-mean over mean of the kernel density on the cube partition.

    Admissibility window: |(x0, 0) - Z|^2 <= |t0 - tau| and tau - t0 >= 4 r^2.
    Inadmissible poles are computed anyway but watermarked (with a warning),
    for exploration.
    """
    if q < 2.0:
        raise ValueError("exponent must be >= 2")
    cube, pole = K.cube, K.pole
    r = cube.side
    sep2 = float(np.sum((cube.center_x - pole.X[:-1]) ** 2) + pole.X[-1] ** 2)
    dt = pole.t - cube.center_t
    admissible = (sep2 <= abs(dt)) and (dt >= 4 * r * r)
    if not admissible:
        warnings.warn("reverse Holder pole outside the admissible window; "
                      "result watermarked", stacklevel=2)
    mean_q = float(np.mean(np.abs(K.K) ** q) ** (1.0 / q))
    mean_1 = float(np.mean(np.abs(K.K)))
    if mean_1 == 0.0:
        return ReverseHolderResult(float("nan"), q, admissible, not admissible)
    return ReverseHolderResult(mean_q / mean_1, q, admissible, not admissible)


@dataclass(frozen=True)
class LocalSolvabilityResult:
    ratio: float
    boundary_flux: float      # int_{Q_r} (limsup u/lam)^2 dx dt
    interior_mass: float      # int_{T_2r} u^2
    r: float


def local_solvability_ratio(u: ScalarField, cube: ParabolicCube
                            ) -> LocalSolvabilityResult:
    """Boundary-flux over interior-mass ratio on the scale-r cube.

    ratio = r^3 * int_{Q_r} (trace ratio)^2 dx dt / int_{T_2r} u^2, the
    quantity bounded by the local solvability constant.  Requires u to be a
    solution on T_4r vanishing on the 4x cube trace (checked through the
    recorded bottom data).
    """
    grid = u.grid
    r = cube.side
    if grid.hi[-1] < 4 * r:
        raise ValueError("grid height does not cover T_4r")
    tr = nt_trace_ratio(u, cube)     # enforces the 4x-cube trace hypothesis
    n = grid.d - 1
    wx = np.ones(1)
    for k in range(n):
        sel = np.abs(grid.axis_centers(k) - cube.center_x[k]) < r
        wx = np.multiply.outer(wx, grid.axis_spacings(k)[sel])
    wx = wx.reshape(-1)
    lhs = float(np.sum(tr.richardson ** 2 * wx[None, :]) * grid.dt)

    v = u.values
    times = grid.times()
    v = np.compress(np.abs(times - cube.center_t) < (2 * r) ** 2, v, axis=0)
    masks = []
    for k in range(n):
        masks.append(np.abs(grid.axis_centers(k) - cube.center_x[k]) < 2 * r)
    lamc = grid.axis_centers(grid.d - 1)
    masks.append((lamc > 0) & (lamc < 2 * r))
    for k in range(grid.d):
        v = np.compress(masks[k], v, axis=1 + k)
    w = grid.axis_spacings(0)[masks[0]]
    for k in range(1, grid.d):
        w = np.multiply.outer(w, grid.axis_spacings(k)[masks[k]])
    mass = float(np.sum(v * v * w[None]) * grid.dt)
    if mass == 0.0:
        return LocalSolvabilityResult(0.0, lhs, 0.0, r)
    return LocalSolvabilityResult(lhs * r ** 3 / mass, lhs, mass, r)


@dataclass(frozen=True)
class HarnackResult:
    ratio: float
    sup_value: float
    base_value: float
    interior_constant: float


def harnack_ratio(u: ScalarField, x0, t0: float, r: float,
                  pairs: int = 200, seed: int = 0) -> HarnackResult:
    """sup over T_r of u divided by the forward base value u(x0, t0+2r^2, r).

    Also runs the interior exponential-form check on the same data: the
    reported interior_constant is the largest factor needed so that
    u(y, s, sigma) <= C u(x, t, lam) exp(Q + 1) over sampled pairs with
    t > s, Q = (|x-y|^2 + |lam-sigma|^2)/(t-s) + (t-s)/R, R the usual
    distance-to-boundary minimum.
    """
    grid = u.grid
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = grid.d - 1
    times = grid.times()
    vmin = float(u.values.min())
    if vmin < -1e-12 * max(1.0, float(np.abs(u.values).max())):
        raise ValueError(f"field is not nonnegative (min {vmin:.3e})")

    def box_values(factor):
        v = u.values
        v = np.compress(np.abs(times - t0) < (factor * r) ** 2, v, axis=0)
        for k in range(n):
            c = grid.axis_centers(k)
            v = np.compress(np.abs(c - x0[k]) < factor * r, v, axis=1 + k)
        lamc = grid.axis_centers(grid.d - 1)
        v = np.compress((lamc > 0) & (lamc < factor * r), v, axis=grid.d)
        return v

    sup_val = float(box_values(1.0).max())
    base = u.value_at(np.append(x0, r), t0 + 2 * r * r)
    if base <= 0:
        raise ValueError("base value is not positive")

    # interior exponential-form monitor on random pairs inside T_4r
    rng = np.random.default_rng(seed)
    t_lo, t_hi = t0 - 16 * r * r, t0 + 16 * r * r
    t_lo = max(t_lo, times[0])
    t_hi = min(t_hi, times[-1])
    interior_c = 0.0
    interp = u.interpolator()

    def sample(count):
        pts = np.empty((count, grid.d + 1))
        for k in range(n):
            pts[:, 1 + k] = x0[k] + rng.uniform(-3.5 * r, 3.5 * r, count)
        pts[:, grid.d] = rng.uniform(0.25 * r, 3.5 * r, count)
        pts[:, 0] = rng.uniform(t_lo + 0.1 * r * r, t_hi, count)
        return pts

    a = sample(pairs)
    b = sample(pairs)
    early = np.minimum(a[:, 0], b[:, 0]) - 0.05 * r * r
    lo_pts, hi_pts = a.copy(), b.copy()
    lo_pts[:, 0] = early
    ua = interp(lo_pts)
    ub = interp(hi_pts)
    dtp = hi_pts[:, 0] - lo_pts[:, 0]
    dist_x = np.zeros(pairs)
    for k in range(n):
        dist_x += (hi_pts[:, 1 + k] - lo_pts[:, 1 + k]) ** 2
    dist_x += (hi_pts[:, grid.d] - lo_pts[:, grid.d]) ** 2
    bd = []
    for pts_ in (lo_pts, hi_pts):
        dmin = np.full(pairs, np.inf)
        for k in range(n):
            dmin = np.minimum(dmin, np.abs(pts_[:, 1 + k] - (x0[k] - 4 * r)))
            dmin = np.minimum(dmin, np.abs((x0[k] + 4 * r) - pts_[:, 1 + k]))
        dmin = np.minimum(dmin, pts_[:, grid.d])
        dmin = np.minimum(dmin, 4 * r - pts_[:, grid.d])
        bd.append(dmin)
    Rfac = np.minimum(np.minimum(bd[0] ** 2, bd[1] ** 2),
                      np.minimum(lo_pts[:, 0] - t_lo, 1.0))
    ok = (ub > 0) & (dtp > 0) & (Rfac > 0)
    if np.any(ok):
        Q = dist_x[ok] / dtp[ok] + dtp[ok] / Rfac[ok]
        needed = ua[ok] / (ub[ok] * np.exp(np.minimum(Q + 1.0, 700.0)))
        interior_c = float(needed.max())
    return HarnackResult(sup_val / base, sup_val, base, interior_c)


@dataclass(frozen=True)
class ComparisonResult:
    value: float
    numerator_base: float
    denominator_base: float


def comparison_ratio(u: ScalarField, v: ScalarField, x0, t0: float, r: float,
                     zero_tol: float = 1e-10) -> ComparisonResult:
    """Boundary comparison quotient for two nonnegative vanishing solutions.

    value = sup_{T_r} (u/v) * v(x0, t0 - 2r^2, r) / u(x0, t0 + 2r^2, r),
    bounded by the comparison constant.  Both fields must vanish on the
    2r cube trace and be nonnegative; v must clear the noise floor on T_r.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    cube2 = ParabolicCube(x0, t0, 2 * r)
    for w, name in ((u, "u"), (v, "v")):
        if float(w.values.min()) < -1e-12 * max(1.0, float(np.abs(w.values).max())):
            raise ValueError(f"{name} is not nonnegative")
        bd = w.meta.get("bottom_data")
        if bd is None:
            raise ValueError(f"{name} has no recorded boundary trace")
        grid = w.grid
        tang = _bottom_points(grid)
        inside = cube2.contains_xt(tang, grid.times()[:, None])
        if np.abs(bd[inside]).max(initial=0.0) > zero_tol:
            raise ValueError(f"{name} does not vanish on the 2r cube")

    grid = u.grid
    n = grid.d - 1
    times = grid.times()

    def restrict(w):
        z = w.values
        z = np.compress(np.abs(times - t0) < r * r, z, axis=0)
        for k in range(n):
            c = grid.axis_centers(k)
            z = np.compress(np.abs(c - x0[k]) < r, z, axis=1 + k)
        lamc = grid.axis_centers(grid.d - 1)
        z = np.compress((lamc > 0) & (lamc < r), z, axis=grid.d)
        return z

    uu, vv = restrict(u), restrict(v)
    floor = 10.0 * 1e-10 * max(1.0, float(np.abs(v.values).max()))
    if float(vv.min()) < floor:
        raise MeasureBelowNoiseError(
            f"v on T_r dips to {float(vv.min()):.3e}, below the noise floor")
    quot = float((uu / vv).max())
    u_base = u.value_at(np.append(x0, r), t0 + 2 * r * r)
    v_base = v.value_at(np.append(x0, r), t0 - 2 * r * r)
    if u_base <= 0:
        raise ValueError("u base value is not positive")
    return ComparisonResult(quot * v_base / u_base, v_base, u_base)


@dataclass(frozen=True)
class GreenMeasureResult:
    lower_ratio: float      # omega / (rho^{n+1} G_plus), expected >= 1/c
    upper_ratio: float      # omega / (rho^{n+1} G_minus), expected <= c
    omega: float
    green_plus: float
    green_minus: float
    admissible: bool
    watermark: bool


def green_measure_equivalence(A: CoefficientField, dom: GraphDomain,
                              obs: ParabolicPoint, x0, t0: float, rho: float,
                              cfg: PotentialConfig = DEFAULT_CONFIG
                              ) -> GreenMeasureResult:
    """Sandwich ratios between omega(Q_{rho/2}) and pole-shifted Green values.

    G_plus has pole ((x0, rho), t0 + rho^2), G_minus ((x0, rho), t0 - rho^2);
    both are read at the observation point.  The admissibility window is
    t - t0 >= 4 rho^2 and |(x0, 0) - (x, lam)|^2 <= region_A * (t - t0).
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = x0.size
    sep2 = float(np.sum((obs.X[:-1] - x0) ** 2) + obs.X[-1] ** 2)
    dt = obs.t - t0
    admissible = (dt >= 4 * rho * rho) and (sep2 <= cfg.region_A * dt)
    if not admissible:
        warnings.warn("Green-measure configuration outside the admissible "
                      "window; result watermarked", stacklevel=2)
    half_cube = ParabolicCube(x0, t0, rho / 2.0)
    omega = caloric_measure(A, dom, obs, half_cube, cfg).value
    pole_X = np.append(x0, rho)
    horizon_p = obs.t - (t0 + rho * rho)
    horizon_m = obs.t - (t0 - rho * rho)
    if horizon_p <= 0:
        raise ValueError("observation time precedes the shifted pole")
    gp = greens_function(A, dom, ParabolicPoint(pole_X, t0 + rho * rho),
                         horizon_p * 1.05, extra_pts=[obs.X], cfg=cfg)
    gm = greens_function(A, dom, ParabolicPoint(pole_X, t0 - rho * rho),
                         horizon_m * 1.05, extra_pts=[obs.X], cfg=cfg)
    vp = gp.value_at(obs.X, obs.t)
    vm = gm.value_at(obs.X, obs.t)
    scale = rho ** (n + 1)
    if vp <= cfg.noise_floor * scale or vm <= cfg.noise_floor * scale:
        raise MeasureBelowNoiseError("Green values below the noise floor")
    return GreenMeasureResult(omega / (scale * vp), omega / (scale * vm),
                              omega, vp, vm, admissible, not admissible)


@dataclass(frozen=True)
class PositivityResult:
    c0: float
    points: np.ndarray
    values: np.ndarray


def measure_positivity_floor(A: CoefficientField, dom: GraphDomain,
                             cube: ParabolicCube, grid: SpaceTimeGrid,
                             gamma: float = 0.5, C1: float = 1.0,
                             C2: float = 10.0, samples: int = 50,
                             seed: int = 0) -> PositivityResult:
    """Minimum of omega(., cube) over the standard positivity region.

    Region: lam > gamma r, |x - x0|^2 + lam^2 <= C1 (t - t0) <= C2 r^2.
    One field solve serves every sample point; the recorded c0 is the
    empirical positivity floor (asserted positive by callers, never against
    book constants).
    """
    f = caloric_measure_field(A, dom, cube, grid)
    rng = np.random.default_rng(seed)
    r = cube.side
    n = cube.center_x.size
    pts, vals = [], []
    interp = f.interpolator()
    tries = 0
    while len(pts) < samples and tries < 100 * samples:
        tries += 1
        tau = cube.center_t + rng.uniform(0.5, 1.0) * C2 * r * r / C1
        bound = C1 * (tau - cube.center_t)
        if bound > C2 * r * r:
            continue
        lam = rng.uniform(gamma * r * 1.01, np.sqrt(bound) * 0.99)
        rad2 = bound - lam * lam
        if rad2 <= 0:
            continue
        x = cube.center_x + rng.uniform(-1, 1, n) * np.sqrt(rad2) / np.sqrt(n)
        X = np.append(x, lam)
        if tau > grid.t1 or tau < grid.t0:
            continue
        pts.append(np.concatenate([[tau], X]))
        vals.append(float(interp(np.concatenate([[tau], X])[None, :])[0]))
    pts = np.asarray(pts)
    vals = np.asarray(vals)
    return PositivityResult(float(vals.min()), pts, vals)
