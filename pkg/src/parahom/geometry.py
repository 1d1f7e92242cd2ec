"""Parabolic metric structure: norms, cubes, cones, Lipschitz graph domains.

The anisotropic geometry (space scales like rho, time like rho^2) underlies
every estimate in the toolkit.  All objects here are immutable after
construction and all operations are pure functions; they are safe to share
across concurrent workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "parabolic_norm",
    "parabolic_distance",
    "ParabolicPoint",
    "ParabolicCube",
    "Cone",
    "cone_contains",
    "GraphDomain",
    "LipschitzCylinder",
    "flatten_pullback",
    "boundary_measure",
    "BoundaryMeasure",
    "QUASI_TRIANGLE_CONSTANT",
]

# Provable for this norm: ||a+b|| <= 2(||a|| + ||b||).  A failed assertion
# downstream flags an implementation bug, not a theory gap.
QUASI_TRIANGLE_CONSTANT = 2.0


def parabolic_norm(X, t):
    """Anisotropic norm rho of a space-time offset (X, t).

    rho is the unique nonnegative root of t^2/rho^4 + |X|^2/rho^2 = 1,
    computed in closed form as rho^2 = (|X|^2 + sqrt(|X|^4 + 4 t^2)) / 2.
    Vectorized: X may have shape (..., k) and t shape (...,).

    Satisfies the scaling law rho(g*X, g^2*t) = g * rho(X, t) for g > 0,
    and rho = 0 iff (X, t) = (0, 0).
    """
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    if X.ndim == 0:
        X = X[None]
    x2 = np.sum(X * X, axis=-1)
    rho2 = 0.5 * (x2 + np.sqrt(x2 * x2 + 4.0 * t * t))
    return np.sqrt(rho2)


def parabolic_distance(p: "ParabolicPoint", q: "ParabolicPoint") -> float:
    """Parabolic distance ||(X - Y, t - s)|| between two space-time points."""
    if p.X.shape != q.X.shape:
        raise ValueError(
            f"dimension mismatch: {p.X.shape[-1]} vs {q.X.shape[-1]}"
        )
    return float(parabolic_norm(p.X - q.X, p.t - q.t))


@dataclass(frozen=True)
class ParabolicPoint:
    """Point (X, t) with X in R^d, d = n+1 spatial coordinates."""

    X: np.ndarray
    t: float

    def __post_init__(self):
        X = np.atleast_1d(np.asarray(self.X, dtype=float))
        if X.ndim != 1 or X.size < 1:
            raise ValueError("X must be a 1-d coordinate vector")
        if not (np.all(np.isfinite(X)) and np.isfinite(self.t)):
            raise ValueError("coordinates must be finite")
        X.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "t", float(self.t))

    @property
    def d(self) -> int:
        return self.X.size


@dataclass(frozen=True)
class ParabolicCube:
    """Parabolic cube: |y_i - x_i| < r, |s - t| < r^2.

    kind selects the flavor:
      * "boundary"  -- Q_r(x, t), center on the boundary plane, x in R^n;
      * "interior"  -- Q~_r(X, t), full space-time cube, X in R^{n+1};
      * "box"       -- T_r(x, t) = Q_r(x, t) x (0, r), carries a height.
    """

    center_x: np.ndarray
    center_t: float
    side: float
    kind: str = "boundary"

    def __post_init__(self):
        cx = np.atleast_1d(np.asarray(self.center_x, dtype=float))
        if self.side <= 0:
            raise ValueError("side must be positive")
        if self.kind not in ("boundary", "interior", "box"):
            raise ValueError(f"unknown cube kind {self.kind!r}")
        cx.flags.writeable = False
        object.__setattr__(self, "center_x", cx)
        object.__setattr__(self, "center_t", float(self.center_t))
        object.__setattr__(self, "side", float(self.side))

    def scaled(self, factor: float) -> "ParabolicCube":
        return ParabolicCube(self.center_x, self.center_t,
                             self.side * factor, self.kind)

    @property
    def volume(self) -> float:
        """Lebesgue measure (2r)^n * 2r^2 of the (x, t) cube."""
        n = self.center_x.size
        return (2.0 * self.side) ** n * 2.0 * self.side ** 2

    def contains_xt(self, x, t) -> np.ndarray:
        """Pointwise membership of boundary coordinates (x, t)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        inside = np.all(np.abs(x - self.center_x) < self.side, axis=-1)
        return inside & (np.abs(np.asarray(t) - self.center_t) < self.side ** 2)


@dataclass(frozen=True)
class Cone:
    """Nontangential cone of opening eta at a boundary vertex (x0, t0).

    Contains the points (x, t, lam) with ||(x - x0, t - t0)|| < eta * lam,
    lam > 0.  An optional truncation keeps only lam < truncation (distance
    to the flattened lateral boundary).
    """

    vertex_x: np.ndarray
    vertex_t: float
    opening: float
    truncation: Optional[float] = None

    def __post_init__(self):
        vx = np.atleast_1d(np.asarray(self.vertex_x, dtype=float))
        if self.opening <= 0:
            raise ValueError("opening must be positive")
        if self.truncation is not None and self.truncation <= 0:
            raise ValueError("truncation must be positive when given")
        vx.flags.writeable = False
        object.__setattr__(self, "vertex_x", vx)
        object.__setattr__(self, "vertex_t", float(self.vertex_t))


def cone_contains(cone: Cone, x, t, lam) -> np.ndarray:
    """Membership test for points (x, t, lam); vectorized over leading axes."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if x.ndim == cone.vertex_x.ndim and x.shape[-1] != cone.vertex_x.size:
        raise ValueError("x dimension does not match cone vertex")
    rho = parabolic_norm(np.atleast_1d(x) - cone.vertex_x,
                         np.asarray(t, dtype=float) - cone.vertex_t)
    inside = (rho < cone.opening * lam) & (lam > 0)
    if cone.truncation is not None:
        inside &= lam < cone.truncation
    return inside


class _TabulatedFunction:
    """Piecewise-linear interpolant of a scalar function on a uniform grid."""

    def __init__(self, grids: Sequence[np.ndarray], values: np.ndarray):
        self.grids = [np.asarray(g, dtype=float) for g in grids]
        self.values = np.asarray(values, dtype=float)
        self.values.flags.writeable = False
        if len(self.grids) == 1:
            self._interp = None
        else:
            from scipy.interpolate import RegularGridInterpolator

            self._interp = RegularGridInterpolator(
                self.grids, self.values, method="linear",
                bounds_error=False, fill_value=None)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if len(self.grids) == 1:
            return np.interp(x.reshape(-1), self.grids[0], self.values
                             ).reshape(x.shape[:-1] if x.ndim > 1 else x.shape)
        return self._interp(x)


@dataclass(frozen=True)
class GraphDomain:
    """Region above a Lipschitz graph, D = {(x, t, lam): lam > phi(x)}.

    The time direction is free (unbounded cylinder); the lateral boundary is
    {lam = phi(x)}.  phi is kept both as the original evaluator (when given
    in closed form) and tabulated on a uniform grid over `box`, where the
    Lipschitz bound |phi(x) - phi(y)| <= m |x - y| is verified on all
    neighboring grid-point pairs.
    """

    m: float
    box: tuple                      # ((lo, hi), ...) one pair per x-axis
    phi: Optional[Callable] = None  # closed-form evaluator, vectorized
    table_resolution: int = 257
    _table: _TabulatedFunction = field(default=None, repr=False)

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("Lipschitz constant must be nonnegative")
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        if any(hi <= lo for lo, hi in box):
            raise ValueError("box intervals must be nonempty")
        object.__setattr__(self, "box", box)
        grids = [np.linspace(lo, hi, self.table_resolution) for lo, hi in box]
        if self.phi is None:
            vals = np.zeros([g.size for g in grids])
        else:
            mesh = np.meshgrid(*grids, indexing="ij")
            pts = np.stack([mm.reshape(-1) for mm in mesh], axis=-1)
            vals = np.asarray(self.phi(pts), dtype=float).reshape(
                [g.size for g in grids])
        object.__setattr__(self, "_table", _TabulatedFunction(grids, vals))
        self._check_lipschitz(grids, vals)

    def _check_lipschitz(self, grids, vals):
        tol = 1e-12 * max(1.0, self.m)
        for ax, g in enumerate(grids):
            h = g[1] - g[0]
            slope = np.abs(np.diff(vals, axis=ax)) / h
            worst = slope.max() if slope.size else 0.0
            if worst > self.m + tol:
                idx = np.unravel_index(np.argmax(slope), slope.shape)
                raise ValueError(
                    f"Lipschitz bound m={self.m} violated along axis {ax} "
                    f"at grid index {idx}: local slope {worst:.6g}")

    @property
    def n(self) -> int:
        return len(self.box)

    def phi_values(self, x) -> np.ndarray:
        """phi at points x, shape (m, n) or (m,) for n = 1."""
        x = np.asarray(x, dtype=float)
        if self.n == 1 and x.ndim == 1:
            x = x[:, None]
        if self.phi is not None:
            return np.asarray(self.phi(x), dtype=float)
        return self._table(x if self.n > 1 else x[..., 0])

    def grad_phi(self, x, h: Optional[float] = None) -> np.ndarray:
        """Gradient of phi by central differences, one-sided at box edges."""
        x = np.asarray(x, dtype=float)
        if self.n == 1 and x.ndim == 1:
            x = x[:, None]
        if h is None:
            h = min((hi - lo) for lo, hi in self.box) / (self.table_resolution - 1)
        g = np.empty_like(x)
        for ax in range(self.n):
            lo, hi = self.box[ax]
            xp = x.copy()
            xm = x.copy()
            xp[:, ax] = np.minimum(x[:, ax] + h, hi)
            xm[:, ax] = np.maximum(x[:, ax] - h, lo)
            dx = xp[:, ax] - xm[:, ax]
            g[:, ax] = (self.phi_values(xp) - self.phi_values(xm)) / dx
        return g

    @classmethod
    def from_json(cls, spec) -> "GraphDomain":
        """Load from {"phi": {"kind": ..., ...}, "m": float, "box": [...]}."""
        if isinstance(spec, str):
            spec = json.loads(spec)
        box = [tuple(iv) for iv in spec["box"]]
        m = float(spec["m"])
        pspec = spec.get("phi", {"kind": "zero"})
        kind = pspec.get("kind", "zero")
        if kind == "zero":
            return cls(m=m, box=box, phi=None)
        if kind == "closed_form":
            from .coeffs import compile_expression

            fn = compile_expression(pspec["expr"], len(box))
            return cls(m=m, box=box, phi=lambda x: fn(np.asarray(x)))
        if kind == "table":
            grids = [np.asarray(g, dtype=float) for g in pspec["grids"]]
            vals = np.asarray(pspec["values"], dtype=float)
            tab = _TabulatedFunction(grids, vals)
            if len(grids) == 1:
                return cls(m=m, box=box, phi=lambda x: tab(np.asarray(x)[..., 0]),
                           table_resolution=max(65, grids[0].size))
            return cls(m=m, box=box, phi=tab,
                       table_resolution=max(65, grids[0].size))
        raise ValueError(f"unknown phi kind {kind!r}")


@dataclass(frozen=True)
class LipschitzCylinder:
    """Bounded cylinder Omega x (0, T) with a box base.

    The base is an axis-aligned box, the simplest Lipschitz domain; each face
    is a trivial (m=0, r0=min side/2) chart.  `charts` carries the per-face
    chart metadata so that lateral-boundary machinery can treat each side as
    a local graph with phi = 0.
    """

    base_box: tuple     # ((lo, hi), ...) one pair per spatial axis, d entries
    T: float

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.base_box)
        if any(hi <= lo for lo, hi in box):
            raise ValueError("base box intervals must be nonempty")
        if self.T <= 0:
            raise ValueError("final time T must be positive")
        object.__setattr__(self, "base_box", box)
        object.__setattr__(self, "T", float(self.T))

    @property
    def d(self) -> int:
        return len(self.base_box)

    @property
    def r0(self) -> float:
        return 0.5 * min(hi - lo for lo, hi in self.base_box)

    def charts(self):
        """Per-face (axis, side, m, r0) chart descriptors; phi = 0 for a box."""
        out = []
        for axis in range(self.d):
            for side in ("lo", "hi"):
                out.append({"axis": axis, "side": side, "m": 0.0, "r0": self.r0})
        return out

    def validate_charts(self, samples: int = 64) -> bool:
        """Check the local-graph representation of each chart on grid samples.

        For a box base every chart is exact (phi = 0, any m >= 0 works), so
        this validates the bookkeeping: the face really is the graph
        {lam_axis = const} over the tangential box.
        """
        for ch in self.charts():
            axis, side = ch["axis"], ch["side"]
            face_val = self.base_box[axis][0 if side == "lo" else 1]
            for ax2, (lo, hi) in enumerate(self.base_box):
                if ax2 == axis:
                    continue
                pts = np.linspace(lo, hi, samples)
                if not np.all((pts >= lo) & (pts <= hi)):
                    return False
            if not np.isfinite(face_val):
                return False
        return True

    @classmethod
    def from_json(cls, spec) -> "LipschitzCylinder":
        if isinstance(spec, str):
            spec = json.loads(spec)
        return cls(base_box=[tuple(iv) for iv in spec["base_box"]],
                   T=float(spec["T"]))


def flatten_pullback(dom: GraphDomain, A):
    """Pull a coefficient field back to the half space {lam > 0}.

    Under the shear (x, lam) -> (x, lam - phi(x)) a solution of the
    divergence-form equation with coefficients A becomes a solution on the
    half space with coefficients A~ = J A J^T evaluated at the preimage,
    where J = [[I, 0], [-grad phi, 1]].  det J = 1, so no volume factor.

    The ellipticity constant degrades by at most the largest eigenvalue of
    J J^T, which is bounded by 1 + m^2 + m sqrt(2 + m^2).
    """
    from .coeffs import CoefficientField

    d = A.d
    if dom.n != d - 1:
        raise ValueError(f"domain has n={dom.n} but field has d={d}")

    def pulled(X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        pts = X[None, :] if single else X.reshape(-1, d)
        x, lam = pts[:, :-1], pts[:, -1]
        g = dom.grad_phi(x)
        src = np.concatenate(
            [x, (lam + dom.phi_values(x))[:, None]], axis=1)
        base = A(src)
        J = np.zeros((pts.shape[0], d, d))
        for i in range(d - 1):
            J[:, i, i] = 1.0
        J[:, d - 1, :-1] = -g
        J[:, d - 1, d - 1] = 1.0
        out = J @ base @ np.swapaxes(J, 1, 2)
        out = 0.5 * (out + np.swapaxes(out, 1, 2))
        if single:
            return out[0]
        return out.reshape(X.shape[:-1] + (d, d))

    m = dom.m
    growth = 1.0 + m * m + m * np.sqrt(2.0 + m * m)
    identity_map = dom.phi is None
    return CoefficientField(
        evaluator=pulled if not identity_map else A._eval,
        d=d,
        lam=A.lam * growth if not identity_map else A.lam,
        period="none" if not identity_map else A.period,
        period_scale=A.period_scale,
        label=f"flatten({A.label})",
        metadata={"map": "shear lam -> lam - phi(x)", "m": m,
                  "source": A.label},
    )


@dataclass(frozen=True)
class BoundaryMeasure:
    value: float
    empty: bool = False


def boundary_measure(dom, region: ParabolicCube,
                     quad_pts: int = 257) -> BoundaryMeasure:
    """Lateral-boundary measure sigma(region) = surface measure x time length.

    For a graph domain the surface element is sqrt(1 + |grad phi|^2) dx and
    the measure of Q_r is the patch integral times the time extent 2 r^2,
    computed by trapezoid quadrature at resolution `quad_pts` per axis.
    For a box cylinder the perimeter arc length inside the cube is exact.
    """
    r = region.side
    time_len = 2.0 * r * r
    if isinstance(dom, GraphDomain):
        los, his = [], []
        for ax, (lo, hi) in enumerate(dom.box):
            c = region.center_x[ax] if region.center_x.size > ax else 0.0
            los.append(max(lo, c - r))
            his.append(min(hi, c + r))
        if any(h <= l for l, h in zip(los, his)):
            return BoundaryMeasure(0.0, empty=True)
        grids = [np.linspace(l, h, quad_pts) for l, h in zip(los, his)]
        mesh = np.meshgrid(*grids, indexing="ij")
        pts = np.stack([mm.reshape(-1) for mm in mesh], axis=-1)
        g = dom.grad_phi(pts)
        integrand = np.sqrt(1.0 + np.sum(g * g, axis=1)).reshape(
            [q.size for q in grids])
        patch = integrand
        for ax in range(dom.n):
            patch = np.trapezoid(patch, grids[ax], axis=0)
        return BoundaryMeasure(float(patch) * time_len)
    if isinstance(dom, LipschitzCylinder):
        # Perimeter length of the base box inside the spatial cube, times
        # the time overlap with (0, T).
        t_lo = max(0.0, region.center_t - r * r)
        t_hi = min(dom.T, region.center_t + r * r)
        if t_hi <= t_lo:
            return BoundaryMeasure(0.0, empty=True)
        length = 0.0
        d = dom.d
        for axis in range(d):
            for side in (0, 1):
                face = dom.base_box[axis][side]
                if abs(face - region.center_x[axis]) >= r:
                    continue
                seg = 1.0
                for ax2 in range(d):
                    if ax2 == axis:
                        continue
                    lo, hi = dom.base_box[ax2]
                    c = region.center_x[ax2]
                    seg *= max(0.0, min(hi, c + r) - max(lo, c - r))
                length += seg
        if length == 0.0:
            return BoundaryMeasure(0.0, empty=True)
        return BoundaryMeasure(length * (t_hi - t_lo))
    raise TypeError(f"unsupported domain type {type(dom).__name__}")
