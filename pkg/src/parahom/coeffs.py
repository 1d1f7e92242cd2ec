"""Coefficient fields and their structural hypotheses.

A field is a symmetric (d x d) matrix-valued map on R^d together with a
declared ellipticity constant and periodicity.  The checkers quantify how
well a given field satisfies uniform ellipticity, periodicity and the
Dini-type oscillation conditions; nothing here assumes the declarations are
true, they are verified by sampling.

Evaluators must be pure and re-entrant; every operation is safe under
concurrent calls.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "CoefficientField",
    "AsymmetricFieldError",
    "EllipticityReport",
    "DiniModulus",
    "DiniIntegral",
    "check_ellipticity",
    "check_periodicity",
    "dini_modulus",
    "dini_integral",
    "scale_field",
    "preset",
    "PRESETS",
    "compile_expression",
    "field_from_json",
    "constant_matrix_field",
]


class AsymmetricFieldError(ValueError):
    """Raised when an evaluator returns a non-symmetric matrix."""

    def __init__(self, point, deviation):
        self.point = np.asarray(point)
        self.deviation = float(deviation)
        super().__init__(
            f"asymmetric coefficient sample at X={self.point.tolist()} "
            f"(|A - A^T| = {self.deviation:.3e})")


@dataclass(frozen=True)
class CoefficientField:
    """Symmetric matrix-valued coefficient map A(X) on R^d.

    period declares the translation symmetry:
      * "none"    -- no periodicity claimed;
      * "axis"    -- A(x, lam + s) = A(x, lam) in the last coordinate;
      * "lattice" -- A(X + s e_i) = A(X) for every coordinate direction;
    with s = period_scale (1 for the unscaled presets).
    """

    evaluator: Callable
    d: int
    lam: float = 1.0
    period: str = "none"
    period_scale: float = 1.0
    label: str = "field"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lam < 1.0:
            raise ValueError("ellipticity constant must be >= 1")
        if self.period not in ("none", "axis", "lattice"):
            raise ValueError(f"unknown period kind {self.period!r}")
        if self.period_scale <= 0:
            raise ValueError("period_scale must be positive")

    @property
    def _eval(self):
        return self.evaluator

    def __call__(self, X) -> np.ndarray:
        """Evaluate at points X of shape (..., d); returns (..., d, d)."""
        X = np.asarray(X, dtype=float)
        out = np.asarray(self.evaluator(X), dtype=float)
        return out

    def period_generators(self) -> np.ndarray:
        """Lattice generators of the declared periodicity, shape (k, d)."""
        if self.period == "none":
            return np.zeros((0, self.d))
        if self.period == "axis":
            g = np.zeros((1, self.d))
            g[0, -1] = self.period_scale
            return g
        return np.eye(self.d) * self.period_scale


def _scalar_field(cfun, d):
    def evaluate(X):
        X = np.asarray(X, dtype=float)
        c = np.asarray(cfun(X), dtype=float)
        out = np.zeros(c.shape + (d, d))
        for i in range(d):
            out[..., i, i] = c
        return out
    return evaluate


def constant_matrix_field(M, label: str = "constant-matrix",
                          lam: Optional[float] = None) -> CoefficientField:
    """Constant coefficient field from an explicit symmetric matrix."""
    M = np.asarray(M, dtype=float)
    d = M.shape[0]
    if M.shape != (d, d) or np.abs(M - M.T).max() > 1e-10 * np.abs(M).max():
        raise ValueError("matrix must be square and symmetric")
    M = 0.5 * (M + M.T)
    if lam is None:
        eigs = np.linalg.eigvalsh(M)
        lam = float(max(eigs.max(), 1.0 / eigs.min()))

    def evaluate(X):
        X = np.asarray(X, dtype=float)
        return np.broadcast_to(M, X.shape[:-1] + (d, d)).copy()

    return CoefficientField(evaluate, d=d, lam=max(lam, 1.0), period="lattice",
                            label=label)


def compile_expression(expr: str, d: int) -> Callable:
    """Compile a scalar coordinate expression into a vectorized evaluator.

    Grammar: arithmetic (+ - * / ** and unary -), numeric literals, pi, the
    coordinates x1..xd (aliases: x = x1, lam = xd), and the functions
    sin, cos, abs, min, max (min/max n-ary over their arguments).
    Anything else is rejected, so configs cannot run arbitrary code.
    """
    tree = ast.parse(expr, mode="eval")
    fns = {"sin": np.sin, "cos": np.cos, "abs": np.abs,
           "min": lambda *a: np.minimum.reduce(np.broadcast_arrays(*a)),
           "max": lambda *a: np.maximum.reduce(np.broadcast_arrays(*a))}

    def ev(node, coords):
        if isinstance(node, ast.Expression):
            return ev(node.body, coords)
        if isinstance(node, ast.Constant):
            if isinstance(node.value, (int, float)):
                return float(node.value)
            raise ValueError(f"bad literal {node.value!r}")
        if isinstance(node, ast.Name):
            if node.id == "pi":
                return math.pi
            if node.id == "x":
                return coords[..., 0]
            if node.id == "lam":
                return coords[..., -1]
            if node.id.startswith("x") and node.id[1:].isdigit():
                k = int(node.id[1:])
                if not 1 <= k <= coords.shape[-1]:
                    raise ValueError(f"coordinate {node.id} out of range")
                return coords[..., k - 1]
            raise ValueError(f"unknown name {node.id!r}")
        if isinstance(node, ast.BinOp):
            a, b = ev(node.left, coords), ev(node.right, coords)
            if isinstance(node.op, ast.Add):
                return a + b
            if isinstance(node.op, ast.Sub):
                return a - b
            if isinstance(node.op, ast.Mult):
                return a * b
            if isinstance(node.op, ast.Div):
                return a / b
            if isinstance(node.op, ast.Pow):
                return a ** b
            raise ValueError("unsupported operator")
        if isinstance(node, ast.UnaryOp):
            a = ev(node.operand, coords)
            if isinstance(node.op, ast.USub):
                return -a
            if isinstance(node.op, ast.UAdd):
                return a
            raise ValueError("unsupported unary operator")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in fns:
                raise ValueError("only sin/cos/abs/min/max calls are allowed")
            args = [ev(a, coords) for a in node.args]
            return fns[node.func.id](*args)
        raise ValueError(f"unsupported syntax {type(node).__name__}")

    # Validate eagerly on a dummy point so config errors surface at parse time.
    ev(tree, np.zeros((1, d)))

    def fn(X):
        X = np.asarray(X, dtype=float)
        val = ev(tree, X)
        return np.broadcast_to(val, X.shape[:-1]).copy() if np.ndim(val) == 0 \
            else val

    return fn


def _laminate_profile(y, a_low=1.0, a_high=4.0, lo=0.25, hi=0.75):
    frac = y - np.floor(y)
    return np.where((frac >= lo) & (frac < hi), a_high, a_low)


def preset(name: str, d: int = 2, **kwargs) -> CoefficientField:
    """Built-in coefficient fields.

    constant      -- c * I; exercises the trivial case (corrector vanishes).
    laminate      -- a(y1) * I with a in {1, 4} on equal-volume bands
                     (jumps at 1/4 and 3/4); 1-d quadrature oracle available.
    trig          -- (2 + sin(2 pi lam)) * I, smooth, periodic in every
                     coordinate (constant in x), the lam-periodic workhorse.
    trig2d        -- (2 + 0.8 sin(2 pi y1) sin(2 pi y2)) * I, genuinely
                     multi-dimensional smooth lattice-periodic field.
    checker       -- smoothed two-phase checkerboard with values (a1, a2)
                     and smoothing width delta; tends to sqrt(a1 a2) * I.
    """
    if name == "constant":
        c = float(kwargs.get("value", 1.0))
        lam = max(c, 1.0 / c)
        return CoefficientField(_scalar_field(lambda X: np.full(X.shape[:-1], c), d),
                                d=d, lam=lam, period="lattice", label=f"constant({c})")
    if name == "laminate":
        a1 = float(kwargs.get("a_low", 1.0))
        a2 = float(kwargs.get("a_high", 4.0))
        lam = max(a1, a2, 1.0 / min(a1, a2))
        return CoefficientField(
            _scalar_field(lambda X: _laminate_profile(X[..., 0], a1, a2), d),
            d=d, lam=lam, period="lattice", label="laminate")
    if name == "trig":
        return CoefficientField(
            _scalar_field(lambda X: 2.0 + np.sin(2.0 * np.pi * X[..., -1]), d),
            d=d, lam=3.0, period="lattice", label="trig")
    if name == "trig2d":
        def c2(X):
            return 2.0 + 0.8 * np.sin(2 * np.pi * X[..., 0]) \
                * np.sin(2 * np.pi * X[..., -1])
        return CoefficientField(_scalar_field(c2, d), d=d, lam=3.0,
                                period="lattice", label="trig2d")
    if name == "checker":
        a1 = float(kwargs.get("a_low", 1.0))
        a2 = float(kwargs.get("a_high", 4.0))
        delta = float(kwargs.get("delta", 0.25))
        log_mid = 0.5 * (np.log(a1) + np.log(a2))
        log_amp = 0.5 * (np.log(a2) - np.log(a1))

        def cc(X):
            s = np.tanh(np.sin(2 * np.pi * X[..., 0])
                        * np.sin(2 * np.pi * X[..., -1]) / delta)
            return np.exp(log_mid + log_amp * s)

        return CoefficientField(_scalar_field(cc, d), d=d,
                                lam=max(a2, 1.0 / a1), period="lattice",
                                label=f"checker(delta={delta})")
    raise KeyError(f"unknown preset {name!r}")


PRESETS = ("constant", "laminate", "trig", "trig2d", "checker")


def field_from_json(spec, d: int = 2) -> CoefficientField:
    """Field from a config dict: a preset name or an expression spec.

    {"preset": "laminate", ...kwargs} or
    {"expr": "2+sin(2*pi*lam)", "lam": 3.0, "period": "axis"} (scalar * I) or
    {"entries": [[...]], "lam": ..., "period": ...} for full matrices.
    """
    if isinstance(spec, str):
        return preset(spec, d=d)
    if "preset" in spec:
        kw = {k: v for k, v in spec.items() if k not in ("preset", "d")}
        return preset(spec["preset"], d=int(spec.get("d", d)), **kw)
    d = int(spec.get("d", d))
    lam = float(spec.get("lam", 2.0))
    period = spec.get("period", "none")
    if "expr" in spec:
        fn = compile_expression(spec["expr"], d)
        return CoefficientField(_scalar_field(fn, d), d=d, lam=lam,
                                period=period, label=f"expr({spec['expr']})")
    if "entries" in spec:
        rows = spec["entries"]
        if len(rows) != d or any(len(r) != d for r in rows):
            raise ValueError("entries must be a d x d table of expressions")
        fns = [[compile_expression(str(e), d) for e in row] for row in rows]

        def mat(X):
            X = np.asarray(X, dtype=float)
            out = np.zeros(X.shape[:-1] + (d, d))
            for i in range(d):
                for j in range(d):
                    out[..., i, j] = fns[i][j](X)
            return out

        return CoefficientField(mat, d=d, lam=lam, period=period,
                                label="expr-matrix")
    raise ValueError("field spec needs 'preset', 'expr' or 'entries'")


@dataclass(frozen=True)
class EllipticityReport:
    min_eig: float
    max_eig: float
    passed: bool


def _sample_points(A: CoefficientField, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if A.period != "none":
        scale = A.period_scale
        return rng.uniform(0.0, scale, size=(count, A.d))
    return rng.uniform(-2.0, 2.0, size=(count, A.d))


def check_ellipticity(A: CoefficientField, sample_count: int = 2000,
                      seed: int = 0, slack: float = 1e-10) -> EllipticityReport:
    """Extreme eigenvalues of A over random sample points.

    Passes iff every eigenvalue lies in [1/lam - slack, lam + slack].
    A non-symmetric sample is a hard error carrying the offending point.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    pts = _sample_points(A, sample_count, seed)
    vals = A(pts)
    asym = np.abs(vals - np.swapaxes(vals, -1, -2)).max(axis=(-1, -2))
    scale = max(1.0, float(np.abs(vals).max()))
    worst = int(np.argmax(asym))
    if asym[worst] > 1e-12 * scale:
        raise AsymmetricFieldError(pts[worst], asym[worst])
    eigs = np.linalg.eigvalsh(0.5 * (vals + np.swapaxes(vals, -1, -2)))
    lo, hi = float(eigs.min()), float(eigs.max())
    ok = (lo >= 1.0 / A.lam - slack) and (hi <= A.lam + slack)
    return EllipticityReport(lo, hi, ok)


def check_periodicity(A: CoefficientField, sample_count: int = 2000,
                      seed: int = 0) -> float:
    """Max Frobenius deviation |A(X + Z) - A(X)| over declared generators."""
    gens = A.period_generators()
    if gens.shape[0] == 0:
        raise ValueError("field declares no periodicity")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-2.0, 2.0, size=(sample_count, A.d))
    worst = 0.0
    base = A(pts)
    for z in gens:
        dev = np.linalg.norm(A(pts + z) - base, axis=(-1, -2))
        worst = max(worst, float(dev.max()))
    return worst


def _default_rho_grid() -> np.ndarray:
    # Geometric grid, ratio 2^{1/4}, from 2^-20 up to 1: resolves the
    # log-divergent borderline.
    k = np.arange(0, 81)
    return 2.0 ** (-20 + k / 4.0)


@dataclass(frozen=True)
class DiniModulus:
    """Sampled oscillation modulus rho -> theta(rho).

    kind "axis" measures oscillation in the last coordinate only; "all"
    over full-space offsets |X - Y| <= rho.  theta is monotone nondecreasing
    by construction (running max over the grid).  half_width estimates the
    sampling error from the gap between the two largest samples at each rho.
    """

    rho: np.ndarray
    theta: np.ndarray
    kind: str
    half_width: np.ndarray

    def __post_init__(self):
        for name in ("rho", "theta", "half_width"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def theta_at(self, rho) -> np.ndarray:
        return np.interp(rho, self.rho, self.theta)


def _spectral_norm_sym(M: np.ndarray) -> np.ndarray:
    if M.shape[-1] == 1:
        return np.abs(M[..., 0, 0])
    if M.shape[-1] == 2:
        # closed form, avoids eigvalsh on huge batches
        a, b, c = M[..., 0, 0], M[..., 1, 1], M[..., 0, 1]
        half_tr = 0.5 * (a + b)
        disc = np.sqrt(0.25 * (a - b) ** 2 + c * c)
        return np.maximum(np.abs(half_tr + disc), np.abs(half_tr - disc))
    return np.abs(np.linalg.eigvalsh(M)).max(axis=-1)


def dini_modulus(A: CoefficientField, kind: str = "axis",
                 rho_grid: Optional[np.ndarray] = None,
                 pairs: int = 10000, seed: int = 0) -> DiniModulus:
    """Estimate theta(rho) = sup |A(X) - A(Y)| over admissible pairs.

    The sup is approximated over `pairs` quasi-random pairs per rho plus
    offsets of exactly +-rho (which realize the sup for monotone profiles).
    Matrix size is measured in the spectral norm, so scalar fields c * I
    report |c1 - c2| independent of dimension.
    """
    if kind not in ("axis", "all"):
        raise ValueError("kind must be 'axis' or 'all'")
    rho_grid = _default_rho_grid() if rho_grid is None else np.asarray(rho_grid)
    if np.any(rho_grid <= 0) or np.any(rho_grid > 1):
        raise ValueError("rho grid must lie in (0, 1]")
    rho_grid = np.sort(rho_grid)

    from scipy.stats import qmc

    sampler = qmc.Halton(d=A.d + A.d, seed=seed, scramble=True)
    raw = sampler.random(pairs)
    span = A.period_scale if A.period != "none" else 2.0
    base = raw[:, :A.d] * span
    unit = raw[:, A.d:] * 2.0 - 1.0             # offset directions in [-1,1]^d

    theta = np.empty(rho_grid.size)
    half_width = np.empty(rho_grid.size)
    for i, rho in enumerate(rho_grid):
        if kind == "axis":
            off = np.zeros_like(base)
            off[:, -1] = unit[:, -1] * rho
            # include the extreme offsets exactly
            off[: pairs // 4, -1] = rho
            off[pairs // 4: pairs // 2, -1] = -rho
        else:
            norms = np.linalg.norm(unit, axis=1, keepdims=True)
            norms[norms == 0] = 1.0
            radii = np.abs(unit[:, :1])
            off = unit / norms * radii * rho
            off[: pairs // 4] = unit[: pairs // 4] / norms[: pairs // 4] * rho
        dev = _spectral_norm_sym(A(base + off) - A(base))
        top2 = np.partition(dev, dev.size - 2)[-2:]
        theta[i] = top2[1]
        half_width[i] = 0.5 * (top2[1] - top2[0])
    theta = np.maximum.accumulate(theta)
    return DiniModulus(rho_grid, theta, kind, half_width)


@dataclass(frozen=True)
class DiniIntegral:
    """Quadrature of theta(rho)^2 / rho with a divergence indicator.

    tail_indicator = theta(rho_min)^2 * |log rho_min| grows without bound
    exactly when the integral diverges logarithmically, making the
    borderline visible in reports.
    """

    value: float
    tail_indicator: float
    rho_min: float


def dini_integral(mod: DiniModulus, rho_min: float = None) -> DiniIntegral:
    """Trapezoid integral of theta^2/rho over [rho_min, 1]."""
    rho_min = float(mod.rho[0]) if rho_min is None else float(rho_min)
    if rho_min < mod.rho[0] - 1e-15:
        raise ValueError(
            f"samples start at {mod.rho[0]:.3e}, cannot integrate from {rho_min:.3e}")
    mask = mod.rho >= rho_min * (1 - 1e-12)
    rho = mod.rho[mask]
    th = mod.theta[mask]
    value = float(np.trapezoid(th * th / rho, rho))
    tail = float(th[0] ** 2 * abs(np.log(rho[0])))
    return DiniIntegral(value, tail, float(rho[0]))


def scale_field(A: CoefficientField, eps: float) -> CoefficientField:
    """Oscillating rescale X -> A(X / eps); period metadata scales with eps."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if eps == 1.0:
        return A

    def scaled(X):
        return A.evaluator(np.asarray(X, dtype=float) / eps)

    return CoefficientField(scaled, d=A.d, lam=A.lam, period=A.period,
                            period_scale=A.period_scale * eps,
                            label=f"{A.label}@eps={eps}",
                            metadata=dict(A.metadata, eps=eps))
