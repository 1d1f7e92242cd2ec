"""Periodic corrector problems and the homogenized coefficient matrix.

The corrector chi_alpha solves  -div(A^T (grad chi + alpha)) = 0  on the
unit torus with mean zero; the effective matrix collects the averaged
fluxes Abar^T alpha = <A^T (grad w_alpha)>, one corrector per coordinate
direction.  The cell average and the cell equation both live on the full
(n+1)-dimensional unit cell, which keeps the dimensions consistent.

Discretization: multilinear (Q1) elements on a uniform periodic grid with
the coefficient sampled once per element at its midpoint.  The Galerkin
structure makes the discrete energy identity alpha . Abar alpha =
<(grad w)^T A grad w> exact up to solver tolerance, keeps Abar symmetric
for symmetric A, and reproduces 1-d laminates exactly whenever the
material interfaces fall on element boundaries.  The linear systems are
solved by Jacobi-preconditioned CG on the mean-zero subspace.

The d corrector solves are independent and may run concurrently; each
solve touches only its own state.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product

import numpy as np
import scipy.sparse as sp

from .coeffs import CoefficientField, check_periodicity, scale_field
from .linalg import pcg

__all__ = [
    "CorrectorField",
    "EffectiveMatrix",
    "solve_corrector",
    "effective_matrix",
    "grid_convergence",
    "voigt_reuss_bounds",
]


@lru_cache(maxsize=8)
def _q1_reference(d: int):
    """Reference-cell integrals for multilinear elements on [0,1]^d.

    Returns (corners, G, E) where corners lists the 2^d corner multi-indices,
    G[k, l, a, b] = int d_k phi_a d_l phi_b dxi  and
    E[k, a] = int d_k phi_a dxi.
    Gauss 2-point quadrature per axis is exact for these integrands.
    """
    corners = list(product((0, 1), repeat=d))
    nc = len(corners)
    gp = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    gw = np.array([0.5, 0.5])
    pts = np.array(list(product(gp, repeat=d)))
    wts = np.array([np.prod(w) for w in product(gw, repeat=d)])

    def shape_1d(a, x):
        return x if a == 1 else 1.0 - x

    def dshape_1d(a):
        return 1.0 if a == 1 else -1.0

    grads = np.zeros((nc, len(pts), d))
    for a, ci in enumerate(corners):
        for k in range(d):
            g = np.full(len(pts), dshape_1d(ci[k]))
            for j in range(d):
                if j != k:
                    g = g * shape_1d(ci[j], pts[:, j])
            grads[a, :, k] = g

    G = np.einsum("aqk,bql,q->klab", grads, grads, wts)
    E = np.einsum("aqk,q->ka", grads, wts)
    return corners, G, E


def _element_coefficients(A: CoefficientField, N: int) -> np.ndarray:
    d = A.d
    h = 1.0 / N
    axes = [np.arange(N) * h + 0.5 * h] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([mm.reshape(-1) for mm in mesh], axis=-1)
    return A(pts)  # (N^d, d, d)


def _assemble(A: CoefficientField, N: int):
    """Periodic stiffness matrix and the per-direction load vectors.

    Node (i1..id) lives at the grid corners modulo N; element e has corner
    nodes e + c for c in {0,1}^d (indices mod N).
    """
    d = A.d
    h = 1.0 / N
    corners, G, E = _q1_reference(d)
    Avals = _element_coefficients(A, N)
    ne = Avals.shape[0]
    nn = N ** d

    # element -> corner node flat indices, shape (ne, 2^d)
    idx = np.arange(ne).reshape((N,) * d)
    corner_nodes = np.empty((ne, len(corners)), dtype=np.int64)
    for a, ci in enumerate(corners):
        rolled = idx
        for ax, c in enumerate(ci):
            if c:
                rolled = np.roll(rolled, -1, axis=ax)
        corner_nodes[:, a] = rolled.reshape(-1)

    # K^e_ab = h^{d-2} sum_kl A_kl G[k,l,a,b]
    Ke = h ** (d - 2) * np.einsum("ekl,klab->eab", Avals, G)
    nc = len(corners)
    rows = np.repeat(corner_nodes, nc, axis=1).reshape(-1)
    cols = np.tile(corner_nodes, (1, nc)).reshape(-1)
    S = sp.coo_matrix((Ke.reshape(-1), (rows, cols)), shape=(nn, nn)).tocsr()

    # load for direction alpha = e_j:
    # b_a = -int grad phi_a . (A^T e_j) = -h^{d-1} sum_k (A^T)_{kj} E[k,a]
    loads = np.zeros((d, nn))
    AT = np.swapaxes(Avals, -1, -2)
    for j in range(d):
        be = -h ** (d - 1) * np.einsum("ek,ka->ea", AT[:, :, j], E)
        np.add.at(loads[j], corner_nodes.reshape(-1), be.reshape(-1))
    return S, loads, corner_nodes, Avals


def _element_avg_gradient(chi: np.ndarray, corner_nodes: np.ndarray,
                          d: int, N: int) -> np.ndarray:
    """Element-averaged gradient of the Q1 interpolant, shape (ne, d)."""
    _, _, E = _q1_reference(d)
    h = 1.0 / N
    vals = chi[corner_nodes]            # (ne, 2^d)
    return vals @ E.T / h               # int over xi, scaled by 1/h


@dataclass(frozen=True)
class CorrectorField:
    """Mean-zero periodic part chi_alpha = w_alpha - alpha . y on the torus."""

    alpha: np.ndarray
    values: np.ndarray      # node values, shape (N,)*d
    resolution: int
    residual: float

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        v = np.asarray(self.values, dtype=float)
        a.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "values", v)
        scale = max(np.abs(v).max(), 1e-300)
        if abs(v.mean()) > 1e-10 * scale:
            raise ValueError("corrector is not mean-zero")


@dataclass(frozen=True)
class EffectiveMatrix:
    Abar: np.ndarray
    resolution: int
    residuals: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.Abar, dtype=float)
        M.flags.writeable = False
        object.__setattr__(self, "Abar", M)
        r = np.asarray(self.residuals, dtype=float)
        r.flags.writeable = False
        object.__setattr__(self, "residuals", r)


def _unit_periodize(A: CoefficientField) -> CoefficientField:
    """Reduce to a 1-periodic field; Abar is invariant under this rescale."""
    if A.period_scale == 1.0:
        return A
    s = A.period_scale
    return scale_field(A, 1.0 / s)


def _solve_one(S, b, N, d, tol, itmax):
    diag = S.diagonal()
    diag[diag <= 0] = 1.0
    inv = 1.0 / diag
    ones = np.ones(S.shape[0])
    x, its, relres = pcg(lambda v: S @ v, b, tol=tol, maxiter=itmax,
                         precond=lambda r: inv * r, deflate=ones)
    x = x - x.mean()
    return x, relres


def solve_corrector(A: CoefficientField, alpha, N: int, tol: float = 1e-10,
                    periodicity_tol: float = 1e-8) -> CorrectorField:
    """Solve the periodic cell problem for direction alpha at resolution N."""
    if N < 8:
        raise ValueError("resolution must be at least 8")
    if A.period != "lattice":
        raise ValueError("cell problems need a lattice-periodic field")
    A = _unit_periodize(A)
    dev = check_periodicity(A, sample_count=256)
    if dev > periodicity_tol:
        raise ValueError(f"field is not periodic (deviation {dev:.3e})")
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (A.d,):
        raise ValueError(f"alpha must be a vector in R^{A.d}")
    S, loads, corner_nodes, _ = _assemble(A, N)
    b = alpha @ loads
    itmax = 50 * N * max(1, A.d - 1)
    x, relres = _solve_one(S, b, N, A.d, tol, itmax)
    return CorrectorField(alpha, x.reshape((N,) * A.d), N, relres)


def effective_matrix(A: CoefficientField, N: int, tol: float = 1e-10,
                     periodicity_tol: float = 1e-8) -> EffectiveMatrix:
    """Assemble Abar column by column from the d coordinate correctors."""
    if N < 8:
        raise ValueError("resolution must be at least 8")
    if A.period != "lattice":
        raise ValueError("effective matrix needs a lattice-periodic field")
    A = _unit_periodize(A)
    dev = check_periodicity(A, sample_count=256)
    if dev > periodicity_tol:
        raise ValueError(f"field is not periodic (deviation {dev:.3e})")
    d = A.d
    S, loads, corner_nodes, Avals = _assemble(A, N)
    AT = np.swapaxes(Avals, -1, -2)
    itmax = 50 * N * max(1, d - 1)
    Abar_T = np.zeros((d, d))
    residuals = np.zeros(d)
    ne = Avals.shape[0]
    for j in range(d):
        chi, relres = _solve_one(S, loads[j], N, d, tol, itmax)
        residuals[j] = relres
        grad = _element_avg_gradient(chi, corner_nodes, d, N)
        grad[:, j] += 1.0
        flux = np.einsum("ekl,el->ek", AT, grad)
        Abar_T[:, j] = flux.mean(axis=0)
    return EffectiveMatrix(Abar_T.T, N, residuals)


def voigt_reuss_bounds(A: CoefficientField, N: int):
    """(harmonic, arithmetic) matrix means over the element samples."""
    A = _unit_periodize(A)
    Avals = _element_coefficients(A, N)
    arith = Avals.mean(axis=0)
    harm = np.linalg.inv(np.linalg.inv(Avals).mean(axis=0))
    return harm, arith


def grid_convergence(A: CoefficientField, N_list, tol: float = 1e-10):
    """Self-convergence table for Abar over increasing resolutions.

    The observed order for row k uses the Richardson ratio of successive
    matrix differences; when differences sit at solver tolerance the rate is
    reported as inf ("exact").  Requires a constant refinement ratio.
    """
    N_list = [int(N) for N in N_list]
    if sorted(N_list) != N_list or len(N_list) < 2:
        raise ValueError("N_list must be increasing with at least two entries")
    mats = [effective_matrix(A, N, tol=tol) for N in N_list]
    rows = []
    diffs = [np.linalg.norm(mats[i + 1].Abar - mats[i].Abar)
             for i in range(len(mats) - 1)]
    for i, (N, em) in enumerate(zip(N_list, mats)):
        rate = None
        if 1 <= i < len(N_list) - 0 and i < len(diffs):
            ratio = N_list[i] / N_list[i - 1]
            if diffs[i] < 1e-12 * max(1.0, np.linalg.norm(em.Abar)):
                rate = float("inf")
            elif diffs[i - 1] > 0:
                rate = float(np.log(diffs[i - 1] / diffs[i]) / np.log(ratio))
        rows.append({"N": N, "Abar": em.Abar, "rate": rate,
                     "residuals": em.residuals})
    return rows
