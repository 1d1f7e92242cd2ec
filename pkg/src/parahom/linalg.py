"""Conjugate-gradient solver used by the periodic cell problems."""

from __future__ import annotations

import numpy as np

__all__ = ["pcg", "ConvergenceError"]


class ConvergenceError(RuntimeError):
    def __init__(self, iterations, relres):
        self.iterations = iterations
        self.relres = relres
        super().__init__(
            f"CG did not reach tolerance after {iterations} iterations "
            f"(relative residual {relres:.3e})")


def pcg(matvec, b, tol=1e-10, maxiter=None, precond=None, deflate=None,
        x0=None):
    """Preconditioned conjugate gradient for SPD (or SPSD + deflation) systems.

    matvec   -- callable v -> A v
    precond  -- callable r -> M^-1 r (default identity)
    deflate  -- nullspace vector to project out of b, iterates and residuals
                (used for the constant mode of periodic problems)
    Returns (x, iterations, relres).  Raises ConvergenceError at the cap.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    maxiter = 10 * n if maxiter is None else int(maxiter)
    if deflate is not None:
        v = deflate / np.linalg.norm(deflate)

        def project(w):
            return w - v * (v @ w)
    else:
        def project(w):
            return w

    b = project(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    x = np.zeros_like(b) if x0 is None else project(np.array(x0, dtype=float))
    r = project(b - matvec(x))
    z = project(precond(r)) if precond is not None else r
    p = z.copy()
    rz = r @ z
    relres = np.linalg.norm(r) / bnorm
    for k in range(1, maxiter + 1):
        Ap = project(matvec(p))
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        relres = np.linalg.norm(r) / bnorm
        if relres <= tol:
            return project(x), k, relres
        z = project(precond(r)) if precond is not None else r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(maxiter, relres)
