"""Preconditioned CG for the singular, consistent Newton system.

The Newton matrix is symmetric positive semi-definite with the one
dimensional kernel spanned by ``q = (1_n, -1_m)``. CG started at zero stays
in the orthogonal complement in exact arithmetic; in floating point the
iterate is re-projected periodically and on exit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_plan, check_epsilon
from .errors import (
    DegenerateKernelError,
    InconsistentSystemError,
    InvalidPreconditionerError,
    ShapeError,
)

CONSISTENCY_RTOL = 1e-10
REPROJECT_EVERY = 50


@dataclass(frozen=True)
class CgReport:
    iterations: int
    final_relative_residual: float
    breakdown: bool = False
    hit_cap: bool = False


def kernel_defect(x, n):
    """``<x, q>`` for ``q = (1_n, -1_m)``."""
    return x[:n].sum() - x[n:].sum()


def _project(x, n):
    c = kernel_defect(x, n) / x.size
    out = x.copy()
    out[:n] -= c
    out[n:] += c
    return out


def project_kernel_complement(x):
    """Remove the component of ``(x_f, x_g)`` along ``(1_n, -1_m)``."""
    xf, xg = (np.asarray(v, dtype=np.float64).ravel() for v in x)
    n = xf.size
    y = _project(np.concatenate([xf, xg]), n)
    return y[:n], y[n:]


def jacobi_preconditioner(P, epsilon):
    """Diagonal of the Newton matrix: row and column sums of the plan over epsilon."""
    P = as_plan(P)
    epsilon = check_epsilon(epsilon)
    rows = P.sum(axis=1)
    cols = P.sum(axis=0)
    if np.any(rows <= 0) or np.any(cols <= 0):
        raise DegenerateKernelError("plan has a zero row or column sum")
    return rows / epsilon, cols / epsilon


def pcg_solve(op, rhs, tol, max_iters, preconditioner=None, consistency_atol=0.0):
    """Solve ``J (df, dg) = rhs`` for the minimum-norm solution.

    Parameters
    ----------
    op : object
        Provides ``apply(df, dg) -> (yf, yg)``; symmetric PSD with kernel
        spanned by ``(1_n, -1_m)``.
    rhs : tuple of ndarray
        The two blocks of the right-hand side.
    tol : float
        Stop once ``sqrt(r^T z / r0^T z0)`` (preconditioned residual
        relative to the initial one) is at most ``tol``.
    max_iters : int
        Iteration cap. Hitting it is not an error; the iterate with the
        smallest preconditioned residual is returned and ``hit_cap`` set.
    preconditioner : tuple of ndarray, optional
        Strictly positive diagonal blocks. Identity when omitted.
    consistency_atol : float
        Absolute slack added to the consistency threshold
        ``1e-10 * ||rhs||_inf``, to absorb rounding in how ``rhs`` was formed.

    Returns
    -------
    (df, dg) : tuple of ndarray
    report : CgReport
    """
    rf, rg = (np.asarray(v, dtype=np.float64).ravel() for v in rhs)
    n, m = rf.size, rg.size
    b = np.concatenate([rf, rg])

    if preconditioner is None:
        dinv = np.ones(n + m)
    else:
        pf, pg = (np.asarray(v, dtype=np.float64).ravel() for v in preconditioner)
        if pf.size != n or pg.size != m:
            raise ShapeError("preconditioner blocks do not match the right-hand side")
        d = np.concatenate([pf, pg])
        if not np.all(d > 0):
            raise InvalidPreconditionerError("preconditioner must be strictly positive")
        dinv = 1.0 / d

    bnorm = np.max(np.abs(b)) if b.size else 0.0
    if bnorm == 0.0:
        return (np.zeros(n), np.zeros(m)), CgReport(0, 0.0)
    defect = abs(kernel_defect(b, n))
    if defect > CONSISTENCY_RTOL * bnorm + consistency_atol:
        raise InconsistentSystemError(
            f"rhs has kernel component {defect:.3e} (||rhs||_inf = {bnorm:.3e})"
        )
    b = _project(b, n)

    def apply(x):
        yf, yg = op.apply(x[:n], x[n:])
        return np.concatenate([yf, yg])

    x = np.zeros(n + m)
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    rz0 = rz
    best_x, best_rel = x.copy(), 1.0
    rel = 1.0
    it = 0
    breakdown = False
    while rel > tol and it < max_iters:
        Jp = apply(p)
        pJp = p @ Jp
        # rounding floor for the curvature along p
        if pJp <= 1e-14 * np.abs(p) @ np.abs(Jp):
            breakdown = True
            break
        alpha = rz / pJp
        x += alpha * p
        r -= alpha * Jp
        it += 1
        if it % REPROJECT_EVERY == 0:
            x = _project(x, n)
        z = dinv * r
        rz_new = r @ z
        rel = np.sqrt(max(rz_new, 0.0) / rz0)
        if rel < best_rel:
            best_x, best_rel = x.copy(), rel
        p = z + (rz_new / rz) * p
        rz = rz_new

    hit_cap = rel > tol and not breakdown
    if hit_cap or breakdown:
        x, rel = best_x, best_rel
    x = _project(x, n)
    return (x[:n], x[n:]), CgReport(it, float(rel), breakdown, hit_cap)
