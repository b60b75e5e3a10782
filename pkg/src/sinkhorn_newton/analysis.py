"""Theory certificates (omega bound, Varah estimate) and convergence metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_plan, check_epsilon
from .errors import HypothesisViolatedError, NotEnoughPointsError, UnsupportedError
from .linsolve import pcg_solve, project_kernel_complement
from .newton import JacobianOperator
from .record import ConvergenceRecord, IterationRow  # noqa: F401  (re-exported)


@dataclass(frozen=True)
class OmegaCertificate:
    """Upper and lower bounds for the affine-covariant Lipschitz constant omega.

    The upper bound holds in the sup-norm for perturbations of size at most
    1; that proviso is not (and cannot be) checked here.
    """

    epsilon: float
    min_plan_entry: float
    max_row_sum: float
    max_col_sum: float
    omega_upper: float
    omega_lower: float


def omega_bound(P, epsilon) -> OmegaCertificate:
    """``(e^{1/eps} - 1) (1 + 2 e^{1/eps} max(|P1|_inf, |P^T 1|_inf) / min P)``."""
    P = as_plan(P)
    epsilon = check_epsilon(epsilon)
    if P.shape[0] != P.shape[1]:
        raise UnsupportedError("the omega bound is only available for square plans")
    pmin = float(P.min())
    if not pmin > 0:
        raise HypothesisViolatedError("omega bound needs a strictly positive plan")
    rmax = float(P.sum(axis=1).max())
    cmax = float(P.sum(axis=0).max())
    e = np.exp(1.0 / epsilon)
    lower = float(np.expm1(1.0 / epsilon))
    upper = lower * (1.0 + 2.0 * e * max(rmax, cmax) / pmin)
    return OmegaCertificate(epsilon, pmin, rmax, cmax, float(upper), lower)


def remark_identity_check(P, epsilon, phi, cg_tol=1e-14, cg_max_iters=None) -> float:
    """Check the explicit value of ``J(y)^{-1} [J(y) - J(eta)] (y - eta)`` for ``y - eta = (phi, 0)``.

    Moving the row potential by ``-phi`` multiplies row ``i`` of the plan by
    ``exp(phi_i/eps)``, and the expression then equals
    ``((1 - exp(phi/eps)) * phi, 0)`` modulo the Jacobian kernel. Its sup
    norm is ``(exp(|phi|/eps) - 1)|phi|`` entrywise, which is what forces
    ``omega >= e^{1/eps} - 1``.

    The product is formed from the two Jacobians, solved with PCG, and the
    sup-norm distance to the closed form (after projecting both onto the
    kernel complement) is returned.
    """
    P = as_plan(P)
    epsilon = check_epsilon(epsilon)
    n, m = P.shape
    if n != m:
        raise UnsupportedError("the identity is stated for square plans")
    if not P.min() > 0:
        raise HypothesisViolatedError("identity check needs a strictly positive plan")
    phi = np.asarray(phi, dtype=np.float64).ravel()
    if phi.size != n:
        raise ValueError("phi must have one entry per plan row")
    growth = np.exp(phi / epsilon)
    if not np.all(np.isfinite(growth)):
        raise HypothesisViolatedError("phi/epsilon too large; exp overflows")

    J_y = JacobianOperator.from_plan(P, epsilon)
    J_eta = JacobianOperator.from_plan(growth[:, None] * P, epsilon)
    zeros = np.zeros(m)
    yf, yg = J_y.apply(phi, zeros)
    ef, eg = J_eta.apply(phi, zeros)
    rhs = (yf - ef, yg - eg)
    if cg_max_iters is None:
        cg_max_iters = 10 * (n + m)
    (xf, xg), _ = pcg_solve(J_y, rhs, cg_tol, cg_max_iters, preconditioner=J_y.diagonal())
    wf, wg = project_kernel_complement((-np.expm1(phi / epsilon) * phi, zeros))
    return float(max(np.max(np.abs(xf - wf)), np.max(np.abs(xg - wg))))


def varah_certificate(B) -> float:
    """Varah's bound ``||B^{-1}||_inf <= 1 / min_i (|B_ii| - sum_{j != i} |B_ij|)``."""
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ValueError("B must be square")
    absB = np.abs(B)
    diag = np.diag(absB)
    margin = diag - (absB.sum(axis=1) - diag)
    mmin = margin.min()
    if not mmin > 0:
        raise HypothesisViolatedError("matrix is not strictly diagonally dominant")
    return float(1.0 / mmin)


def shifted_saddle_matrix(P, delta) -> np.ndarray:
    """``A + delta q q^T`` with ``A = [[diag(P1), P], [P^T, diag(P^T 1)]]``, ``q = (1, -1)``.

    ``A`` is the Newton matrix without the ``1/eps`` factor; the rank-one
    shift removes its kernel. With ``delta = min P`` every row has
    dominance margin exactly ``2 delta``.
    """
    P = as_plan(P)
    n, m = P.shape
    if n != m:
        raise UnsupportedError("shifted saddle matrix is only defined for square plans")
    if not delta > 0:
        raise ValueError("delta must be positive")
    A = np.block([[np.diag(P.sum(axis=1)), P], [P.T, np.diag(P.sum(axis=0))]])
    q = np.concatenate([np.ones(n), -np.ones(n)])
    return A + delta * np.outer(q, q)


ORDER_FIT_MAX_POINTS = 6
ORDER_FIT_CEILING = 1e-1


def convergence_order(record) -> float:
    """Estimate the convergence order from a violation history.

    Fits ``log v_{k+1} = p log v_k + c`` by least squares over the last
    (up to six) violations in ``(0, 0.1)`` and returns the slope ``p``.
    ``record`` is a ConvergenceRecord or a plain sequence of violations.
    """
    v = record.violations if isinstance(record, ConvergenceRecord) else np.asarray(record, float)
    v = v[(v > 0) & (v < ORDER_FIT_CEILING)]
    if v.size < 4:
        raise NotEnoughPointsError(f"need at least 4 violations below 0.1, got {v.size}")
    v = v[-ORDER_FIT_MAX_POINTS:]
    x, y = np.log(v[:-1]), np.log(v[1:])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)

