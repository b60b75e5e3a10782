"""Sinkhorn-Knopp iteration in scaling variables ``u = exp(-f/eps)``, ``v = exp(-g/eps)``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import GibbsKernel, SolveConfig, as_histogram
from .errors import DegenerateKernelError, InvalidConfigError, InvalidInputError, ShapeError
from .record import ConvergenceRecord


@dataclass(frozen=True)
class ScalingVectors:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64).ravel()
        v = np.asarray(self.v, dtype=np.float64).ravel()
        for name, x in (("u", u), ("v", v)):
            if not np.all(np.isfinite(x)) or np.any(x <= 0):
                raise InvalidInputError(f"scaling vector {name} must be positive and finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def ones(cls, n, m):
        return cls(np.ones(n), np.ones(m))

    def plan(self, K: GibbsKernel):
        return self.u[:, None] * K.entries * self.v[None, :]


def _divide(num, den, what):
    if np.any(den == 0):
        raise DegenerateKernelError(
            f"{what} has a zero entry; the kernel is too underflowed for this epsilon"
        )
    return num / den


def _check_shapes(K, a, b):
    if K.shape != (a.size, b.size):
        raise ShapeError(f"kernel shape {K.shape} does not match histograms ({a.size}, {b.size})")


def sinkhorn_step(K: GibbsKernel, a, b, s: ScalingVectors) -> ScalingVectors:
    """One full sweep: fit the row marginal, then the column marginal."""
    u = _divide(a, K.matvec(s.v), "K v")
    v = _divide(b, K.rmatvec(u), "K^T u")
    return ScalingVectors(u, v)


def parallel_update_step(K: GibbsKernel, a, b, s: ScalingVectors) -> ScalingVectors:
    """Jacobi-style variant: both scalings are updated from the *old* iterate.

    Experimental diagnostic. It is the Newton step for the scaling equations
    with the off-diagonal Jacobian blocks dropped, and does not converge in
    general.
    """
    u = _divide(a, K.matvec(s.v), "K v")
    v = _divide(b, K.rmatvec(s.u), "K^T u")
    return ScalingVectors(u, v)


parallel_update_step.experimental = True


def sinkhorn_solve(K: GibbsKernel, a, b, config: SolveConfig, init=None, C=None,
                   reference_plan=None):
    """Run Sinkhorn-Knopp until the marginal violation drops below ``config.outer_tol``.

    The violation is measured once per sweep on ``diag(u) K diag(v)``. The
    product ``K v`` needed for it is reused by the next sweep, so every
    sweep costs one product with ``K`` and one with ``K^T``.

    Parameters
    ----------
    K : GibbsKernel
    a, b : array-like
        Source and target histograms.
    config : SolveConfig
        ``solver_kind`` must be ``"sinkhorn"``.
    init : ScalingVectors, optional
        Starting point, ``u = v = 1`` by default.
    C : ndarray, optional
        Cost matrix; when given the unregularized cost is tracked and
        ``cost_error`` is filled in.
    reference_plan : ndarray, optional
        When given, ``plan_error_l1`` is ``||P^k - reference_plan||_1``.

    Returns
    -------
    scalings : ScalingVectors
    plan : ndarray
    record : ConvergenceRecord
        Not converging within the cap is reported through
        ``record.converged``, not an exception.
    """
    if config.solver_kind != "sinkhorn":
        raise InvalidConfigError(f"sinkhorn_solve needs solver_kind='sinkhorn', got {config.solver_kind!r}")
    a = as_histogram(a)
    b = as_histogram(b)
    _check_shapes(K, a, b)
    s = init if init is not None else ScalingVectors.ones(a.size, b.size)
    u, v = s.u.copy(), s.v.copy()
    KC = K.entries * C if C is not None else None

    rec = ConvergenceRecord(solver="sinkhorn")

    def log(k, wall, viol):
        cost = float(u @ (KC @ v)) if KC is not None else None
        perr = None
        if reference_plan is not None:
            perr = float(np.abs(u[:, None] * K.entries * v[None, :] - reference_plan).sum())
        rec.append(k, k, wall, viol, cost, perr)

    elapsed = 0.0
    t0 = time.perf_counter()
    Kv = K.matvec(v)
    col = v * K.rmatvec(u)
    viol = max(np.max(np.abs(a - u * Kv)), np.max(np.abs(b - col)))
    elapsed += time.perf_counter() - t0
    log(0, elapsed, viol)

    k = 0
    while viol >= config.outer_tol and k < config.max_outer_iters:
        t0 = time.perf_counter()
        u = _divide(a, Kv, "K v")
        KTu = K.rmatvec(u)
        v = _divide(b, KTu, "K^T u")
        Kv = K.matvec(v)
        viol = max(np.max(np.abs(a - u * Kv)), np.max(np.abs(b - v * KTu)))
        k += 1
        elapsed += time.perf_counter() - t0
        log(k, elapsed, viol)

    rec.converged = bool(viol < config.outer_tol)
    rec.finalize()
    return ScalingVectors(u, v), u[:, None] * K.entries * v[None, :], rec
