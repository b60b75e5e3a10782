"""Sinkhorn-Newton: Newton's method on the marginal defects in log-domain dual variables.

Two equivalent forms are provided. The primal form keeps the plan ``P^k``
and updates it multiplicatively; the dual form keeps ``(f^k, g^k)`` and
only ever applies ``K`` and ``K^T`` to vectors.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    DualPotentials,
    GibbsKernel,
    Residual,
    SolveConfig,
    as_histogram,
    as_plan,
    check_epsilon,
    plan_from_duals,
)
from .errors import (
    DegenerateKernelError,
    InvalidConfigError,
    NewtonStepFailed,
    ShapeError,
    StepOverflowError,
)
from .linsolve import CgReport, pcg_solve
from .record import ConvergenceRecord

_EPS = np.finfo(np.float64).eps


class JacobianOperator:
    """The Newton matrix ``(1/eps) [[diag(P1), P], [P^T, diag(P^T 1)]]``.

    Built either from an explicit plan (``from_plan``) or matrix-free from
    the kernel and the current potentials (``from_duals``).
    """

    def __init__(self, epsilon, row_sums, col_sums, plan=None, kernel=None, u=None, v=None):
        self.epsilon = check_epsilon(epsilon)
        self.row_sums = row_sums
        self.col_sums = col_sums
        self.plan = plan
        self.kernel = kernel
        self.u = u
        self.v = v

    @classmethod
    def from_plan(cls, P, epsilon):
        P = as_plan(P)
        return cls(epsilon, P.sum(axis=1), P.sum(axis=0), plan=P)

    @classmethod
    def from_duals(cls, K: GibbsKernel, duals: DualPotentials):
        eps = K.epsilon
        with np.errstate(over="ignore"):
            u = np.exp(-duals.f / eps)
            v = np.exp(-duals.g / eps)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise StepOverflowError("exp(-potential/epsilon) overflowed")
        rows = u * K.matvec(v)
        cols = v * K.rmatvec(u)
        return cls(eps, rows, cols, kernel=K, u=u, v=v)

    @property
    def shape(self):
        n, m = self.row_sums.size, self.col_sums.size
        return (n + m, n + m)

    def apply(self, df, dg):
        df = np.asarray(df, dtype=np.float64)
        dg = np.asarray(dg, dtype=np.float64)
        if df.shape != self.row_sums.shape or dg.shape != self.col_sums.shape:
            raise ShapeError("direction does not match the operator blocks")
        if self.plan is not None:
            Pdg = self.plan @ dg
            PTdf = self.plan.T @ df
        else:
            Pdg = self.u * self.kernel.matvec(self.v * dg)
            PTdf = self.v * self.kernel.rmatvec(self.u * df)
        eps = self.epsilon
        return (self.row_sums * df + Pdg) / eps, (self.col_sums * dg + PTdf) / eps

    def diagonal(self):
        if np.any(self.row_sums <= 0) or np.any(self.col_sums <= 0):
            raise DegenerateKernelError("plan has a zero row or column sum")
        return self.row_sums / self.epsilon, self.col_sums / self.epsilon

    def to_dense(self):
        """Dense matrix, for tests and small diagnostics."""
        if self.plan is not None:
            P = self.plan
        else:
            P = self.u[:, None] * self.kernel.entries * self.v[None, :]
        top = np.hstack([np.diag(self.row_sums), P])
        bottom = np.hstack([P.T, np.diag(self.col_sums)])
        return np.vstack([top, bottom]) / self.epsilon


def jacobian_apply(J: JacobianOperator, df, dg):
    return J.apply(df, dg)


@dataclass(frozen=True)
class NewtonState:
    """Iterate of either form: ``plan`` (primal) or ``duals`` (dual) is set."""

    plan: np.ndarray | None = None
    duals: DualPotentials | None = None
    iteration: int = 0
    cumulative_cg_iters: int = 0
    last_report: CgReport | None = None
    clipped: bool = False

    def operator(self, epsilon=None, K=None):
        if self.plan is not None:
            return JacobianOperator.from_plan(self.plan, epsilon if K is None else K.epsilon)
        if K is None:
            raise InvalidConfigError("dual-form state needs the kernel")
        return JacobianOperator.from_duals(K, self.duals)


def newton_rhs(state: NewtonState, a, b, K=None) -> Residual:
    """``(a^k - a, b^k - b)``, i.e. minus the root-finding residual."""
    if state.plan is not None:
        rows, cols = state.plan.sum(axis=1), state.plan.sum(axis=0)
    else:
        J = state.operator(K=K)
        rows, cols = J.row_sums, J.col_sums
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if rows.shape != a.shape or cols.shape != b.shape:
        raise ShapeError("state does not match the histograms")
    return Residual(rows - a, cols - b)


def _solve_newton_system(J, a, b, config):
    rows, cols = J.row_sums, J.col_sums
    diag = J.diagonal()
    rhs = (rows - a, cols - b)
    n, m = rows.size, cols.size
    # <rhs, (1,-1)> is zero up to summation rounding of the two total masses
    atol = 8 * (n + m) * _EPS * max(1.0, rows.sum(), a.sum())
    delta, report = pcg_solve(
        J, rhs, config.cg_tol, config.cg_max_iters, preconditioner=diag, consistency_atol=atol
    )
    if report.breakdown and report.final_relative_residual >= 1.0:
        raise NewtonStepFailed(f"CG broke down without progress: {report}")
    return delta, report


def _clip(df, dg, epsilon, max_ratio):
    size = max(np.max(np.abs(df)), np.max(np.abs(dg))) / epsilon
    if size > max_ratio:
        s = max_ratio / size
        return df * s, dg * s, True
    return df, dg, False


def _exp_scale(d, epsilon):
    with np.errstate(over="ignore"):
        s = np.exp(-d / epsilon)
    if not np.all(np.isfinite(s)):
        raise StepOverflowError("Newton update overflowed exp(-delta/epsilon)")
    return s


def newton_step_primal(state: NewtonState, a, b, config: SolveConfig, J=None) -> NewtonState:
    """One step of the primal form: ``P <- diag(e^{-df/eps}) P diag(e^{-dg/eps})``."""
    eps = config.epsilon
    if J is None:
        J = JacobianOperator.from_plan(state.plan, eps)
    (df, dg), report = _solve_newton_system(J, a, b, config)
    df, dg, clipped = _clip(df, dg, eps, config.max_step_ratio)
    P = _exp_scale(df, eps)[:, None] * state.plan * _exp_scale(dg, eps)[None, :]
    return NewtonState(
        plan=P,
        iteration=state.iteration + 1,
        cumulative_cg_iters=state.cumulative_cg_iters + report.iterations,
        last_report=report,
        clipped=clipped,
    )


def newton_step_dual(state: NewtonState, a, b, K: GibbsKernel, config: SolveConfig,
                     J=None) -> NewtonState:
    """One step of the dual form: ``f <- f + df``, ``g <- g + dg``; no plan is formed."""
    if J is None:
        J = JacobianOperator.from_duals(K, state.duals)
    (df, dg), report = _solve_newton_system(J, a, b, config)
    df, dg, clipped = _clip(df, dg, K.epsilon, config.max_step_ratio)
    duals = DualPotentials(state.duals.f + df, state.duals.g + dg)
    return NewtonState(
        duals=duals,
        iteration=state.iteration + 1,
        cumulative_cg_iters=state.cumulative_cg_iters + report.iterations,
        last_report=report,
        clipped=clipped,
    )


def newton_solve(K: GibbsKernel, a, b, config: SolveConfig, init=None, C=None,
                 reference_plan=None, materialize_plan=True):
    """Run Sinkhorn-Newton until the marginal violation drops below ``config.outer_tol``.

    ``config.solver_kind`` selects the primal (``"newton_primal"``) or the
    matrix-free dual (``"newton_dual"``) form. Both start from ``f = g = 0``
    (so ``P^0 = K``) unless ``init`` (a plan or a DualPotentials) is given.

    Returns ``(state, plan, record)``. The dual form only materializes the
    plan once, after the loop, and not at all with ``materialize_plan=False``
    (``plan`` is then ``None``). Running out of outer iterations is reported
    through ``record.converged``.
    """
    kind = config.solver_kind
    if kind not in ("newton_primal", "newton_dual"):
        raise InvalidConfigError(f"newton_solve needs a newton solver_kind, got {kind!r}")
    if abs(K.epsilon - config.epsilon) > 1e-15 * config.epsilon:
        raise InvalidConfigError("kernel epsilon differs from config epsilon")
    a = as_histogram(a)
    b = as_histogram(b)
    if K.shape != (a.size, b.size):
        raise ShapeError(f"kernel shape {K.shape} does not match histograms ({a.size}, {b.size})")
    if np.any(K.entries.max(axis=1) <= 0) or np.any(K.entries.max(axis=0) <= 0):
        raise DegenerateKernelError("kernel has an all-zero row or column")

    dual = kind == "newton_dual"
    if dual:
        duals = init if isinstance(init, DualPotentials) else DualPotentials.zeros(a.size, b.size)
        state = NewtonState(duals=duals)
    else:
        P0 = np.array(init if init is not None else K.entries, dtype=np.float64)
        state = NewtonState(plan=P0)
    KC = K.entries * C if (C is not None and dual) else None

    rec = ConvergenceRecord(solver=kind)

    def log(J, wall, viol):
        cost = perr = None
        if C is not None:
            cost = float(J.u @ (KC @ J.v)) if dual else float(np.vdot(C, state.plan))
        if reference_plan is not None:
            P = state.plan if not dual else J.u[:, None] * K.entries * J.v[None, :]
            perr = float(np.abs(P - reference_plan).sum())
        rec.append(state.iteration, state.cumulative_cg_iters, wall, viol, cost, perr)

    elapsed = 0.0
    while True:
        t0 = time.perf_counter()
        J = state.operator(K=K) if dual else JacobianOperator.from_plan(state.plan, K.epsilon)
        viol = max(np.max(np.abs(J.row_sums - a)), np.max(np.abs(J.col_sums - b)))
        elapsed += time.perf_counter() - t0
        log(J, elapsed, viol)
        if viol < config.outer_tol or state.iteration >= config.max_outer_iters:
            break
        t0 = time.perf_counter()
        if dual:
            state = newton_step_dual(state, a, b, K, config, J=J)
        else:
            state = newton_step_primal(state, a, b, config, J=J)
        elapsed += time.perf_counter() - t0
        rec.cg_reports.append(state.last_report)
        rec.clipped_steps += int(state.clipped)

    rec.converged = bool(viol < config.outer_tol)
    rec.finalize()
    if dual:
        plan = plan_from_duals(K, state.duals) if materialize_plan else None
    else:
        plan = state.plan
    return state, plan, rec
