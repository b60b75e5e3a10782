"""Domain types and the plan/marginal/residual algebra shared by all solvers.

Histograms, cost matrices and transport plans are plain float64 ndarrays;
the helpers here validate them. Objects that carry more than one array
(kernel + epsilon, dual pair, residual blocks, solver settings) are frozen
dataclasses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateHistogramError,
    InvalidConfigError,
    InvalidInputError,
    NumericOverflowError,
    ShapeError,
)

logger = logging.getLogger(__name__)

MASS_TOL = 1e-12

SOLVER_KINDS = ("sinkhorn", "newton_primal", "newton_dual")


def as_histogram(values, normalize=True) -> np.ndarray:
    """Validate a probability vector.

    Parameters
    ----------
    values : array-like, shape (n,)
        Nonnegative masses.
    normalize : bool
        If the total mass deviates from 1 by more than ``MASS_TOL`` the
        vector is rescaled (``True``) or rejected (``False``).
    """
    a = np.array(values, dtype=np.float64).ravel()
    if a.size == 0:
        raise ShapeError("histogram is empty")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("histogram has non-finite entries")
    if np.any(a < 0):
        raise InvalidInputError("histogram has negative entries")
    total = a.sum()
    if total <= 0:
        raise DegenerateHistogramError("histogram has zero total mass")
    if abs(total - 1.0) > MASS_TOL:
        if not normalize:
            raise InvalidInputError(f"histogram mass {total!r} differs from 1")
        logger.debug("renormalizing histogram with mass %r", total)
        a = a / total
    return a


def normalize_histogram(values) -> np.ndarray:
    """Divide nonnegative masses by their sum."""
    return as_histogram(values, normalize=True)


def as_cost_matrix(C) -> np.ndarray:
    C = np.array(C, dtype=np.float64)
    if C.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-D, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise InvalidInputError("cost matrix has non-finite entries")
    if np.any(C < 0):
        raise InvalidInputError("cost matrix has negative entries")
    return C


def as_plan(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise ShapeError(f"transport plan must be 2-D, got shape {P.shape}")
    if np.any(P < 0):
        raise InvalidInputError("transport plan has negative entries")
    return P


def check_epsilon(epsilon) -> float:
    epsilon = float(epsilon)
    if not (epsilon > 0 and np.isfinite(epsilon)):
        raise InvalidConfigError(f"epsilon must be positive and finite, got {epsilon!r}")
    return epsilon


@dataclass(frozen=True)
class GibbsKernel:
    """``exp(-C/epsilon)`` together with the regularization that produced it."""

    entries: np.ndarray
    epsilon: float

    @property
    def shape(self):
        return self.entries.shape

    def matvec(self, v):
        return self.entries @ v

    def rmatvec(self, u):
        return self.entries.T @ u


def gibbs_kernel(C, epsilon, floor=0.0) -> GibbsKernel:
    """Build the Gibbs kernel of a cost matrix.

    Entries that underflow double precision become exactly zero. ``floor``
    (default 0) raises every entry to at least that value, for callers that
    need a strictly positive kernel.
    """
    epsilon = check_epsilon(epsilon)
    C = as_cost_matrix(C)
    K = np.exp(-C / epsilon)
    if floor > 0:
        K = np.maximum(K, floor)
    K.setflags(write=False)
    return GibbsKernel(K, epsilon)


@dataclass(frozen=True)
class DualPotentials:
    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.f, dtype=np.float64).ravel()
        g = np.asarray(self.g, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise InvalidInputError("dual potentials must be finite")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "g", g)

    @classmethod
    def zeros(cls, n, m):
        return cls(np.zeros(n), np.zeros(m))


def _scaling(x, epsilon):
    with np.errstate(over="ignore"):
        s = np.exp(-x / epsilon)
    if not np.all(np.isfinite(s)):
        raise NumericOverflowError("exp(-potential/epsilon) overflowed")
    return s


def plan_from_duals(K: GibbsKernel, duals: DualPotentials) -> np.ndarray:
    """``diag(exp(-f/eps)) K diag(exp(-g/eps))``."""
    n, m = K.shape
    if duals.f.shape != (n,) or duals.g.shape != (m,):
        raise ShapeError(
            f"duals of lengths {duals.f.size}, {duals.g.size} do not fit kernel {K.shape}"
        )
    u = _scaling(duals.f, K.epsilon)
    v = _scaling(duals.g, K.epsilon)
    with np.errstate(over="ignore", invalid="ignore"):
        P = u[:, None] * K.entries * v[None, :]
    if not np.all(np.isfinite(P)):
        raise NumericOverflowError("transport plan overflowed")
    return P


def marginals(P):
    """Row sums and column sums of a plan."""
    P = as_plan(P)
    return P.sum(axis=1), P.sum(axis=0)


@dataclass(frozen=True)
class Residual:
    """Marginal defects ``(a - P 1, b - P^T 1)``."""

    row_defect: np.ndarray
    col_defect: np.ndarray

    @property
    def violation(self) -> float:
        """Maximal constraint violation in the infinity norm."""
        return max(np.max(np.abs(self.row_defect)), np.max(np.abs(self.col_defect)))

    def stacked(self):
        return np.concatenate([self.row_defect, self.col_defect])

    def __neg__(self):
        return Residual(-self.row_defect, -self.col_defect)


def residual(a, b, P) -> Residual:
    P = as_plan(P)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if P.shape != (a.size, b.size):
        raise ShapeError(f"plan shape {P.shape} does not match histograms ({a.size}, {b.size})")
    row, col = marginals(P)
    return Residual(a - row, b - col)


def transport_cost(C, P) -> float:
    """Frobenius product ``<C, P>``."""
    C = np.asarray(C, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if C.shape != P.shape:
        raise ShapeError(f"cost shape {C.shape} != plan shape {P.shape}")
    return float(np.vdot(C, P))


def entropic_objective(C, P, epsilon) -> float:
    """``<C,P> + eps * sum P (log P - 1)`` with the convention ``0 log 0 = 0``."""
    P = np.asarray(P, dtype=np.float64)
    if np.any(P < 0):
        raise InvalidInputError("transport plan has negative entries")
    cost = transport_cost(C, P)
    pos = P[P > 0]
    return cost + float(epsilon) * float(np.sum(pos * (np.log(pos) - 1.0)))


@dataclass(frozen=True)
class SolveConfig:
    epsilon: float
    outer_tol: float = 1e-13
    max_outer_iters: int = 1000
    cg_tol: float = 1e-13
    cg_max_iters: int = 34
    solver_kind: str = "newton_primal"
    max_step_ratio: float = 50.0

    def __post_init__(self):
        check_epsilon(self.epsilon)
        for name in ("outer_tol", "cg_tol", "max_step_ratio"):
            val = getattr(self, name)
            if not val > 0:
                raise InvalidConfigError(f"{name} must be positive, got {val!r}")
        for name in ("max_outer_iters", "cg_max_iters"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise InvalidConfigError(f"{name} must be an integer >= 1, got {val!r}")
        if self.solver_kind not in SOLVER_KINDS:
            raise InvalidConfigError(
                f"solver_kind must be one of {SOLVER_KINDS}, got {self.solver_kind!r}"
            )
