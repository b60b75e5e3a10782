"""Entropic optimal transport: Sinkhorn-Knopp and Sinkhorn-Newton solvers."""

from .core import (
    DualPotentials,
    GibbsKernel,
    Residual,
    SolveConfig,
    as_histogram,
    entropic_objective,
    gibbs_kernel,
    marginals,
    normalize_histogram,
    plan_from_duals,
    residual,
    transport_cost,
)
from .linsolve import CgReport, jacobi_preconditioner, pcg_solve, project_kernel_complement
from .newton import JacobianOperator, NewtonState, jacobian_apply, newton_solve
from .record import ConvergenceRecord
from .sinkhorn import ScalingVectors, sinkhorn_solve, sinkhorn_step

__version__ = "0.1.0"
