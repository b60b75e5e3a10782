import math
import tracemalloc

import numpy as np
import pytest

from sinkhorn_newton.core import DualPotentials, SolveConfig, gibbs_kernel, plan_from_duals
from sinkhorn_newton.errors import DegenerateKernelError, InvalidConfigError
from sinkhorn_newton.newton import (
    JacobianOperator,
    NewtonState,
    jacobian_apply,
    newton_rhs,
    newton_solve,
    newton_step_dual,
    newton_step_primal,
)
from sinkhorn_newton.problems import bump_pair_1d, gaussian_pair_2d, squared_euclidean_cost

from conftest import E1, P11_STAR, random_plan

Q = lambda n, m: (np.ones(n), -np.ones(m))  # noqa: E731


def F(K, a, b, f, g):
    """Root-finding residual written out from its definition."""
    u = np.exp(-f / K.epsilon)
    v = np.exp(-g / K.epsilon)
    return np.concatenate([a - u * (K.entries @ v), b - v * (K.entries.T @ u)])


def random_instance(rng, n, m, eps=None):
    eps = rng.uniform(0.3, 2.0) if eps is None else eps
    K = gibbs_kernel(rng.uniform(0, 1, (n, m)), eps)
    duals = DualPotentials(rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, m))
    a = rng.uniform(0.1, 1, n)
    b = rng.uniform(0.1, 1, m)
    return K, duals, a / a.sum(), b / b.sum()


def test_jacobian_kernel_vector():
    J = JacobianOperator.from_plan(np.full((2, 2), 0.25), 1.0)
    yf, yg = jacobian_apply(J, *Q(2, 2))
    assert not yf.any() and not yg.any()


def test_jacobian_direct_substitution():
    J = JacobianOperator.from_plan(np.full((2, 2), 0.25), 1.0)
    yf, yg = J.apply(np.array([1.0, 0.0]), np.zeros(2))
    np.testing.assert_allclose(yf, [0.5, 0.0])
    np.testing.assert_allclose(yg, [0.25, 0.25])


@pytest.mark.parametrize("seed", range(5))
def test_quadratic_form_matches_double_sum(seed):
    rng = np.random.default_rng(seed)
    P = random_plan(rng, 3, 4)
    eps = 0.37
    x, y = rng.normal(size=3), rng.normal(size=4)
    J = JacobianOperator.from_plan(P, eps)
    yf, yg = J.apply(x, y)
    quad = x @ yf + y @ yg
    direct = sum(P[i, j] * (x[i] + y[j]) ** 2 for i in range(3) for j in range(4)) / eps
    assert quad == pytest.approx(direct, rel=1e-12)
    assert quad >= 0


@pytest.mark.parametrize("seed", range(5))
def test_jacobian_symmetric(seed):
    rng = np.random.default_rng(seed)
    K, duals, _, _ = random_instance(rng, 4, 6)
    for J in (JacobianOperator.from_plan(plan_from_duals(K, duals), K.epsilon),
              JacobianOperator.from_duals(K, duals)):
        x = (rng.normal(size=4), rng.normal(size=6))
        y = (rng.normal(size=4), rng.normal(size=6))
        Jx, Jy = J.apply(*x), J.apply(*y)
        lhs = Jx[0] @ y[0] + Jx[1] @ y[1]
        rhs = x[0] @ Jy[0] + x[1] @ Jy[1]
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_kernel_is_exactly_the_gauge_direction(rng):
    P = random_plan(rng, 4, 5)
    M = JacobianOperator.from_plan(P, 0.5).to_dense()
    w, V = np.linalg.eigh(M)
    assert abs(w[0]) < 1e-12 * w[-1]
    assert w[1] > 1e-6 * w[-1]
    q = np.concatenate(Q(4, 5)) / 3.0
    null = V[:, 0]
    # projection residual of the null vector onto span{q}
    assert np.linalg.norm(null - (null @ q) * q) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 7, size=2)
    K, duals, a, b = random_instance(rng, n, m)
    y = np.concatenate([duals.f, duals.g])
    d = rng.normal(size=n + m)
    h = 1e-6 * (1 + np.abs(y).max())
    fd = (F(K, a, b, duals.f + h * d[:n], duals.g + h * d[n:])
          - F(K, a, b, duals.f - h * d[:n], duals.g - h * d[n:])) / (2 * h)
    yf, yg = JacobianOperator.from_duals(K, duals).apply(d[:n], d[n:])
    Jd = np.concatenate([yf, yg])
    assert np.abs(fd - Jd).max() <= 1e-5 * np.abs(Jd).max()


def test_dual_and_primal_operator_agree(rng):
    K, duals, _, _ = random_instance(rng, 5, 3)
    Jp = JacobianOperator.from_plan(plan_from_duals(K, duals), K.epsilon)
    Jd = JacobianOperator.from_duals(K, duals)
    x = (rng.normal(size=5), rng.normal(size=3))
    for u, v in zip(Jp.apply(*x), Jd.apply(*x)):
        np.testing.assert_allclose(u, v, rtol=1e-13)
    np.testing.assert_allclose(Jp.to_dense(), Jd.to_dense(), rtol=1e-13)


def test_newton_rhs_examples():
    P = np.full((2, 2), 0.25)
    rhs = newton_rhs(NewtonState(plan=P), [0.6, 0.4], [0.5, 0.5])
    np.testing.assert_allclose(rhs.row_defect, [-0.1, 0.1], atol=1e-15)
    np.testing.assert_allclose(rhs.col_defect, [0, 0], atol=1e-15)
    rhs = newton_rhs(NewtonState(plan=P), [0.5, 0.5], [0.5, 0.5])
    assert rhs.violation == 0


def test_newton_rhs_block_sums_balance(rng):
    K, duals, a, b = random_instance(rng, 4, 6)
    for state in (NewtonState(duals=duals), NewtonState(plan=plan_from_duals(K, duals))):
        rhs = newton_rhs(state, a, b, K=K)
        assert rhs.row_defect.sum() == pytest.approx(rhs.col_defect.sum(), abs=1e-14)


def test_dual_first_rhs_matches_primal_at_kernel(rng):
    K, _, a, b = random_instance(rng, 3, 4)
    r_dual = newton_rhs(NewtonState(duals=DualPotentials.zeros(3, 4)), a, b, K=K)
    r_primal = newton_rhs(NewtonState(plan=K.entries), a, b)
    np.testing.assert_allclose(r_dual.stacked(), r_primal.stacked(), rtol=1e-15)


def test_step_on_feasible_plan_is_identity():
    P = np.array([[0.3, 0.2], [0.1, 0.4]])
    cfg = SolveConfig(1.0)
    new = newton_step_primal(NewtonState(plan=P), P.sum(1), P.sum(0), cfg)
    np.testing.assert_array_equal(new.plan, P)
    assert new.last_report.iterations == 0


def test_first_step_symmetric_closed_form(sym2):
    # by symmetry df = dg = d with 2 s d = s - 1/2, s = 1 + e^-1, so the new plan is e^{-2d} K
    a, b, C = sym2
    K = gibbs_kernel(C, 1.0)
    s = 1 + E1
    viol0 = s - 0.5
    viol1 = s * np.exp(-(s - 0.5) / s) - 0.5
    cfg = SolveConfig(1.0, cg_tol=1e-15, cg_max_iters=10)
    state = NewtonState(plan=K.entries.copy())
    assert newton_rhs(state, a, b).violation == pytest.approx(viol0, rel=1e-14)
    new = newton_step_primal(state, a, b, cfg)
    assert newton_rhs(new, a, b).violation == pytest.approx(viol1, rel=1e-12)
    assert viol1 == pytest.approx(0.2252716, abs=1e-7)


def test_dual_step_matches_primal_step(sym2):
    a, b, C = sym2
    K = gibbs_kernel(C, 1.0)
    cfg = SolveConfig(1.0, cg_tol=1e-15, cg_max_iters=10)
    p = newton_step_primal(NewtonState(plan=K.entries.copy()), a, b, cfg)
    d = newton_step_dual(NewtonState(duals=DualPotentials.zeros(2, 2)), a, b, K, cfg)
    np.testing.assert_allclose(plan_from_duals(K, d.duals), p.plan, rtol=1e-14)


@pytest.mark.parametrize("kind", ["newton_primal", "newton_dual"])
def test_solve_symmetric_instance(sym2, kind):
    a, b, C = sym2
    K = gibbs_kernel(C, 1.0)
    cfg = SolveConfig(1.0, outer_tol=1e-12, cg_tol=1e-14, cg_max_iters=10, solver_kind=kind)
    state, P, rec = newton_solve(K, a, b, cfg)
    assert rec.converged and rec.outer_iterations <= 5
    np.testing.assert_allclose(P, [[P11_STAR, 0.5 - P11_STAR], [0.5 - P11_STAR, P11_STAR]],
                               atol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_primal_dual_same_plans_with_exact_cg(seed):
    rng = np.random.default_rng(seed)
    n = 6
    K, _, a, b = random_instance(rng, n, n, eps=0.2)
    out = {}
    for kind in ("newton_primal", "newton_dual"):
        cfg = SolveConfig(0.2, outer_tol=1e-13, cg_tol=1e-15, cg_max_iters=100, solver_kind=kind)
        state, P, rec = newton_solve(K, a, b, cfg)
        assert rec.converged
        out[kind] = (P, rec.violations)
    np.testing.assert_allclose(out["newton_dual"][0], out["newton_primal"][0], rtol=1e-10)
    vp, vd = out["newton_primal"][1], out["newton_dual"][1]
    assert vp.size == vd.size
    big = vp > 1e-6
    np.testing.assert_allclose(vd[big], vp[big], rtol=1e-10)


def test_step_clipping(rng):
    K, _, a, b = random_instance(rng, 4, 4, eps=0.5)
    cfg = SolveConfig(0.5, outer_tol=1e-12, cg_tol=1e-14, cg_max_iters=50, max_step_ratio=5.0)
    _, P, rec = newton_solve(K, a, b, cfg, init=K.entries * 1e-12)
    assert rec.clipped_steps >= 1
    assert rec.converged


def test_degenerate_kernel_detected():
    K = gibbs_kernel([[0.0, 0.0], [1e4, 1e4]], 1.0)
    with pytest.raises(DegenerateKernelError):
        newton_solve(K, [0.5, 0.5], [0.5, 0.5], SolveConfig(1.0))


def test_solve_rejects_sinkhorn_kind(sym2):
    a, b, C = sym2
    with pytest.raises(InvalidConfigError):
        newton_solve(gibbs_kernel(C, 1.0), a, b, SolveConfig(1.0, solver_kind="sinkhorn"))


def test_record_is_monotone_and_has_metrics():
    a, b, grid = gaussian_pair_2d(8)
    C = squared_euclidean_cost(grid)
    K = gibbs_kernel(C, 0.01)
    cfg = SolveConfig(0.01, outer_tol=1e-12, cg_max_iters=40)
    _, P, rec = newton_solve(K, a, b, cfg, C=C)
    _, _, rec2 = newton_solve(K, a, b, cfg, C=C, reference_plan=P)
    cg = [r.cum_cg_iters for r in rec2.rows]
    wall = [r.wall_time_s for r in rec2.rows]
    assert cg == sorted(cg) and wall == sorted(wall)
    assert rec2.rows[-1].plan_error_l1 == 0.0 and rec2.rows[-1].cost_error == 0.0
    assert rec2.rows[0].plan_error_l1 > 0
    np.testing.assert_array_equal(rec.violations, rec2.violations)


def test_dual_form_stays_matrix_free():
    a, b, grid = gaussian_pair_2d(20)
    K = gibbs_kernel(squared_euclidean_cost(grid), 0.05)
    cfg = SolveConfig(0.05, outer_tol=1e-10, cg_max_iters=34, solver_kind="newton_dual")
    tracemalloc.start()
    try:
        state, plan, rec = newton_solve(K, a, b, cfg, materialize_plan=False)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    assert rec.converged and plan is None
    n = a.size
    assert peak < n * n * 8 / 4


@pytest.mark.xfail(
    strict=True,
    reason="with CG capped at 34 the step from 4.1e-5 only reaches 3.2e-7; see decisions ledger",
)
def test_quadratic_contraction_band_on_gauss2d():
    """From the iterate whose violation first drops to ~1e-4, the next one should be <= 1e-7."""
    a, b, grid = gaussian_pair_2d(20)
    K = gibbs_kernel(squared_euclidean_cost(grid), 1e-3)
    cfg = SolveConfig(1e-3, outer_tol=1e-13, cg_tol=1e-13, cg_max_iters=34)
    _, _, rec = newton_solve(K, a, b, cfg)
    v = rec.violations
    k = int(np.argmax(v <= 1e-4))
    assert v[k + 1] <= 1e-7


@pytest.mark.xfail(strict=True, reason="27 outer iterations here, 6 above the reported 21")
def test_bump1d_outer_iterations_near_reported():
    """Reported outer count at n = 1000 is 21; allowed band +-5."""
    n = 1000
    a, b, grid = bump_pair_1d(n)
    K = gibbs_kernel(squared_euclidean_cost(grid), 1e-3)
    cfg = SolveConfig(1e-3, outer_tol=1e-10, cg_tol=1e-10, cg_max_iters=math.ceil(n / 12))
    _, _, rec = newton_solve(K, a, b, cfg)
    assert rec.converged
    assert abs(rec.outer_iterations - 21) <= 5
