import numpy as np
import pytest

from drsum.constraints import (
    AFFINE,
    CONVEX_SMOOTH,
    ConstraintSet,
    ProjectionError,
    estimate_rho,
    max_violation,
    project_feasible,
)
from drsum.reductions import build_dr_logistic


class TestMaxViolation:
    def test_feasible_is_zero(self):
        cset = ConstraintSet.affine(np.eye(2), np.ones(2))
        assert max_violation(cset, np.array([-1.0, 0.5])) == 0.0

    def test_componentwise_max(self):
        def oracle(i, x):
            vals = [-1.0, 0.3, 0.1]
            return vals[i], np.zeros(1)

        cset = ConstraintSet(m=3, oracle=oracle)
        assert max_violation(cset, np.zeros(1)) == pytest.approx(0.3)

    def test_dr_logistic_binding_loss(self):
        Z = np.array([[1.0, 0.0]])
        y = np.array([1.0])
        _, cset = build_dr_logistic((Z, y), eps_radius=0.1, kappa_flip=1.0)
        # beta = 0, lam = 1, s = 0: the plain loss constraint ln 2 binds
        x = np.array([0.0, 0.0, 1.0, 0.0])
        assert max_violation(cset, x) == pytest.approx(np.log(2.0))


class TestAffineProjection:
    def test_feasible_point_untouched(self):
        cset = ConstraintSet.affine(np.eye(2), np.ones(2))
        x = np.array([0.2, -0.3])
        x_proj, residual, iters = project_feasible(cset, x)
        assert np.array_equal(x_proj, x)
        assert residual == 0.0
        assert iters == 0

    def test_single_halfspace(self):
        cset = ConstraintSet.affine(np.array([[1.0, 0.0]]), np.array([1.0]))
        x_proj, residual, _ = project_feasible(cset, np.array([2.0, 0.0]))
        assert np.allclose(x_proj, [1.0, 0.0], atol=1e-10)
        assert residual <= 1e-8

    def test_orthant_corner(self):
        cset = ConstraintSet.affine(np.eye(2), np.zeros(2))
        x_proj, residual, _ = project_feasible(cset, np.array([1.0, 1.0]))
        assert np.allclose(x_proj, [0.0, 0.0], atol=1e-10)
        assert residual <= 1e-8

    def test_oblique_halfspaces_match_quadratic_solve(self):
        # independent oracle: exact projection onto one active halfspace
        a = np.array([1.0, 2.0])
        cset = ConstraintSet.affine(a.reshape(1, -1), np.array([1.0]))
        x = np.array([3.0, 1.0])
        x_proj, _, _ = project_feasible(cset, x)
        expected = x - (a @ x - 1.0) / (a @ a) * a
        assert np.allclose(x_proj, expected, atol=1e-10)

    def test_idempotence(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((4, 3))
        cset = ConstraintSet.affine(A, rng.uniform(0.5, 1.5, size=4))
        x = 5.0 * rng.standard_normal(3)
        once, _, _ = project_feasible(cset, x)
        twice, _, _ = project_feasible(cset, once)
        assert np.allclose(once, twice, atol=1e-8)

    def test_variational_optimality(self):
        # <x - proj, y - proj> <= tol * ||x - proj|| for feasible y
        rng = np.random.default_rng(1)
        A = np.vstack([np.eye(2), -np.eye(2)])  # box [-1, 1]^2
        cset = ConstraintSet.affine(A, np.ones(4))
        x = np.array([2.5, 0.7])
        proj, _, _ = project_feasible(cset, x)
        gap = np.linalg.norm(x - proj)
        for _ in range(100):
            y = rng.uniform(-1.0, 1.0, size=2)
            assert (x - proj) @ (y - proj) <= 1e-8 * gap + 1e-12

    def test_nonconvergence_error_carries_residual(self):
        # infeasible intersection: x1 <= -1 and -x1 <= -1 (i.e. x1 >= 1)
        cset = ConstraintSet.affine(np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))
        with pytest.raises(ProjectionError) as err:
            project_feasible(cset, np.array([0.0]), max_iter=200)
        assert err.value.residual > 0


class TestSmoothProjection:
    def test_disc_projection(self):
        # one smooth convex constraint: ||x||^2 - 1 <= 0
        def oracle(i, x):
            return float(x @ x) - 1.0, 2.0 * x

        cset = ConstraintSet(m=1, oracle=oracle, kinds=(CONVEX_SMOOTH,))
        x = np.array([2.0, 2.0])
        x_proj, residual, _ = project_feasible(cset, x, tol=1e-8)
        expected = x / np.linalg.norm(x)
        assert residual <= 1e-8
        assert np.allclose(x_proj, expected, atol=1e-4)

    def test_mixed_kinds_use_smooth_path(self):
        def oracle(i, x):
            if i == 0:
                return float(x @ x) - 1.0, 2.0 * x
            return float(x[0]), np.array([1.0, 0.0])

        cset = ConstraintSet(m=2, oracle=oracle, kinds=(CONVEX_SMOOTH, AFFINE))
        x_proj, residual, _ = project_feasible(cset, np.array([1.5, 1.5]), tol=1e-8)
        assert residual <= 1e-8
        assert x_proj[0] <= 1e-6
        assert abs(x_proj[1] - 1.0) < 1e-3


class TestConstraintSet:
    def test_affine_tag_constant_gradient(self):
        cset = ConstraintSet.affine(np.array([[1.0, -2.0]]), np.array([0.5]))
        rng = np.random.default_rng(3)
        g1 = cset.eval(0, rng.standard_normal(2))[1]
        g2 = cset.eval(0, rng.standard_normal(2))[1]
        assert np.array_equal(g1, g2)
        assert cset.all_affine

    def test_kind_count_validation(self):
        with pytest.raises(ValueError):
            ConstraintSet(m=2, oracle=lambda i, x: (0.0, x), kinds=("affine",))

    def test_from_functions(self):
        cset = ConstraintSet.from_functions(
            [lambda x: (float(x[0]) - 1.0, np.array([1.0]))])
        assert cset.m == 1
        assert cset.eval(0, np.array([3.0]))[0] == pytest.approx(2.0)


def test_estimate_rho_on_unit_halfspace():
    # boundary of {x1 - 1 <= 0} has gradient norm exactly 1 everywhere
    cset = ConstraintSet.affine(np.array([[1.0, 0.0]]), np.array([1.0]))
    est = estimate_rho(cset, dim=2, num_probes=20, seed=0)
    assert est == pytest.approx(1.0, abs=1e-9)
