import numpy as np
import pytest

from drsum.composite import OracleCounter, check_jacobians, evaluate_psi, full_phi_gradient
from drsum.constraints import ConstraintSet
from drsum.proxlib import SquaredNormTerm
from drsum.reductions import (
    Chi2Config,
    KlConfig,
    NumericalRangeError,
    WassersteinConfig,
    brute_force_penalized_max,
    build_chi2,
    build_dr_logistic,
    build_kl,
    build_mean,
    build_wasserstein,
    chi2_worst_case_weights,
    convexify_constraints,
    kl_worst_case_weights,
    wasserstein_penalty,
)


def affine_losses(consts, slopes=None):
    """f_i(x) = c_i + <a_i, x> as plain loss oracles."""
    consts = np.asarray(consts, dtype=float)
    if slopes is None:
        slopes = np.zeros((consts.size, 1))
    slopes = np.asarray(slopes, dtype=float)

    def make(i):
        def f(x):
            return consts[i] + float(slopes[i] @ x), slopes[i].copy()
        return f

    return [make(i) for i in range(consts.size)], slopes.shape[1]


class TestChi2:
    def test_single_constant_loss(self):
        losses, d = affine_losses([3.7])
        prob = build_chi2(losses, Chi2Config(gamma=2.0), dim=d)
        assert evaluate_psi(prob, np.zeros(d)) == pytest.approx(3.7)

    def test_equal_losses_no_penalty(self):
        losses, d = affine_losses([1.3, 1.3, 1.3])
        prob = build_chi2(losses, Chi2Config(gamma=0.5), dim=d)
        assert evaluate_psi(prob, np.zeros(d)) == pytest.approx(1.3)

    def test_two_point_value_against_brute_force(self):
        losses, d = affine_losses([0.0, 1.0])
        prob = build_chi2(losses, Chi2Config(gamma=1.0), dim=d)
        psi = evaluate_psi(prob, np.zeros(d))
        assert psi == pytest.approx(0.625, abs=1e-12)
        oracle = brute_force_penalized_max([0.0, 1.0], "chi2", 1.0)
        assert psi == pytest.approx(oracle, abs=1e-8)

    def test_gamma_validation(self):
        with pytest.raises(ValueError):
            Chi2Config(gamma=0.0)

    def test_equivalence_interior_regime(self):
        # values in [0,1] and gamma >= 2 keep the closed form on the simplex
        rng = np.random.default_rng(11)
        for _ in range(25):
            m = int(rng.integers(1, 6))
            values = rng.uniform(0.0, 1.0, size=m)
            gamma = float(rng.uniform(2.0, 6.0))
            losses, d = affine_losses(values)
            prob = build_chi2(losses, Chi2Config(gamma=gamma), dim=d)
            psi = evaluate_psi(prob, np.zeros(d))
            oracle = brute_force_penalized_max(values, "chi2", gamma)
            assert abs(psi - oracle) < 1e-6

    def test_jacobians_of_built_problem(self):
        rng = np.random.default_rng(5)
        losses, d = affine_losses(rng.uniform(0, 1, 4), rng.standard_normal((4, 3)))
        prob = build_chi2(losses, Chi2Config(gamma=2.0), dim=d)
        assert check_jacobians(prob, num_probes=10, seed=1).max_rel_error < 1e-5


class TestChi2Weights:
    def test_equal_losses_uniform(self):
        w = chi2_worst_case_weights(np.full(4, 2.0), gamma=1.0)
        assert w.feasible
        assert np.allclose(w.p, 0.25)

    def test_interior_closed_form(self):
        w = chi2_worst_case_weights([0.0, 1.0], gamma=1.0)
        assert w.feasible
        assert np.allclose(w.p, [0.25, 0.75])

    def test_clipped_when_outside_simplex(self):
        w = chi2_worst_case_weights([0.0, 10.0], gamma=1.0)
        assert not w.feasible
        assert np.allclose(w.p, [0.0, 1.0])
        # constrained brute-force optimum agrees with the clipped vertex
        val = brute_force_penalized_max([0.0, 10.0], "chi2", 1.0)
        assert val == pytest.approx(9.5, abs=1e-8)

    def test_weights_always_on_simplex(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            m = int(rng.integers(1, 8))
            values = rng.normal(0, 5, size=m)
            gamma = float(rng.uniform(0.05, 3.0))
            w = chi2_worst_case_weights(values, gamma)
            assert np.all(w.p >= -1e-15)
            assert np.sum(w.p) == pytest.approx(1.0, abs=1e-12)
            raw = ((values - np.mean(values)) / gamma + 1.0) / m
            inside = bool(np.all(raw >= -1e-12) and np.all(raw <= 1 + 1e-12))
            assert w.feasible == inside

    def test_feasible_weights_reproduce_objective(self):
        # plugging the extracted weights into the penalized inner objective
        # recovers the built composite value
        rng = np.random.default_rng(9)
        for _ in range(50):
            m = int(rng.integers(2, 6))
            values = rng.uniform(0, 1, size=m)
            gamma = float(rng.uniform(2.0, 5.0))
            w = chi2_worst_case_weights(values, gamma)
            assert w.feasible
            inner = float(w.p @ values) - gamma * (m / 2.0) * float(
                np.sum((w.p - 1.0 / m) ** 2))
            losses, d = affine_losses(values)
            prob = build_chi2(losses, Chi2Config(gamma=gamma), dim=d)
            assert abs(inner - evaluate_psi(prob, np.zeros(d))) < 1e-10


class TestKl:
    def test_equal_losses(self):
        losses, d = affine_losses([0.7, 0.7, 0.7])
        prob = build_kl(losses, KlConfig(gamma=1.0), dim=d)
        assert evaluate_psi(prob, np.zeros(d)) == pytest.approx(0.7)

    def test_single_term(self):
        losses, d = affine_losses([1.2])
        prob = build_kl(losses, KlConfig(gamma=0.5), dim=d)
        assert evaluate_psi(prob, np.zeros(d)) == pytest.approx(1.2 / 0.5)

    def test_two_point_value(self):
        losses, d = affine_losses([0.0, np.log(4.0)])
        prob = build_kl(losses, KlConfig(gamma=1.0), dim=d)
        psi = evaluate_psi(prob, np.zeros(d))
        assert psi == pytest.approx(np.log(2.5), abs=1e-12)
        # gamma*Psi + gamma*ln m equals the exact penalized maximum
        oracle = brute_force_penalized_max([0.0, np.log(4.0)], "kl", 1.0)
        assert psi + np.log(2.0) == pytest.approx(oracle, abs=1e-8)

    def test_equivalence_identity(self):
        rng = np.random.default_rng(21)
        for _ in range(25):
            m = int(rng.integers(1, 7))
            values = rng.uniform(0.0, 1.0, size=m)
            gamma = float(rng.uniform(0.4, 3.0))
            losses, d = affine_losses(values)
            prob = build_kl(losses, KlConfig(gamma=gamma), dim=d)
            psi = evaluate_psi(prob, np.zeros(d))
            oracle = brute_force_penalized_max(values, "kl", gamma)
            assert abs(gamma * psi + gamma * np.log(m) - oracle) < 1e-8

    def test_shift_anchor_keeps_value(self):
        losses, d = affine_losses([200.0, 190.0])
        prob = build_kl(losses, KlConfig(gamma=0.5), dim=d,
                        shift_anchor=np.zeros(d))
        assert evaluate_psi(prob, np.zeros(d)) == pytest.approx(
            np.log(0.5 * (np.exp(0.0) + np.exp(-20.0))) + 400.0)

    def test_overflow_without_anchor_raises(self):
        losses, d = affine_losses([500.0, 490.0])
        prob = build_kl(losses, KlConfig(gamma=0.5), dim=d)
        with pytest.raises(NumericalRangeError):
            evaluate_psi(prob, np.zeros(d))

    def test_anchor_handles_deeply_negative_losses(self):
        # every exponential underflows without the (negative) shift
        losses, d = affine_losses([-400.0, -405.0])
        prob = build_kl(losses, KlConfig(gamma=0.5), dim=d,
                        shift_anchor=np.zeros(d))
        expected = np.log(0.5 * (1.0 + np.exp(-10.0))) - 800.0
        assert evaluate_psi(prob, np.zeros(d)) == pytest.approx(expected, rel=1e-12)


class TestKlWeights:
    def test_uniform_for_equal_losses(self):
        w = kl_worst_case_weights(np.full(5, 1.1), gamma=2.0)
        assert np.allclose(w.p, 0.2)
        assert w.feasible

    def test_softmax_against_grid_search(self):
        values = np.array([0.0, np.log(4.0)])
        w = kl_worst_case_weights(values, gamma=1.0)
        assert np.allclose(w.p, [0.2, 0.8], atol=1e-12)
        q = np.linspace(1e-9, 1 - 1e-9, 200_001)
        inner = q * values[0] + (1 - q) * values[1] - 1.0 * (
            q * np.log(q) + (1 - q) * np.log(1 - q))
        assert abs(q[np.argmax(inner)] - 0.2) < 1e-4

    def test_high_temperature_limit(self):
        rng = np.random.default_rng(2)
        values = rng.uniform(-3, 3, size=6)
        w = kl_worst_case_weights(values, gamma=1e6)
        assert np.max(np.abs(w.p - 1.0 / 6.0)) < 1e-5


class TestWassersteinPenalty:
    def test_deep_feasible_vanishes(self):
        assert wasserstein_penalty([-100.0], alpha=1.0, gamma=0.1) < 1e-12

    def test_single_active_constraint(self):
        assert wasserstein_penalty([0.0], 1.0, 1.0) == pytest.approx(np.log(2.0))

    def test_two_constraint_value_and_sandwich(self):
        pen = wasserstein_penalty([1.0, 0.5], alpha=2.0, gamma=0.5)
        expected = 0.5 * np.log(1.0 + np.exp(4.0) + np.exp(2.0))
        assert pen == pytest.approx(expected, abs=1e-12)
        assert 2.0 <= pen <= 2.0 + 0.5 * np.log(3.0)

    def test_sandwich_property(self):
        rng = np.random.default_rng(17)
        for _ in range(1000):
            m = int(rng.integers(1, 9))
            vals = rng.uniform(-50, 50, size=m)
            alpha = float(rng.uniform(0.05, 10.0))
            gamma = float(rng.uniform(0.01, 10.0))
            pen = wasserstein_penalty(vals, alpha, gamma)
            lo = max(0.0, alpha * float(np.max(vals)))
            assert lo - 1e-9 <= pen <= lo + gamma * np.log(m + 1) + 1e-9


class TestBuildWasserstein:
    def setup_method(self):
        self.cset = ConstraintSet.affine(np.eye(2), np.array([1.0, 1.0]))
        self.objective = SquaredNormTerm(1.0, center=np.array([2.0, 2.0]))

    def test_composite_matches_penalty(self):
        cfg = WassersteinConfig(alpha=2.0, gamma=0.5)
        prob = build_wasserstein(self.objective, self.cset, cfg, dim=2)
        x = np.array([2.0, 1.5])
        pen = wasserstein_penalty(self.cset.values(x), 2.0, 0.5)
        expected = self.objective.value(x) + pen - 0.5 * np.log(3.0)
        assert evaluate_psi(prob, x) == pytest.approx(expected, abs=1e-12)

    def test_shift_anchor_preserves_value_and_gradient(self):
        cfg = WassersteinConfig(alpha=2.0, gamma=0.01)
        x = np.array([1.4, 0.2])
        anchored = build_wasserstein(self.objective, self.cset, cfg, dim=2,
                                     shift_anchor=x)
        plain_pen = wasserstein_penalty(self.cset.values(x), 2.0, 0.01)
        expected = self.objective.value(x) + plain_pen - 0.01 * np.log(3.0)
        assert evaluate_psi(anchored, x) == pytest.approx(expected, rel=1e-12)
        # full_phi_gradient covers the smooth part only: difference out the
        # prox-slot objective before comparing against finite differences
        grad = full_phi_gradient(anchored, x)
        step = 1e-7
        fd = np.zeros(2)

        def phi(v):
            return evaluate_psi(anchored, v) - self.objective.value(v)

        for k in range(2):
            e = np.zeros(2)
            e[k] = step
            fd[k] = (phi(x + e) - phi(x - e)) / (2 * step)
        assert np.allclose(grad, fd, rtol=1e-4, atol=1e-8)

    def test_anchored_build_survives_huge_exponents(self):
        # alpha*c/gamma around 1e4: raw exponentials overflow, anchored do not
        cfg = WassersteinConfig(alpha=1.0, gamma=1e-4)
        x = np.array([2.0, 2.0])  # constraint values (1, 1) -> exponents 1e4
        prob = build_wasserstein(self.objective, self.cset, cfg, dim=2,
                                 shift_anchor=x)
        psi = evaluate_psi(prob, x)
        pen = wasserstein_penalty(self.cset.values(x), 1.0, 1e-4)
        assert psi == pytest.approx(self.objective.value(x) + pen - 1e-4 * np.log(3.0),
                                    rel=1e-10)

    def test_overflow_despite_shift_raises(self):
        cfg = WassersteinConfig(alpha=1.0, gamma=1e-4)
        prob = build_wasserstein(self.objective, self.cset, cfg, dim=2,
                                 shift_anchor=np.array([0.0, 0.0]))
        with pytest.raises(NumericalRangeError):
            evaluate_psi(prob, np.array([2.0, 2.0]))

    def test_gamma_from_restart_count(self):
        cfg = WassersteinConfig(alpha=2.0, K=4)
        assert cfg.resolve_gamma(2) == pytest.approx(np.exp(-4.0) / np.log(3.0))


class TestDrLogistic:
    def test_dimension_bookkeeping(self):
        Z = np.array([[1.0, 0.0]])
        y = np.array([1.0])
        objective, cset = build_dr_logistic((Z, y), eps_radius=0.1, kappa_flip=1.0)
        assert objective.slope.size == 2 + 1 + 1
        assert cset.m == 3

    def test_loss_at_zero_model(self):
        Z = np.array([[0.5, -0.2]])
        y = np.array([-1.0])
        _, cset = build_dr_logistic((Z, y), eps_radius=0.1, kappa_flip=1.0)
        x = np.zeros(4)  # beta = 0, lam = 0, s = 0
        val, _ = cset.eval(0, x)
        assert val == pytest.approx(np.log(2.0))

    def test_hand_evaluated_constraints(self):
        Z = np.array([[1.0, 0.0], [0.0, 1.0]])
        y = np.array([1.0, -1.0])
        objective, cset = build_dr_logistic((Z, y), eps_radius=0.1, kappa_flip=1.0)
        x = np.array([1.0, 1.0, 2.0, 1.0, 1.0])  # beta=(1,1), lam=2, s=(1,1)
        vals = cset.values(x)
        expected = np.array([
            np.log(1 + np.exp(-1.0)) - 1.0,
            np.log(1 + np.exp(1.0)) - 1.0,
            np.log(1 + np.exp(1.0)) - 2.0 - 1.0,
            np.log(1 + np.exp(-1.0)) - 2.0 - 1.0,
            np.sqrt(2.0) - 2.0,
        ])
        assert np.allclose(vals, expected, atol=1e-12)
        assert vals[0] == pytest.approx(-0.6867, abs=1e-4)
        # objective value lam*eps + mean(s)
        assert objective.value(x) == pytest.approx(2.0 * 0.1 + 1.0)

    def test_constraint_gradients_match_fd(self):
        rng = np.random.default_rng(4)
        Z = rng.standard_normal((3, 2))
        y = np.array([1.0, -1.0, 1.0])
        _, cset = build_dr_logistic((Z, y), eps_radius=0.2, kappa_flip=0.7)
        x = rng.standard_normal(2 + 1 + 3)
        x[2] = abs(x[2]) + 1.0  # keep lam away from the norm-cone kink
        for i in range(cset.m):
            val, grad = cset.eval(i, x)
            fd = np.zeros_like(x)
            for k in range(x.size):
                e = np.zeros_like(x)
                e[k] = 1e-6
                fd[k] = (cset.eval(i, x + e)[0] - cset.eval(i, x - e)[0]) / 2e-6
            assert np.allclose(grad, fd, atol=1e-5)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            build_dr_logistic((np.zeros((0, 2)), np.zeros(0)), 0.1, 1.0)


class TestConvexify:
    def base_set(self):
        def oracle(i, x):
            return -float(x[0]) ** 2, np.array([-2.0 * x[0]])

        return ConstraintSet(m=1, oracle=oracle, kinds=("general",))

    def test_zero_shift_is_identity(self):
        cset = self.base_set()
        out = convexify_constraints(cset, [0.0])
        x = np.array([1.7])
        assert out.eval(0, x) == cset.eval(0, x)

    def test_symbolic_sum(self):
        out = convexify_constraints(self.base_set(), [2.0])
        val, grad = out.eval(0, np.array([3.0]))
        assert val == pytest.approx(9.0)
        assert grad[0] == pytest.approx(6.0)

    def test_shift_vanishes_at_origin(self):
        cset = self.base_set()
        out = convexify_constraints(cset, [5.0])
        assert out.eval(0, np.zeros(1))[0] == cset.eval(0, np.zeros(1))[0]

    def test_negative_mu_rejected(self):
        with pytest.raises(ValueError):
            convexify_constraints(self.base_set(), [-1.0])


class TestBruteForce:
    def test_chi2_interior(self):
        assert brute_force_penalized_max([0.0, 1.0], "chi2", 1.0) == pytest.approx(
            0.625, abs=1e-8)

    def test_chi2_boundary(self):
        assert brute_force_penalized_max([0.0, 10.0], "chi2", 1.0) == pytest.approx(
            9.5, abs=1e-8)

    def test_kl_softmax_value(self):
        assert brute_force_penalized_max([0.0, np.log(4.0)], "kl", 1.0) == pytest.approx(
            np.log(5.0), abs=1e-8)

    def test_size_limit(self):
        with pytest.raises(ValueError):
            brute_force_penalized_max(np.zeros(13), "chi2", 1.0)

    def test_unknown_divergence(self):
        with pytest.raises(ValueError):
            brute_force_penalized_max([0.0], "tv", 1.0)


def test_build_mean_is_plain_average():
    rng = np.random.default_rng(8)
    losses, d = affine_losses(rng.uniform(0, 1, 5), rng.standard_normal((5, 3)))
    prob = build_mean(losses, dim=d)
    x = rng.standard_normal(3)
    direct = np.mean([losses[i](x)[0] for i in range(5)])
    assert evaluate_psi(prob, x) == pytest.approx(direct, abs=1e-12)
    counter = OracleCounter()
    grad = full_phi_gradient(prob, x, counter)
    assert counter.g_value_calls == 5
    direct_grad = np.mean([losses[i](x)[1] for i in range(5)], axis=0)
    assert np.allclose(grad, direct_grad)
