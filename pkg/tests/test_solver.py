import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcbfrl.errors import ContractViolation
from gcbfrl.solver import (FEASIBLE, INFEASIBLE, LinearizedStep, check_feasibility,
                           conjugate_gradient, line_search, normalize_gradients,
                           recovery_step, solve_step)
from gcbfrl.verify import (ball_sampling_feasible, dual_grid_oracle,
                           make_solver_instance, random_spd, rel_error)


def dense_step(h_mat, g, c_list, z, delta):
    return LinearizedStep(g, c_list, z, lambda v: h_mat @ v, delta)


class TestNormalize:
    def test_norm_two_becomes_half(self):
        g_raw = np.array([2.0, 0.0])
        g, _ = normalize_gradients(g_raw, [])
        assert np.linalg.norm(g) == pytest.approx(0.5)

    def test_zero_vector_stays_zero(self):
        g, (c,) = normalize_gradients(np.zeros(4), [np.zeros(4)])
        assert np.all(g == 0.0) and np.all(c == 0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_direction_preserved(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(6)
        g, _ = normalize_gradients(v, [])
        cos = float(g @ v) / (np.linalg.norm(g) * np.linalg.norm(v))
        assert abs(cos - 1.0) < 1e-12

    def test_nonfinite_rejected(self):
        with pytest.raises(ContractViolation):
            normalize_gradients(np.array([np.nan, 1.0]), [])


class TestConjugateGradient:
    def test_identity_single_iteration(self):
        rhs = np.array([1.0, -2.0, 3.0])
        res = conjugate_gradient(lambda v: v, rhs)
        assert res.converged and res.iterations == 1
        assert np.allclose(res.x, rhs)

    def test_dense_system_matches_direct_solve(self):
        rng = np.random.default_rng(0)
        h = random_spd(rng, 10)
        rhs = rng.standard_normal(10)
        res = conjugate_gradient(lambda v: h @ v, rhs, max_iters=50, tol=1e-12)
        assert rel_error(res.x, np.linalg.solve(h, rhs)) < 1e-6

    def test_zero_rhs(self):
        res = conjugate_gradient(lambda v: 2.0 * v, np.zeros(5))
        assert res.converged and np.all(res.x == 0.0)

    def test_nonconvergence_flagged(self):
        rng = np.random.default_rng(1)
        h = random_spd(rng, 30)
        h[0, 0] += 1e6  # badly conditioned
        res = conjugate_gradient(lambda v: h @ v, rng.standard_normal(30),
                                 max_iters=2, tol=1e-14)
        assert not res.converged


class TestCheckFeasibility:
    def test_satisfied_constraint_always_feasible(self):
        rng = np.random.default_rng(2)
        h = random_spd(rng, 5)
        step = dense_step(h, rng.standard_normal(5), [rng.standard_normal(5)],
                          [-0.5], 0.01)
        assert check_feasibility(step) == FEASIBLE

    def test_reference_infeasible_instance(self):
        # H = I, ||c|| = 1, delta = 0.5: max achievable decrease is 1 < z = 2.
        c = np.zeros(4)
        c[0] = 1.0
        step = dense_step(np.eye(4), np.ones(4), [c], [2.0], 0.5)
        assert check_feasibility(step) == INFEASIBLE
        assert not ball_sampling_feasible(np.eye(4), c, 2.0, 0.5,
                                          np.random.default_rng(3))

    def test_boundary_value_admitted(self):
        c = np.zeros(4)
        c[0] = 1.0
        z = np.sqrt(2.0 * 0.5 * 1.0)
        step = dense_step(np.eye(4), np.ones(4), [c], [z], 0.5)
        assert check_feasibility(step) == FEASIBLE

    def test_multi_constraint_rejected(self):
        step = dense_step(np.eye(3), np.ones(3), [np.ones(3), np.ones(3)],
                          [0.0, 0.0], 0.1)
        with pytest.raises(ContractViolation):
            check_feasibility(step)


class TestSolveStep:
    def test_inactive_constraint_steepest_descent(self):
        # No active constraint with H = I: dtheta = -g sqrt(2 delta)/||g||.
        rng = np.random.default_rng(4)
        g = rng.standard_normal(6)
        c = rng.standard_normal(6)
        delta = 0.02
        step = dense_step(np.eye(6), g, [c], [-100.0], delta)
        d, lam, nu = solve_step(step)
        assert nu[0] == 0.0
        assert rel_error(d, -g * np.sqrt(2 * delta) / np.linalg.norm(g)) < 1e-9

    def test_active_constraint_complementary_slackness(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            inst = make_solver_instance(rng, 5, force="feasible")
            step = dense_step(inst["h"], inst["g"], [inst["c"]], [inst["z"]],
                              inst["delta"])
            d, lam, nu = solve_step(step, cg_iters=30, cg_tol=1e-12)
            lin = inst["z"] + float(inst["c"] @ d)
            assert lin <= 1e-8
            if nu[0] > 1e-10:
                assert abs(lin) < 1e-8  # active constraint sits on its boundary
            # Trust region respected.
            assert 0.5 * float(d @ inst["h"] @ d) <= inst["delta"] * (1 + 1e-9)

    def test_objective_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(40):
            inst = make_solver_instance(rng, 5, force="feasible")
            step = dense_step(inst["h"], inst["g"], [inst["c"]], [inst["z"]],
                              inst["delta"])
            d, _, _ = solve_step(step, cg_iters=30, cg_tol=1e-12)
            oracle = dual_grid_oracle(inst["h"], inst["g"], inst["c"], inst["z"],
                                      inst["delta"])
            assert oracle["status"] == FEASIBLE
            err = abs(float(inst["g"] @ d) - oracle["objective"])
            assert err / max(1.0, abs(oracle["objective"])) < 1e-5

    def test_kkt_certification(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            inst = make_solver_instance(rng, 6, force="feasible")
            step = dense_step(inst["h"], inst["g"], [inst["c"]], [inst["z"]],
                              inst["delta"])
            d, lam, nu = solve_step(step, cg_iters=40, cg_tol=1e-13)
            stat = inst["g"] + lam * (inst["h"] @ d) + nu[0] * inst["c"]
            assert np.linalg.norm(stat) < 1e-6 * max(1.0, np.linalg.norm(inst["g"]))
            assert lam > 0.0 and nu[0] >= 0.0
            tr = 0.5 * float(d @ inst["h"] @ d) - inst["delta"]
            assert abs(lam * tr) < 1e-6
            lin = inst["z"] + float(inst["c"] @ d)
            assert abs(nu[0] * lin) < 1e-6

    def test_multi_constraint_against_single(self):
        # Duplicating the same constraint must reproduce the single-constraint
        # solution through the dual-ascent path.
        rng = np.random.default_rng(8)
        inst = make_solver_instance(rng, 5, force="feasible")
        single = dense_step(inst["h"], inst["g"], [inst["c"]], [inst["z"]],
                            inst["delta"])
        d1, _, _ = solve_step(single, cg_iters=30, cg_tol=1e-12)
        double = dense_step(inst["h"], inst["g"], [inst["c"], inst["c"]],
                            [inst["z"], inst["z"]], inst["delta"])
        d2, lam2, nu2 = solve_step(double, cg_iters=30, cg_tol=1e-12,
                                   ascent_iters=2000)
        assert d2 is not None
        assert abs(float(inst["g"] @ d1) - float(inst["g"] @ d2)) < 1e-4

    def test_multi_constraint_infeasible_certificate(self):
        c = np.zeros(4)
        c[0] = 1.0
        c2 = np.zeros(4)
        c2[1] = 1.0
        step = dense_step(np.eye(4), np.ones(4), [c, c2], [5.0, 0.1], 0.01)
        d, lam, nu = solve_step(step)
        assert step.status == INFEASIBLE and d is None


class TestRecoveryStep:
    def test_energy_on_trust_boundary(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            h = random_spd(rng, 6)
            step = dense_step(h, rng.standard_normal(6), [rng.standard_normal(6)],
                              [1.0], 10.0 ** rng.uniform(-3, 0))
            b = rng.standard_normal(6)
            d = recovery_step(step, b, cg_iters=40, cg_tol=1e-13)
            assert abs(0.5 * float(d @ h @ d) / step.delta - 1.0) < 1e-6

    def test_identity_metric_direction(self):
        step = dense_step(np.eye(4), np.ones(4), [np.ones(4)], [1.0], 0.125)
        b = np.array([1.0, 2.0, -1.0, 0.5])
        d = recovery_step(step, b)
        assert np.linalg.norm(d) == pytest.approx(np.sqrt(2 * 0.125))
        cos = float(d @ (-b)) / (np.linalg.norm(d) * np.linalg.norm(b))
        assert cos == pytest.approx(1.0)

    def test_constraint_strictly_decreases(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            h = random_spd(rng, 5)
            step = dense_step(h, rng.standard_normal(5), [rng.standard_normal(5)],
                              [1.0], 0.05)
            b = rng.standard_normal(5)
            d = recovery_step(step, b, cg_iters=30, cg_tol=1e-12)
            assert float(b @ d) < 0.0

    def test_vanished_gradient_noop(self):
        step = dense_step(np.eye(3), np.ones(3), [np.ones(3)], [1.0], 0.1)
        d = recovery_step(step, np.zeros(3))
        assert np.all(d == 0.0)
        assert step.flag == "vanished-constraint-gradient"


class TestLineSearch:
    def test_zero_step_accepted_immediately(self):
        params = np.array([1.0, 2.0])
        res = line_search(params, np.zeros(2),
                          objective_eval=lambda p: float(p @ p),
                          kl_eval=lambda p: float(np.sum((p - params) ** 2)),
                          constraint_eval=lambda p: -1.0,
                          delta=0.01)
        assert res.accepted and res.backtracks == 0
        assert np.array_equal(res.params, params)

    def test_backtracks_once_when_kl_violated_at_full_length(self):
        # KL is quadratic in the step length: full step exceeds delta, 0.8x fits.
        params = np.zeros(2)
        d = np.array([1.0, 0.0])
        delta = 0.65  # full step kl = 1 > delta; 0.8 step kl = 0.64 < delta
        res = line_search(params, d,
                          objective_eval=lambda p: float(p @ p) * 0.0,
                          kl_eval=lambda p: float(np.sum(p ** 2)),
                          constraint_eval=None,
                          delta=delta)
        assert res.accepted and res.backtracks == 1
        assert np.allclose(res.params, 0.8 * d)

    def test_exhaustion_returns_old_params(self):
        params = np.array([3.0])
        res = line_search(params, np.array([1.0]),
                          objective_eval=lambda p: 0.0,
                          kl_eval=lambda p: 1e9,
                          constraint_eval=None,
                          delta=0.01, max_backtracks=10)
        assert not res.accepted
        assert np.array_equal(res.params, params)

    def test_feasible_step_rejects_objective_increase(self):
        params = np.zeros(1)
        res = line_search(params, np.array([1.0]),
                          objective_eval=lambda p: float(p[0]),  # increases along d
                          kl_eval=lambda p: 0.0,
                          constraint_eval=lambda p: -1.0,
                          delta=1.0, feasible=True)
        assert not res.accepted

    def test_recovery_step_ignores_objective(self):
        params = np.zeros(1)
        res = line_search(params, np.array([1.0]),
                          objective_eval=lambda p: float(p[0]),
                          kl_eval=lambda p: 0.0,
                          constraint_eval=None,
                          delta=1.0, feasible=False)
        assert res.accepted and res.backtracks == 0
