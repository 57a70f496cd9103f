import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcbfrl.constraints import (CircleGeometry, ConstraintSpec, aggregate_h,
                                aggregate_h_weights, circle_centers, gcbf_bound,
                                road_margin_h, two_circle_h, verify_relative_degree,
                                violation_distance)
from gcbfrl.dynamics import DoubleIntegrator
from gcbfrl.envs.toy import PositionLimit
from gcbfrl.errors import ContractViolation
from gcbfrl.nets import GaussianPolicy, MlpSpec, init_policy_params

GEOM = CircleGeometry(front_offset=1.2, rear_offset=-1.2, d_safe=2.5, d_r_safe=1.5)


class TestGcbfBound:
    def test_alpha_one_collapses_to_zero(self):
        assert gcbf_bound(-3.0, 1.0, 5) == 0.0

    def test_alpha_zero_identity(self):
        assert gcbf_bound(-3.0, 0.0, 4) == -3.0

    def test_reference_values(self):
        assert gcbf_bound(-1.0, 0.3, 3) == pytest.approx(-0.343)

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(ContractViolation):
            gcbf_bound(-1.0, 1.5, 2)
        with pytest.raises(ContractViolation):
            gcbf_bound(-1.0, -0.1, 2)

    def test_spec_requires_open_interval(self):
        with pytest.raises(ContractViolation):
            ConstraintSpec(PositionLimit(1.0), 2, alpha=1.0)
        with pytest.raises(ContractViolation):
            ConstraintSpec(PositionLimit(1.0), 0, alpha=0.5)


class TestTwoCircleH:
    def test_boundary_contact_is_zero(self):
        # Place the other vehicle so its front circle is exactly d_safe from the
        # ego front circle.
        ego = np.array([0.0, 0.0, 0.0])
        sv = np.array([GEOM.d_safe, 0.0, 0.0])  # front circles both offset +1.2
        h = two_circle_h(ego, sv, GEOM)
        assert h[0] == pytest.approx(0.0, abs=1e-12)

    def test_coincident_centers_maximal_violation(self):
        ego = np.array([1.0, -2.0, 0.4])
        h = two_circle_h(ego, ego, GEOM)
        assert h[0] == pytest.approx(GEOM.d_safe ** 2)
        assert h[3] == pytest.approx(GEOM.d_safe ** 2)

    def test_matches_direct_geometry(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            ego = rng.uniform([-20, -20, -np.pi], [20, 20, np.pi])
            sv = rng.uniform([-20, -20, -np.pi], [20, 20, np.pi])
            h = two_circle_h(ego, sv, GEOM)
            k = 0
            for eo in (GEOM.front_offset, GEOM.rear_offset):
                ec = ego[:2] + eo * np.array([np.cos(ego[2]), np.sin(ego[2])])
                for so in (GEOM.front_offset, GEOM.rear_offset):
                    scn = sv[:2] + so * np.array([np.cos(sv[2]), np.sin(sv[2])])
                    expected = GEOM.d_safe ** 2 - np.sum((ec - scn) ** 2)
                    assert h[k] == pytest.approx(expected, rel=1e-12, abs=1e-12)
                    k += 1

    def test_sign_convention_safe_is_nonpositive(self):
        ego = np.array([0.0, 0.0, 0.0])
        sv = np.array([50.0, 0.0, 0.0])
        assert np.all(two_circle_h(ego, sv, GEOM) < 0.0)


class TestRoadMarginH:
    def test_boundary_distance_zero(self):
        ego = np.array([0.0, 0.0, 0.0])
        road_point = np.array([GEOM.front_offset + GEOM.d_r_safe, 0.0])
        h = road_margin_h(ego, road_point, GEOM)
        assert h[0] == pytest.approx(0.0, abs=1e-12)

    def test_interior_strictly_negative(self):
        ego = np.array([0.0, 0.0, 0.0])
        h = road_margin_h(ego, np.array([0.0, 40.0]), GEOM)
        assert np.all(h < 0.0)

    def test_matches_direct_geometry(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            ego = rng.uniform([-10, -10, -np.pi], [10, 10, np.pi])
            pt = rng.uniform(-15, 15, 2)
            h = road_margin_h(ego, pt, GEOM)
            centers = circle_centers(ego, GEOM)
            expected = GEOM.d_r_safe ** 2 - ((centers - pt) ** 2).sum(axis=1)
            assert np.allclose(h, expected)


class TestAggregateH:
    def test_singleton(self):
        assert aggregate_h(np.array([-2.7]), 0.5) == pytest.approx(-2.7)

    def test_two_equal_values(self):
        assert aggregate_h(np.array([-1.0, -1.0]), 0.1) == pytest.approx(
            -1.0 + 0.1 * np.log(2.0))

    def test_small_temperature_approaches_max(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            vals = rng.uniform(-5, 5, size=rng.integers(2, 12))
            assert abs(aggregate_h(vals, 1e-3) - vals.max()) < 1e-2

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=10),
           st.floats(1e-3, 2.0))
    def test_upper_bounds_max(self, vals, tau):
        vals = np.array(vals)
        assert aggregate_h(vals, tau) >= vals.max() - 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=8),
           st.integers(0, 7), st.floats(1e-2, 5.0))
    def test_monotone_in_each_argument(self, vals, idx, bump):
        vals = np.array(vals)
        idx = idx % vals.size
        bumped = vals.copy()
        bumped[idx] += bump
        assert aggregate_h(bumped, 0.5) >= aggregate_h(vals, 0.5) - 1e-12

    def test_weights_are_softmax(self):
        vals = np.array([-1.0, 0.5, 0.2])
        w = aggregate_h_weights(vals, 0.5)
        assert w.sum() == pytest.approx(1.0)
        eps = 1e-7
        for i in range(3):
            bumped = vals.copy()
            bumped[i] += eps
            fd = (aggregate_h(bumped, 0.5) - aggregate_h(vals, 0.5)) / eps
            assert fd == pytest.approx(w[i], rel=1e-5)

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            aggregate_h(np.array([]), 0.5)
        with pytest.raises(ContractViolation):
            aggregate_h(np.array([1.0]), 0.0)


class TestVerifyRelativeDegree:
    def make_policy(self, seed=0):
        rng = np.random.default_rng(seed)
        policy = GaussianPolicy(MlpSpec(input_dim=2, output_scale=np.ones(1),
                                        hidden_layers=1, hidden_units=8))
        theta = init_policy_params(policy, rng, final_weight_scale=1.0)
        return policy, theta

    def test_double_integrator_degree_two(self):
        policy, theta = self.make_policy()
        model = DoubleIntegrator(0.1)
        h = PositionLimit(1.0)
        s = np.array([0.3, -0.2])
        assert bool(verify_relative_degree(model, h, s, policy, theta, m=2))
        assert not bool(verify_relative_degree(model, h, s, policy, theta, m=1))

    def test_degenerate_gradient_inconclusive(self):
        class Flat(PositionLimit):
            def grad(self, s):
                return np.zeros_like(np.asarray(s, dtype=np.float64))

        policy, theta = self.make_policy(1)
        res = verify_relative_degree(DoubleIntegrator(0.1), Flat(1.0),
                                     np.array([0.0, 0.0]), policy, theta, m=2)
        assert res.inconclusive and not bool(res)


class TestViolationDistance:
    def test_collision_free_is_zero(self):
        ego = np.tile([0.0, 0.0, 0.0], (10, 1))
        sv = np.tile([40.0, 0.0, 0.0], (10, 1, 1))
        assert violation_distance(ego, sv, GEOM) == 0.0

    def test_single_step_mean_convention(self):
        # Exactly one circle pair at h = 0.25 on one of T steps -> 0.25 / T.
        t_len = 8
        ego = np.tile([0.0, 0.0, 0.0], (t_len, 1))
        sv = np.tile([1000.0, 0.0, 0.0], (t_len, 1, 1))
        d = np.sqrt(GEOM.d_safe ** 2 - 0.25)
        # Perpendicular vehicle whose front circle sits at distance d from the
        # ego front circle; all other pairs stay clear of d_safe.
        sv[0, 0] = [GEOM.front_offset + d, -GEOM.front_offset, np.pi / 2]
        h0 = two_circle_h(ego[0], sv[0, 0], GEOM)
        assert np.sum(h0 > 0.0) == 1
        assert h0.max() == pytest.approx(0.25)
        assert violation_distance(ego, sv, GEOM) == pytest.approx(0.25 / t_len)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        t_len, k = 12, 3
        ego = rng.uniform([-5, -5, -np.pi], [5, 5, np.pi], size=(t_len, 3))
        sv = rng.uniform([-8, -8, -np.pi], [8, 8, np.pi], size=(t_len, k, 3))
        total = 0.0
        for t in range(t_len):
            for j in range(k):
                h = two_circle_h(ego[t], sv[t, j], GEOM)
                total += np.maximum(h, 0.0).sum()
        assert violation_distance(ego, sv, GEOM) == pytest.approx(total / t_len)

    def test_empty_trajectory_rejected(self):
        with pytest.raises(ContractViolation):
            violation_distance(np.zeros((0, 3)), np.zeros((0, 1, 3)), GEOM)


def test_gcbf_forward_invariance_simulation():
    from gcbfrl.verify import suite_invariance
    checks = suite_invariance(seed=0, n_trajectories=120)
    assert all(c.passed for c in checks), [c.detail for c in checks]
