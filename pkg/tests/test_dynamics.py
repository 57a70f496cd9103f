import numpy as np
import pytest

from gcbfrl.dynamics import (BicycleModel, BicycleParams, DoubleIntegrator,
                             SurroundingVehicleState, predict_surrounding,
                             surrounding_block_jacobian, surrounding_block_step,
                             wrap_angle)
from gcbfrl.errors import ContractViolation
from gcbfrl.verify import fd_jacobian, rel_error


class TestDoubleIntegrator:
    def test_equilibrium(self):
        m = DoubleIntegrator(0.1)
        assert np.array_equal(m.step(np.zeros(2), np.zeros(1)), np.zeros(2))

    def test_update_law(self):
        m = DoubleIntegrator(0.1)
        out = m.step(np.array([1.0, 2.0]), np.zeros(1))
        assert np.allclose(out, [1.2, 2.0])

    def test_constant_jacobians(self):
        m = DoubleIntegrator(0.1)
        rng = np.random.default_rng(0)
        s, a = rng.standard_normal(2), rng.standard_normal(1)
        A, B = m.jacobians(s, a)
        assert np.allclose(A, [[1.0, 0.1], [0.0, 1.0]])
        assert np.allclose(B, [[0.0], [0.1]])
        assert rel_error(A, fd_jacobian(lambda sv: m.step(sv, a), s)) < 1e-9
        assert rel_error(B, fd_jacobian(lambda av: m.step(s, av), a)) < 1e-9


class TestBicycle:
    def random_state(self, rng):
        return np.concatenate([rng.uniform([3.0, -0.5, -0.3], [12.0, 0.5, 0.3]),
                               rng.uniform(-20.0, 20.0, 2), rng.uniform(-2.5, 2.5, 1)])

    def test_straight_driving(self):
        m = BicycleModel(dt=0.1)
        s = np.array([8.0, 0.0, 0.0, 5.0, -3.0, 0.7])
        out = m.step(s, np.zeros(2))
        assert out[5] == pytest.approx(0.7)           # heading unchanged
        assert out[1] == pytest.approx(0.0)           # no lateral velocity
        assert out[2] == pytest.approx(0.0)
        advance = np.hypot(out[3] - s[3], out[4] - s[4])
        assert advance == pytest.approx(8.0 * 0.1, rel=1e-12)

    def test_jacobians_match_finite_differences(self):
        m = BicycleModel(dt=0.1)
        rng = np.random.default_rng(1)
        for _ in range(100):
            s = self.random_state(rng)
            a = rng.uniform([-0.3, -2.0], [0.3, 2.0])
            A, B = m.jacobians(s, a)
            assert rel_error(A, fd_jacobian(lambda sv: m.step(sv, a), s)) < 1e-4
            assert rel_error(B, fd_jacobian(lambda av: m.step(s, av), a)) < 1e-4

    def test_speed_clamped_at_validity_bound(self):
        p = BicycleParams()
        m = BicycleModel(p, dt=0.1)
        s = np.array([p.v_x_min, 0.0, 0.0, 0.0, 0.0, 0.0])
        out = m.step(s, np.array([0.0, -3.0]))
        assert out[0] == p.v_x_min

    def test_heading_wrapped(self):
        m = BicycleModel(dt=0.1)
        s = np.array([8.0, 0.0, 2.0, 0.0, 0.0, np.pi - 0.05])
        out = m.step(s, np.zeros(2))
        assert -np.pi < out[5] <= np.pi


class TestSurroundingPredictor:
    def test_straight_advances_along_heading(self):
        sv = SurroundingVehicleState(x=0.0, y=0.0, v=10.0, psi=0.0, intent="straight")
        out = predict_surrounding(sv, 0.1)
        assert out.x == pytest.approx(1.0)
        assert out.y == pytest.approx(0.0)
        assert out.psi == pytest.approx(0.0)

    def test_right_turn_radius_20(self):
        sv = SurroundingVehicleState(x=0.0, y=0.0, v=10.0, psi=0.3, intent="right",
                                     turn_radius=20.0)
        out = predict_surrounding(sv, 0.1)
        assert out.psi - sv.psi == pytest.approx(0.05)

    def test_zero_speed_fixed_point(self):
        sv = SurroundingVehicleState(x=3.0, y=-2.0, v=0.0, psi=1.0, intent="left",
                                     turn_radius=30.0)
        out = predict_surrounding(sv, 0.1)
        assert (out.x, out.y, out.psi) == (sv.x, sv.y, sv.psi)

    def test_speed_preserved_exactly(self):
        rng = np.random.default_rng(2)
        blocks = rng.uniform([-50, -50, 0, -3], [50, 50, 15, 3], size=(40, 4))
        yawrps = rng.choice([0.0, 1 / 20.0, -1 / 30.0], size=40)
        out = surrounding_block_step(blocks, yawrps, 0.1)
        assert np.array_equal(out[:, 2], blocks[:, 2])

    def test_block_jacobian_matches_fd(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            blk = rng.uniform([-50, -50, 0.5, -3], [50, 50, 15, 3], size=(1, 4))
            yaw = rng.choice([0.0, 1 / 20.0, -1 / 30.0], size=1)
            J = surrounding_block_jacobian(blk, yaw, 0.1)[0]
            fd = fd_jacobian(lambda b: surrounding_block_step(b[None, :], yaw, 0.1)[0],
                             blk[0])
            assert rel_error(J, fd) < 1e-6

    def test_invalid_intent_rejected(self):
        with pytest.raises(ContractViolation):
            SurroundingVehicleState(x=0, y=0, v=1.0, psi=0.0, intent="u-turn")
        with pytest.raises(ContractViolation):
            SurroundingVehicleState(x=0, y=0, v=1.0, psi=0.0, intent="left",
                                    turn_radius=0.0)


def test_rollout_composition_consistency():
    # An N-step rollout equals N sequential single steps bit for bit.
    m = BicycleModel(dt=0.1)
    rng = np.random.default_rng(4)
    s = np.array([8.0, 0.1, 0.05, 1.0, 2.0, 0.3])
    actions = rng.uniform([-0.2, -1.0], [0.2, 1.0], size=(10, 2))
    s_seq = s.copy()
    for a in actions:
        s_seq = m.step(s_seq, a)
    s_again = s.copy()
    for a in actions:
        s_again = m.step(s_again, a)
    assert np.array_equal(s_seq, s_again)


def test_wrap_angle_range_and_identity():
    th = np.linspace(-10, 10, 201)
    w = wrap_angle(th)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    assert np.allclose(np.cos(w), np.cos(th))
    assert np.allclose(np.sin(w), np.sin(th))
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
