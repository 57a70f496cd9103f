"""Discrete-time differentiable dynamics with exact Jacobians.

Three models live here: a double integrator used as the verification system,
the dynamic bicycle model for the ego vehicle (the numerically stable
discrete-time formulation, parameters from config), and the constant-speed
kinematic predictor for surrounding vehicles.

State and action conventions are fixed:
  double integrator  s = (p, v),                    a = (accel,)
  bicycle            s = (v_x, v_y, r_y, x, y, psi), a = (steer, accel)
  surrounding block  s = (x, y, v, psi)

All step functions accept single states ``(n,)`` or batches ``(B, n)`` and are
deterministic.  ``jacobians`` returns (d s'/d s, d s'/d a) matching central
finite differences of ``step``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation

logger = logging.getLogger(__name__)


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    return np.pi - (np.pi - np.asarray(theta, dtype=np.float64)) % (2.0 * np.pi)


class DynamicsModel:
    """Base: a deterministic transition s' = f(s, a) with exact Jacobians."""

    state_dim: int
    action_dim: int
    dt: float

    def step(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _batch(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        single = s.ndim == 1
        if single:
            s = s[None, :]
            a = a[None, :]
        if s.shape[1] != self.state_dim or a.shape[1] != self.action_dim:
            raise ContractViolation(
                f"expected state dim {self.state_dim} and action dim {self.action_dim}, "
                f"got {s.shape} and {a.shape}"
            )
        if s.shape[0] != a.shape[0]:
            raise ContractViolation("state and action batch sizes disagree")
        return s, a, single


class DoubleIntegrator(DynamicsModel):
    """p' = p + v dt, v' = v + a dt.  Position constraints have relative degree 2."""

    state_dim = 2
    action_dim = 1

    def __init__(self, dt: float = 0.1):
        if dt <= 0.0:
            raise ContractViolation("dt must be positive")
        self.dt = float(dt)

    def step(self, s, a):
        s, a, single = self._batch(s, a)
        out = np.empty_like(s)
        out[:, 0] = s[:, 0] + s[:, 1] * self.dt
        out[:, 1] = s[:, 1] + a[:, 0] * self.dt
        return out[0] if single else out

    def jacobians(self, s, a):
        s, a, single = self._batch(s, a)
        n = s.shape[0]
        A = np.tile(np.array([[1.0, self.dt], [0.0, 1.0]]), (n, 1, 1))
        B = np.tile(np.array([[0.0], [self.dt]]), (n, 1, 1))
        return (A[0], B[0]) if single else (A, B)


@dataclass(frozen=True)
class BicycleParams:
    """Physical parameters of the ego vehicle, typical mid-size sedan.

    Cornering stiffnesses are negative per the tire-force convention
    F_y = k * tan(slip).  None of these values is pinned by theory; they are
    config entries and any consistent set works.
    """

    mass: float = 1412.0          # kg
    inertia_z: float = 1536.7     # kg m^2
    length_front: float = 1.06    # m, axle to CoG
    length_rear: float = 1.85     # m
    stiffness_front: float = -128916.0  # N/rad
    stiffness_rear: float = -85944.0    # N/rad
    steer_max: float = 0.4        # rad
    accel_max: float = 3.0        # m/s^2
    v_x_min: float = 0.5          # m/s, validity bound of the formulation
    length: float = 4.8           # m, bumper to bumper (used by constraint circles)
    width: float = 2.0            # m


class BicycleModel(DynamicsModel):
    """Numerically stable discrete dynamic bicycle model.

    The lateral velocity and yaw rate updates are rational in v_x with
    denominators bounded away from zero for v_x >= v_x_min, which is what makes
    the discretization stable at low speed.  v_x is clamped at the validity
    bound (with a one-time warning); the clamp zeroes the corresponding
    Jacobian row as the subgradient.
    """

    state_dim = 6
    action_dim = 2
    IDX_VX, IDX_VY, IDX_R, IDX_X, IDX_Y, IDX_PSI = range(6)

    def __init__(self, params: BicycleParams | None = None, dt: float = 0.1):
        if dt <= 0.0:
            raise ContractViolation("dt must be positive")
        self.p = params or BicycleParams()
        self.dt = float(dt)
        self._warned_clamp = False

    def _clip_action(self, a):
        return np.stack([
            np.clip(a[:, 0], -self.p.steer_max, self.p.steer_max),
            np.clip(a[:, 1], -self.p.accel_max, self.p.accel_max),
        ], axis=1)

    def step(self, s, a):
        s, a, single = self._batch(s, a)
        a = self._clip_action(a)
        p, dt = self.p, self.dt
        vx, vy, r = s[:, 0], s[:, 1], s[:, 2]
        x, y, psi = s[:, 3], s[:, 4], s[:, 5]
        steer, acc = a[:, 0], a[:, 1]

        vx_new = vx + dt * acc
        if np.any(vx_new < p.v_x_min) and not self._warned_clamp:
            logger.warning("bicycle model: v_x clamped at validity bound %.2f m/s", p.v_x_min)
            self._warned_clamp = True
        vx_new = np.maximum(vx_new, p.v_x_min)

        num_vy = (p.mass * vx * vy + dt * (p.length_front * p.stiffness_front
                                           - p.length_rear * p.stiffness_rear) * r
                  - dt * p.stiffness_front * steer * vx - dt * p.mass * vx ** 2 * r)
        den_vy = p.mass * vx - dt * (p.stiffness_front + p.stiffness_rear)
        num_r = (p.inertia_z * vx * r + dt * (p.length_front * p.stiffness_front
                                              - p.length_rear * p.stiffness_rear) * vy
                 - dt * p.length_front * p.stiffness_front * steer * vx)
        den_r = p.inertia_z * vx - dt * (p.length_front ** 2 * p.stiffness_front
                                         + p.length_rear ** 2 * p.stiffness_rear)

        out = np.empty_like(s)
        out[:, 0] = vx_new
        out[:, 1] = num_vy / den_vy
        out[:, 2] = num_r / den_r
        out[:, 3] = x + dt * (vx * np.cos(psi) - vy * np.sin(psi))
        out[:, 4] = y + dt * (vx * np.sin(psi) + vy * np.cos(psi))
        out[:, 5] = wrap_angle(psi + dt * r)
        return out[0] if single else out

    def jacobians(self, s, a):
        s, a, single = self._batch(s, a)
        a = self._clip_action(a)
        p, dt = self.p, self.dt
        n = s.shape[0]
        vx, vy, r = s[:, 0], s[:, 1], s[:, 2]
        psi = s[:, 5]
        steer = a[:, 0]

        A = np.zeros((n, 6, 6))
        B = np.zeros((n, 6, 2))

        clamped = (vx + dt * a[:, 1]) < p.v_x_min
        A[:, 0, 0] = np.where(clamped, 0.0, 1.0)
        B[:, 0, 1] = np.where(clamped, 0.0, dt)

        kdiff = p.length_front * p.stiffness_front - p.length_rear * p.stiffness_rear
        num_vy = (p.mass * vx * vy + dt * kdiff * r
                  - dt * p.stiffness_front * steer * vx - dt * p.mass * vx ** 2 * r)
        den_vy = p.mass * vx - dt * (p.stiffness_front + p.stiffness_rear)
        dnum_dvx = p.mass * vy - dt * p.stiffness_front * steer - 2.0 * dt * p.mass * vx * r
        A[:, 1, 0] = (dnum_dvx * den_vy - num_vy * p.mass) / den_vy ** 2
        A[:, 1, 1] = p.mass * vx / den_vy
        A[:, 1, 2] = (dt * kdiff - dt * p.mass * vx ** 2) / den_vy
        B[:, 1, 0] = -dt * p.stiffness_front * vx / den_vy

        num_r = (p.inertia_z * vx * r + dt * kdiff * vy
                 - dt * p.length_front * p.stiffness_front * steer * vx)
        den_r = p.inertia_z * vx - dt * (p.length_front ** 2 * p.stiffness_front
                                         + p.length_rear ** 2 * p.stiffness_rear)
        dnum_dvx = p.inertia_z * r - dt * p.length_front * p.stiffness_front * steer
        A[:, 2, 0] = (dnum_dvx * den_r - num_r * p.inertia_z) / den_r ** 2
        A[:, 2, 1] = dt * kdiff / den_r
        A[:, 2, 2] = p.inertia_z * vx / den_r
        B[:, 2, 0] = -dt * p.length_front * p.stiffness_front * vx / den_r

        cps, sps = np.cos(psi), np.sin(psi)
        A[:, 3, 0] = dt * cps
        A[:, 3, 1] = -dt * sps
        A[:, 3, 3] = 1.0
        A[:, 3, 5] = dt * (-vx * sps - vy * cps)
        A[:, 4, 0] = dt * sps
        A[:, 4, 1] = dt * cps
        A[:, 4, 4] = 1.0
        A[:, 4, 5] = dt * (vx * cps - vy * sps)
        A[:, 5, 2] = dt
        A[:, 5, 5] = 1.0
        return (A[0], B[0]) if single else (A, B)


# ---------------------------------------------------------------------------
# Surrounding-vehicle kinematic predictor
# ---------------------------------------------------------------------------


@dataclass
class SurroundingVehicleState:
    """Pose, speed and route intent of one surrounding vehicle.

    ``turn_sign`` orients the constant-rate yaw change for turning intents
    (+1 increases heading); the recurrence itself only uses speed and radius.
    """

    x: float
    y: float
    v: float
    psi: float
    intent: str = "straight"
    turn_radius: float = 20.0
    turn_sign: float = 1.0

    def __post_init__(self):
        if self.intent not in ("straight", "left", "right"):
            raise ContractViolation(f"unknown intent {self.intent!r}")
        if self.v < 0.0:
            raise ContractViolation("surrounding speed must be nonnegative")
        if self.intent != "straight" and self.turn_radius <= 0.0:
            raise ContractViolation("turn radius must be positive for turning intents")


def predict_surrounding(sv: SurroundingVehicleState, dt: float) -> SurroundingVehicleState:
    """One step of the constant-speed recurrence; speed is preserved exactly."""
    x = sv.x + sv.v * np.cos(sv.psi) * dt
    y = sv.y + sv.v * np.sin(sv.psi) * dt
    if sv.intent == "straight":
        psi = sv.psi
    else:
        psi = sv.psi + sv.turn_sign * (sv.v / sv.turn_radius) * dt
    return replace(sv, x=float(x), y=float(y), psi=float(psi))


def surrounding_block_step(blocks: np.ndarray, yaw_rate_per_speed: np.ndarray,
                           dt: float) -> np.ndarray:
    """Vectorized predictor over (B, 4) blocks (x, y, v, psi).

    ``yaw_rate_per_speed`` is turn_sign/R for turning vehicles and 0 otherwise,
    so psi' = psi + yaw_rate_per_speed * v * dt.
    """
    x, y, v, psi = blocks[..., 0], blocks[..., 1], blocks[..., 2], blocks[..., 3]
    out = np.empty_like(blocks)
    out[..., 0] = x + v * np.cos(psi) * dt
    out[..., 1] = y + v * np.sin(psi) * dt
    out[..., 2] = v
    out[..., 3] = psi + yaw_rate_per_speed * v * dt
    return out


def surrounding_block_jacobian(blocks: np.ndarray, yaw_rate_per_speed: np.ndarray,
                               dt: float) -> np.ndarray:
    """d block'/d block, shape (..., 4, 4)."""
    v, psi = blocks[..., 2], blocks[..., 3]
    J = np.zeros(blocks.shape[:-1] + (4, 4))
    J[..., 0, 0] = 1.0
    J[..., 0, 2] = np.cos(psi) * dt
    J[..., 0, 3] = -v * np.sin(psi) * dt
    J[..., 1, 1] = 1.0
    J[..., 1, 2] = np.sin(psi) * dt
    J[..., 1, 3] = v * np.cos(psi) * dt
    J[..., 2, 2] = 1.0
    J[..., 3, 2] = yaw_rate_per_speed * dt
    J[..., 3, 3] = 1.0
    return J
