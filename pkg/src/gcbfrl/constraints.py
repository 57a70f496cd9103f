"""Constraint functions with the sign convention h <= 0 safe.

Barrier bounds link states several steps apart: a constraint of relative
degree m is enforced as h(s_{t+m}) <= (1-alpha)^m h(s_t).  Collision
constraints encode each vehicle as a front and a rear circle and compare
squared center distances against a safety radius, which keeps gradients
smooth through contact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicsModel
from .errors import ContractViolation
from .nets import GaussianPolicy, policy_mean, policy_mean_state_jacobian


class StateConstraint:
    """A differentiable scalar function of the model state."""

    def value(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, s: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class ConstraintSpec:
    """One constraint h with its relative degree, conservativeness and threshold."""

    h: StateConstraint
    relative_degree: int
    alpha: float
    threshold: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ContractViolation("alpha must lie strictly inside (0, 1)")
        if self.relative_degree < 1:
            raise ContractViolation("relative degree must be at least 1")


def gcbf_bound(h_now, alpha: float, m: int):
    """Barrier bound (1-alpha)^m * h_now; the constraint is h(s_{t+m}) <= bound.

    The closed endpoints alpha = 0 and alpha = 1 are accepted for test use.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation("alpha must lie in [0, 1]")
    if m < 1:
        raise ContractViolation("m must be at least 1")
    return (1.0 - alpha) ** m * np.asarray(h_now, dtype=np.float64)


@dataclass(frozen=True)
class CircleGeometry:
    """Two-circle cover of a vehicle plus safety margins.

    Center offsets run along the heading from the vehicle center (defaults
    +-L/4 for L = 4.8 m).  d_safe and d_r_safe are not taken from any source;
    they are config values.
    """

    front_offset: float = 1.2
    rear_offset: float = -1.2
    d_safe: float = 2.5
    d_r_safe: float = 1.5

    def __post_init__(self):
        if self.d_safe <= 0.0 or self.d_r_safe <= 0.0:
            raise ContractViolation("safety distances must be positive")


def circle_centers(pose: np.ndarray, geom: CircleGeometry) -> np.ndarray:
    """Front and rear circle centers for poses (..., 3) as (x, y, psi); shape (..., 2, 2)."""
    pose = np.asarray(pose, dtype=np.float64)
    x, y, psi = pose[..., 0], pose[..., 1], pose[..., 2]
    heading = np.stack([np.cos(psi), np.sin(psi)], axis=-1)
    center = np.stack([x, y], axis=-1)
    return np.stack([center + self_off * heading
                     for self_off in (geom.front_offset, geom.rear_offset)], axis=-2)


def two_circle_h(ego_pose: np.ndarray, sv_pose: np.ndarray, geom: CircleGeometry) -> np.ndarray:
    """Collision values d_safe^2 - dist^2 for the 4 circle pairs, <= 0 iff safe.

    Order: (ego front x sv front, ego front x sv rear, ego rear x sv front,
    ego rear x sv rear); batched poses broadcast to (..., 4).
    """
    ego_c = circle_centers(ego_pose, geom)   # (..., 2, 2)
    sv_c = circle_centers(sv_pose, geom)
    diff = ego_c[..., :, None, :] - sv_c[..., None, :, :]   # (..., 2, 2, 2)
    dist2 = (diff ** 2).sum(axis=-1)
    return (geom.d_safe ** 2 - dist2).reshape(dist2.shape[:-2] + (4,))


def road_margin_h(ego_pose: np.ndarray, road_point: np.ndarray, geom: CircleGeometry) -> np.ndarray:
    """Road-margin values d_r_safe^2 - dist^2 per ego circle against one road point."""
    ego_c = circle_centers(ego_pose, geom)
    road_point = np.asarray(road_point, dtype=np.float64)
    diff = ego_c - road_point[..., None, :]
    dist2 = (diff ** 2).sum(axis=-1)
    return geom.d_r_safe ** 2 - dist2


def aggregate_h(values: np.ndarray, temperature: float) -> float:
    """Smooth maximum tau * log sum exp(h_i / tau); upper-bounds max(values)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ContractViolation("aggregate_h needs at least one value")
    if temperature <= 0.0:
        raise ContractViolation("temperature must be positive")
    top = values.max()
    return float(top + temperature * np.log(np.exp((values - top) / temperature).sum()))


def aggregate_h_weights(values: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax weights d aggregate_h / d h_i; nonnegative, sum to 1."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max(axis=-1, keepdims=True)
    w = np.exp((values - top) / temperature)
    return w / w.sum(axis=-1, keepdims=True)


def violation_distance(ego_poses: np.ndarray, sv_poses: np.ndarray,
                       geom: CircleGeometry, sv_mask: np.ndarray | None = None) -> float:
    """Per-step mean over a trajectory of summed positive-part pair violations.

    ego_poses (T, 3), sv_poses (T, K, 3); masked vehicles contribute nothing.
    Zero iff no circle pair ever comes closer than d_safe.
    """
    ego_poses = np.asarray(ego_poses, dtype=np.float64)
    sv_poses = np.asarray(sv_poses, dtype=np.float64)
    if ego_poses.ndim != 2 or ego_poses.shape[0] == 0:
        raise ContractViolation("expected a nonempty (T, 3) ego pose trajectory")
    h = two_circle_h(ego_poses[:, None, :], sv_poses, geom)   # (T, K, 4)
    pos = np.maximum(h, 0.0)
    if sv_mask is not None:
        pos = pos * np.asarray(sv_mask, dtype=np.float64)[..., None]
    return float(pos.sum(axis=(1, 2)).mean())


# ---------------------------------------------------------------------------
# Relative-degree verification
# ---------------------------------------------------------------------------


@dataclass
class DegreeCheck:
    """Numeric relative-degree result with the per-step influence norms."""

    ok: bool
    inconclusive: bool
    influence_norms: list[float]
    message: str

    def __bool__(self) -> bool:
        return self.ok


def verify_relative_degree(model: DynamicsModel, h: StateConstraint, s: np.ndarray,
                           policy: GaussianPolicy | None, params: np.ndarray | None,
                           m: int, zero_tol: float = 1e-8,
                           obs_slice: slice | None = None) -> DegreeCheck:
    """Check numerically that the first action influences h only after m steps.

    Propagates M_i = d s_{t+i} / d a_t through the closed-loop rollout and
    tests |dh(s_{t+i})/da_t| <= zero_tol for i < m and > zero_tol at i = m.
    ``obs_slice`` maps model state to the policy input when they differ.
    """
    if m < 1:
        raise ContractViolation("m must be at least 1")
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    obs_slice = obs_slice if obs_slice is not None else slice(None)

    def act(state):
        if policy is None:
            return np.zeros(model.action_dim)
        return policy_mean(policy, params, state[obs_slice])

    state = s.copy()
    a0 = act(state)
    _, B0 = model.jacobians(state, a0)
    M = B0  # d s_{t+1} / d a_t
    state = model.step(state, a0)
    norms = []
    for i in range(1, m + 1):
        gh = h.grad(state[None, :])[0]
        norms.append(float(np.linalg.norm(gh @ M)))
        if i == m:
            break
        a = act(state)
        A, B = model.jacobians(state, a)
        if policy is None:
            M = A @ M
        else:
            dpi_ds = policy_mean_state_jacobian(policy, params, state[obs_slice][None, :])[0]
            full = np.zeros((policy.action_dim, state.size))
            full[:, obs_slice] = dpi_ds
            M = (A + B @ full) @ M
        state = model.step(state, a)

    final_h_grad = float(np.linalg.norm(h.grad(state[None, :])[0]))
    if final_h_grad < 1e-12:
        return DegreeCheck(False, True, norms,
                           "constraint gradient vanishes at the final state; inconclusive")
    early = [n for n in norms[:-1] if n > zero_tol]
    ok = not early and norms[-1] > zero_tol
    msg = "ok" if ok else (
        f"influence norms {norms}: expected zeros before step {m} and nonzero at {m}")
    return DegreeCheck(ok, False, norms, msg)
