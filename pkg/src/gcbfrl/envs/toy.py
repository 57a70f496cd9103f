"""Double-integrator verification environment with an exact prediction model.

The task is to hold position near p_ref under the quadratic penalty
(p - p_ref)^2 + 0.01 a^2 while never crossing the barrier h = p - p_max <= 0.
The prediction model shares the environment dynamics bit for bit, so any
constraint violation here is attributable to the training algorithm, not to
model mismatch.  The position constraint has relative degree 2.
"""

from __future__ import annotations

import numpy as np

from ..constraints import StateConstraint
from ..dynamics import DoubleIntegrator
from ..rollout import RolloutModel
from .base import SafeModelEnv


class PositionLimit(StateConstraint):
    """h = p - p_max, safe when nonpositive."""

    def __init__(self, p_max: float):
        self.p_max = float(p_max)

    def value(self, s):
        return np.asarray(s, dtype=np.float64)[..., 0] - self.p_max

    def grad(self, s):
        s = np.asarray(s, dtype=np.float64)
        g = np.zeros_like(s)
        g[..., 0] = 1.0
        return g


class ToyModel(RolloutModel):
    def __init__(self, dt: float, p_ref: float):
        self._core = DoubleIntegrator(dt)
        self.state_dim = 2
        self.action_dim = 1
        self.dt = dt
        self.p_ref = float(p_ref)

    def step(self, s, a):
        return self._core.step(s, a)

    def jacobians(self, s, a):
        return self._core.jacobians(s, a)

    def reward(self, s, a):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return (s[:, 0] - self.p_ref) ** 2 + 0.01 * a[:, 0] ** 2

    def reward_grads(self, s, a):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        dr_ds = np.zeros_like(s)
        dr_ds[:, 0] = 2.0 * (s[:, 0] - self.p_ref)
        dr_da = 0.02 * a
        return dr_ds, dr_da


class ToySafeEnv(SafeModelEnv):
    """See module docstring.

    Feasible initialization is a property of the scenario: the default ranges
    keep a coasting (zero-action) policy safe for a whole episode
    (p_start_max + v_start_max * T * dt < p_max) and keep even a worst-case
    bang-bang transient toward p_ref below the barrier (overshoot is bounded by
    the acceleration distance), so the batch-mean barrier constraint on updates
    is not asked to compensate for an infeasible start.
    """

    obs_dim = 2
    action_dim = 1

    def __init__(self, dt: float = 0.1, p_max: float = 1.0, p_ref: float = 0.2,
                 a_max: float = 1.0, episode_steps: int = 50,
                 p_start=(-0.3, 0.0), v_start=(-0.1, 0.1)):
        self.dt = dt
        self.p_max = float(p_max)
        self.action_scale = np.array([float(a_max)])
        self.episode_steps = int(episode_steps)
        self.p_start = p_start
        self.v_start = v_start
        self._model = ToyModel(dt, p_ref)
        self._constraint = PositionLimit(p_max)
        self._state = None
        self._t = 0

    def reset(self, rng):
        self._state = np.array([rng.uniform(*self.p_start), rng.uniform(*self.v_start)])
        self._t = 0
        return self._state.copy()

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1),
                    -self.action_scale, self.action_scale)
        penalty = float(self._model.reward(self._state, a)[0])
        self._state = self._model.step(self._state, a)
        self._t += 1
        h = float(self._constraint.value(self._state[None, :])[0])
        info = {"violation": max(h, 0.0), "h_max": h}
        done = self._t >= self.episode_steps
        return self._state.copy(), penalty, done, info

    def build_model(self, metas):
        return self._model

    def model_start_states(self, obs, metas):
        return np.asarray(obs, dtype=np.float64)

    def state_constraint(self):
        return self._constraint
