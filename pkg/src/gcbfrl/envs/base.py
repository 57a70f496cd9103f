"""Trainer-facing environment protocol.

An environment owns mutable episode state (single owner; run several instances
for parallel sampling).  Besides the usual reset/step pair it must supply the
pieces the model-predictive trainer needs: a differentiable prediction model
for a batch of recorded states, the mapping from observations to model start
states, and the scalar safety constraint defined on the model state.
"""

from __future__ import annotations

import numpy as np

from ..constraints import StateConstraint
from ..rollout import RolloutModel


class SafeModelEnv:
    obs_dim: int
    action_dim: int
    action_scale: np.ndarray
    dt: float

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool, dict]:
        """Returns (obs, penalty, done, info); info carries at least
        ``violation`` (positive-part constraint excess this step) and ``h_max``."""
        raise NotImplementedError

    def current_meta(self):
        """Prediction metadata for the current observation (route intents,
        pending actuation, ...); paired with the observation when recording."""
        return None

    def build_model(self, metas: list) -> RolloutModel:
        raise NotImplementedError

    def model_start_states(self, obs: np.ndarray, metas: list) -> np.ndarray:
        """Lift recorded observations (B, obs_dim) to model start states."""
        raise NotImplementedError

    def state_constraint(self) -> StateConstraint:
        raise NotImplementedError
