"""m-step model-predictive evaluation of returns and barrier constraints.

The rollout drives the dynamics model with mean policy actions, recording the
states, actions and step Jacobians needed for exact policy-parameter
gradients.  Two gradient routes are provided and tested against each other:

* a reverse sweep through the recorded tape (used in training), and
* the forward state-sensitivity recursion, propagating Phi = d s_i / d theta
  step by step (one pass per start state; test-scale only).

Gradients flow through actions AND through the model states the actions
produce, so a constraint of relative degree m gets an exactly zero gradient
from any rollout shorter than m steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constraints import (ConstraintSpec, StateConstraint, aggregate_h,
                          aggregate_h_weights, gcbf_bound)
from .dynamics import DynamicsModel
from .errors import ContractViolation, NumericError
from .nets import (GaussianPolicy, MlpSpec, mlp_forward, mlp_vjp, policy_mean,
                   policy_mean_param_jacobian, policy_mean_state_jacobian,
                   policy_mean_vjp)


class RolloutModel(DynamicsModel):
    """Dynamics plus a differentiable per-step reward and an observation slice.

    ``obs_slice`` selects the policy/critic input from the model state when the
    model carries extra internal dimensions.
    """

    obs_slice: slice = slice(None)

    def reward(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def reward_grads(self, s: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


@dataclass
class RolloutBatch:
    """Recorded mean-action rollout: states (B, S+1, n), steps S, and Jacobians."""

    model: RolloutModel
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    gamma: float
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    valid: np.ndarray | None = None
    truncated: bool = False

    @property
    def steps(self) -> int:
        return self.actions.shape[1]

    @property
    def n_starts(self) -> int:
        return self.states.shape[0]

    @property
    def start_states(self) -> np.ndarray:
        return self.states[:, 0, :]


def rollout(model: RolloutModel, policy: GaussianPolicy, params: np.ndarray,
            start_states: np.ndarray, steps: int, gamma: float = 0.99,
            with_jacobians: bool = True) -> RolloutBatch:
    """Deterministic mean-action rollout of ``steps`` model steps per start state.

    A start state that turns non-finite is frozen at its last finite state and
    masked out; the batch is then flagged truncated.
    """
    if steps < 1:
        raise ContractViolation("rollout needs at least one step")
    if not 0.0 <= gamma <= 1.0:
        raise ContractViolation("gamma must lie in [0, 1]")
    starts = np.asarray(start_states, dtype=np.float64)
    if starts.ndim != 2 or starts.shape[1] != model.state_dim:
        raise ContractViolation(f"start states must be (B, {model.state_dim})")
    nb = starts.shape[0]

    states = np.empty((nb, steps + 1, model.state_dim))
    actions = np.empty((nb, steps, model.action_dim))
    rewards = np.empty((nb, steps))
    A = np.empty((nb, steps, model.state_dim, model.state_dim)) if with_jacobians else None
    B = np.empty((nb, steps, model.state_dim, model.action_dim)) if with_jacobians else None
    valid = np.ones(nb, dtype=bool)

    states[:, 0] = starts
    s = starts
    for j in range(steps):
        a = policy_mean(policy, params, s[:, model.obs_slice])
        actions[:, j] = a
        rewards[:, j] = model.reward(s, a)
        if with_jacobians:
            A[:, j], B[:, j] = model.jacobians(s, a)
        s_next = model.step(s, a)
        bad = ~np.isfinite(s_next).all(axis=1)
        if bad.any():
            s_next = np.where(bad[:, None], s, s_next)
            valid &= ~bad
        states[:, j + 1] = s_next
        s = s_next

    return RolloutBatch(model=model, states=states, actions=actions, rewards=rewards,
                        gamma=gamma, A=A, B=B, valid=valid, truncated=not valid.all())


def _embed_obs_grad(model: RolloutModel, grad_obs: np.ndarray) -> np.ndarray:
    full = np.zeros((grad_obs.shape[0], model.state_dim))
    full[:, model.obs_slice] = grad_obs
    return full


def objective_value(batch: RolloutBatch, critic_spec: MlpSpec, critic_params: np.ndarray,
                    window: int | None = None) -> float:
    """Mean discounted (m+1)-reward return with a bootstrap value at the end."""
    w = batch.steps - 1 if window is None else window
    _check_window(batch, w)
    disc = batch.gamma ** np.arange(w + 1)
    g = (batch.rewards[:, :w + 1] * disc).sum(axis=1)
    v_boot = mlp_forward(critic_spec, critic_params,
                         batch.states[:, w + 1, batch.model.obs_slice])[:, 0]
    g = g + batch.gamma ** w * v_boot
    return float(g[batch.valid].mean())


def _check_window(batch: RolloutBatch, window: int):
    if window < 0 or window + 1 > batch.steps:
        raise ContractViolation(
            f"objective window {window} needs {window + 1} recorded steps, "
            f"batch has {batch.steps}")
    if batch.A is None and window >= 0:
        pass


def returns_per_start(batch: RolloutBatch, critic_spec: MlpSpec, critic_params: np.ndarray,
                      window: int | None = None) -> np.ndarray:
    """Per-start discounted returns (critic targets)."""
    w = batch.steps - 1 if window is None else window
    _check_window(batch, w)
    disc = batch.gamma ** np.arange(w + 1)
    g = (batch.rewards[:, :w + 1] * disc).sum(axis=1)
    v_boot = mlp_forward(critic_spec, critic_params,
                         batch.states[:, w + 1, batch.model.obs_slice])[:, 0]
    return g + batch.gamma ** w * v_boot


def objective_and_gradient(batch: RolloutBatch, policy: GaussianPolicy, params: np.ndarray,
                           critic_spec: MlpSpec, critic_params: np.ndarray,
                           window: int | None = None) -> tuple[float, np.ndarray]:
    """Return estimate and its exact pathwise gradient w.r.t. policy parameters.

    Differentiates through actions and model states; the critic is a constant
    function of its own parameters here, but its input gradient feeds the
    bootstrap term.
    """
    model = batch.model
    w = batch.steps - 1 if window is None else window
    _check_window(batch, w)
    if batch.A is None:
        raise ContractViolation("batch was recorded without Jacobians")
    nb = batch.n_starts
    nv = int(batch.valid.sum())
    if nv == 0:
        raise ContractViolation("no valid start states in batch")
    vmask = batch.valid.astype(np.float64)[:, None]

    j_r = objective_value(batch, critic_spec, critic_params, w)

    boot_obs = batch.states[:, w + 1, model.obs_slice]
    _, dv_dobs = mlp_vjp(critic_spec, critic_params, boot_obs,
                         np.full((nb, 1), batch.gamma ** w))
    lam = _embed_obs_grad(model, dv_dobs) * vmask
    grad = np.zeros(policy.param_count())
    for j in range(w, -1, -1):
        s_j = batch.states[:, j]
        a_j = batch.actions[:, j]
        dr_ds, dr_da = model.reward_grads(s_j, a_j)
        gj = batch.gamma ** j
        u = gj * dr_da * vmask + np.einsum("bi,bij->bj", lam, batch.B[:, j])
        pg, in_g = policy_mean_vjp(policy, params, s_j[:, model.obs_slice], u)
        grad += pg
        lam = (gj * dr_ds * vmask
               + np.einsum("bi,bij->bj", lam, batch.A[:, j])
               + _embed_obs_grad(model, in_g))
    grad /= nv
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite objective gradient")
    return j_r, grad


def _reverse_sweep(batch: RolloutBatch, policy: GaussianPolicy, params: np.ndarray,
                   lam: np.ndarray, m: int) -> np.ndarray:
    """Backpropagate a per-start state cotangent from step m to the parameters."""
    model = batch.model
    grad = np.zeros(policy.param_count())
    for j in range(m - 1, -1, -1):
        u = np.einsum("bi,bij->bj", lam, batch.B[:, j])
        pg, in_g = policy_mean_vjp(policy, params, batch.states[:, j, model.obs_slice], u)
        grad += pg
        lam = np.einsum("bi,bij->bj", lam, batch.A[:, j]) + _embed_obs_grad(model, in_g)
    if not np.all(np.isfinite(grad)):
        bad = np.where(~np.isfinite(grad))[0]
        raise NumericError(f"non-finite constraint gradient (first bad index {bad[0]})")
    return grad


def _constraint_reverse_grad(batch: RolloutBatch, policy: GaussianPolicy,
                             params: np.ndarray, h: StateConstraint,
                             m: int) -> np.ndarray:
    """Reverse sweep for d E[h(s_{t+m})] / d theta."""
    nv = int(batch.valid.sum())
    vmask = batch.valid.astype(np.float64)[:, None]
    lam = h.grad(batch.states[:, m]) * vmask
    return _reverse_sweep(batch, policy, params, lam, m) / nv


def constraint_value_and_gradient(batch: RolloutBatch, policy: GaussianPolicy,
                                  params: np.ndarray, spec: ConstraintSpec,
                                  ) -> tuple[float, float, np.ndarray]:
    """(J_C, barrier bound, d J_C/d theta) for the m-step constraint.

    J_C is the batch mean of h at the m-th predicted state; the bound is the
    batch mean of (1-alpha)^m h at the start states.
    """
    m = spec.relative_degree
    if batch.steps < m:
        raise ContractViolation(f"batch has {batch.steps} steps, constraint needs {m}")
    if batch.A is None:
        raise ContractViolation("batch was recorded without Jacobians")
    valid = batch.valid
    j_c = float(spec.h.value(batch.states[:, m])[valid].mean())
    bound = float(gcbf_bound(spec.h.value(batch.states[:, 0]), spec.alpha, m)[valid].mean())
    grad = _constraint_reverse_grad(batch, policy, params, spec.h, m)
    return j_c, bound, grad


def constraint_residual_lse(batch: RolloutBatch, policy: GaussianPolicy,
                            params: np.ndarray, spec: ConstraintSpec,
                            temperature: float) -> tuple[float, np.ndarray]:
    """Smooth maximum over start states of the per-start barrier residual
    h(s_{t+m}) - (1-alpha)^m h(s_t), with its exact policy gradient.

    This enforces the barrier bound per start state (softly) rather than on the
    batch mean; the residual's gradient is the softmax-weighted combination of
    the per-start constraint gradients (the bound term carries no policy
    dependence).
    """
    m = spec.relative_degree
    if batch.steps < m:
        raise ContractViolation(f"batch has {batch.steps} steps, constraint needs {m}")
    if batch.A is None:
        raise ContractViolation("batch was recorded without Jacobians")
    h_m = spec.h.value(batch.states[:, m])
    h_0 = spec.h.value(batch.states[:, 0])
    residuals = h_m - gcbf_bound(h_0, spec.alpha, m)
    z = aggregate_h(residuals[batch.valid], temperature)
    weights = np.zeros(batch.n_starts)
    weights[batch.valid] = aggregate_h_weights(residuals[batch.valid], temperature)
    lam = spec.h.grad(batch.states[:, m]) * weights[:, None]
    grad = _reverse_sweep(batch, policy, params, lam, m)
    return z, grad


def constraint_gradient_recursion(batch: RolloutBatch, policy: GaussianPolicy,
                                  params: np.ndarray, h: StateConstraint,
                                  m: int) -> np.ndarray:
    """Forward sensitivity route: Phi_{i+1} = A_i Phi_i + B_i Psi_i, then h' Phi_m.

    Psi_i is the action sensitivity d a_i/d theta = dpi/ds Phi_i + dpi/dtheta.
    One (state_dim x P) carry per start state, so test-scale only; must agree
    with the reverse sweep to near machine precision.
    """
    model = batch.model
    if batch.steps < m:
        raise ContractViolation(f"batch has {batch.steps} steps, constraint needs {m}")
    n_p = policy.param_count()
    grads = np.zeros(n_p)
    nv = int(batch.valid.sum())
    for b in range(batch.n_starts):
        if not batch.valid[b]:
            continue
        phi = np.zeros((model.state_dim, n_p))
        for i in range(m):
            obs = batch.states[b, i, model.obs_slice]
            dpi_ds = policy_mean_state_jacobian(policy, params, obs[None, :])[0]
            dpi_dth = policy_mean_param_jacobian(policy, params, obs)
            psi = dpi_ds @ phi[model.obs_slice, :] + dpi_dth
            phi = batch.A[b, i] @ phi + batch.B[b, i] @ psi
        grads += h.grad(batch.states[b, m][None, :])[0] @ phi
    return grads / nv


def pointwise_constraint_values(batch: RolloutBatch, policy: GaussianPolicy,
                                params: np.ndarray, h: StateConstraint, n_steps: int,
                                thresholds: np.ndarray | None = None,
                                ) -> list[tuple[float, float, np.ndarray]]:
    """One (value, threshold, gradient) triple per rollout step i = 1..N.

    This is the pointwise constraint formulation the barrier variant replaces;
    each step is posed as E[h(s_{t+i})] <= d_i.
    """
    if batch.steps < n_steps:
        raise ContractViolation(f"batch has {batch.steps} steps, need {n_steps}")
    if thresholds is None:
        thresholds = np.zeros(n_steps)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size != n_steps:
        raise ContractViolation("one threshold per constrained step required")
    out = []
    valid = batch.valid
    for i in range(1, n_steps + 1):
        j_c = float(h.value(batch.states[:, i])[valid].mean())
        grad = _constraint_reverse_grad(batch, policy, params, h, i)
        out.append((j_c, float(thresholds[i - 1]), grad))
    return out
