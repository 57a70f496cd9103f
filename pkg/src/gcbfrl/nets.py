"""Minimal reverse-mode differentiation for small MLPs and diagonal Gaussian policies.

Everything in this module is a pure function of its inputs and runs in float64.
Parameters travel as flat float64 vectors ("param vectors") with a fixed
flattening order: layer by layer, weight matrix first (shape ``(n_in, n_out)``,
row-major) then bias, followed by the policy log-std tail when present.  All
gradient code in the package indexes into parameters through this order, so it
must never change.

Inputs may be single vectors ``(n,)`` or batches ``(B, n)``; batch reductions
always sum/mean over axis 0 in a fixed order, keeping results deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, NumericError

LOG_STD_MIN = np.log(1e-4)
LOG_STD_MAX = np.log(10.0)


@dataclass(frozen=True)
class MlpSpec:
    """Shape and activation description of a fully connected network.

    ``output_scale`` multiplies the output elementwise; with the tanh output
    activation it maps the network output into (-scale, +scale) per dimension.
    """

    input_dim: int
    output_scale: np.ndarray
    hidden_layers: int = 2
    hidden_units: int = 256
    hidden_activation: str = "elu"
    output_activation: str = "tanh"

    def __post_init__(self):
        scale = np.asarray(self.output_scale, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "output_scale", scale)
        if self.input_dim <= 0 or self.hidden_layers < 0 or self.hidden_units <= 0:
            raise ContractViolation("all MlpSpec dimensions must be positive")
        if scale.size == 0 or not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ContractViolation("output_scale must be finite and strictly positive")
        if self.hidden_activation != "elu":
            raise ContractViolation(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("tanh", "identity"):
            raise ContractViolation(f"unsupported output activation {self.output_activation!r}")

    @property
    def output_dim(self) -> int:
        return self.output_scale.size

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_units] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum(n_in * n_out + n_out for n_in, n_out in self.layer_dims())


def _check_params(spec: MlpSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    if params.size != spec.param_count():
        raise ContractViolation(
            f"expected {spec.param_count()} parameters, got {params.size}"
        )
    return params


def unflatten_params(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat param vector into per-layer (W, b) views."""
    params = _check_params(spec, params)
    layers = []
    k = 0
    for n_in, n_out in spec.layer_dims():
        w = params[k:k + n_in * n_out].reshape(n_in, n_out)
        k += n_in * n_out
        b = params[k:k + n_out]
        k += n_out
        layers.append((w, b))
    return layers


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator,
                    final_weight_scale: float = 1.0) -> np.ndarray:
    """Glorot-normal weights, zero biases.

    ``final_weight_scale`` shrinks the last layer; a small value keeps a tanh
    output near zero initially, which is how feasible initial policies are made.
    """
    chunks = []
    dims = spec.layer_dims()
    for i, (n_in, n_out) in enumerate(dims):
        std = np.sqrt(2.0 / (n_in + n_out))
        if i == len(dims) - 1:
            std *= final_weight_scale
        w = rng.normal(0.0, std, size=(n_in, n_out))
        chunks.append(w.reshape(-1))
        chunks.append(np.zeros(n_out))
    return np.concatenate(chunks)


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ContractViolation(f"{what} must have trailing dimension {dim}, got shape {x.shape}")
    return x, single


def _forward_tape(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    """Forward pass keeping layer inputs and pre-activations for the reverse pass."""
    layers = unflatten_params(spec, params)
    h = x
    tape = []
    for li, (w, b) in enumerate(layers):
        z = h @ w + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation in layer {li}")
        tape.append((h, z))
        if li < len(layers) - 1:
            h = np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))  # ELU
        else:
            if spec.output_activation == "tanh":
                h = spec.output_scale * np.tanh(z)
            else:
                h = spec.output_scale * z
    return h, tape, layers


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network; accepts a single input or a batch."""
    xb, single = _as_batch(x, spec.input_dim, "input")
    out, _, _ = _forward_tape(spec, params, xb)
    return out[0] if single else out


def mlp_vjp(spec: MlpSpec, params: np.ndarray, x: np.ndarray,
            cotangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients of ``cotangent . output``.

    For batched inputs the parameter gradient is summed over the batch and the
    input gradient is returned per sample.
    """
    xb, single = _as_batch(x, spec.input_dim, "input")
    cb, csingle = _as_batch(cotangent, spec.output_dim, "cotangent")
    if single != csingle or cb.shape[0] != xb.shape[0]:
        raise ContractViolation("input and cotangent batch shapes disagree")
    _, tape, layers = _forward_tape(spec, params, xb)

    param_grad = np.zeros(spec.param_count())
    # Walk layers in reverse, peeling gradient slices off the flat vector.
    offsets = []
    k = 0
    for n_in, n_out in spec.layer_dims():
        offsets.append((k, n_in, n_out))
        k += n_in * n_out + n_out

    delta = cb
    for li in range(len(layers) - 1, -1, -1):
        h_in, z = tape[li]
        if li == len(layers) - 1:
            if spec.output_activation == "tanh":
                dz = delta * spec.output_scale * (1.0 - np.tanh(z) ** 2)
            else:
                dz = delta * spec.output_scale
        else:
            dz = delta * np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))
        if not np.all(np.isfinite(dz)):
            raise NumericError(f"non-finite gradient in layer {li}")
        off, n_in, n_out = offsets[li]
        param_grad[off:off + n_in * n_out] = (h_in.T @ dz).reshape(-1)
        param_grad[off + n_in * n_out:off + n_in * n_out + n_out] = dz.sum(axis=0)
        delta = dz @ layers[li][0].T

    input_grad = delta[0] if single else delta
    return param_grad, input_grad


def mlp_jvp(spec: MlpSpec, params: np.ndarray, x: np.ndarray,
            tangent_params: np.ndarray) -> np.ndarray:
    """Forward-mode directional derivative of the output along a parameter tangent."""
    xb, single = _as_batch(x, spec.input_dim, "input")
    tangent_params = _check_params(spec, tangent_params)
    layers = unflatten_params(spec, params)
    tlayers = unflatten_params(spec, tangent_params)
    h = xb
    th = np.zeros_like(xb)
    for li, ((w, b), (tw, tb)) in enumerate(zip(layers, tlayers)):
        z = h @ w + b
        tz = th @ w + h @ tw + tb
        if li < len(layers) - 1:
            h = np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))
            th = tz * np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))
        else:
            if spec.output_activation == "tanh":
                t = np.tanh(z)
                h = spec.output_scale * t
                th = tz * spec.output_scale * (1.0 - t ** 2)
            else:
                h = spec.output_scale * z
                th = tz * spec.output_scale
    return th[0] if single else th


def mlp_input_jacobian(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d output / d input, shape (out, in) or (B, out, in) for batches."""
    xb, single = _as_batch(x, spec.input_dim, "input")
    rows = []
    eye = np.eye(spec.output_dim)
    for d in range(spec.output_dim):
        cot = np.tile(eye[d], (xb.shape[0], 1))
        _, gin = mlp_vjp(spec, params, xb, cot)
        rows.append(gin)
    jac = np.stack(rows, axis=1)  # (B, out, in)
    return jac[0] if single else jac


# ---------------------------------------------------------------------------
# Diagonal Gaussian policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPolicy:
    """Stochastic policy: tanh-scaled MLP mean, state-independent learnable log-std.

    The param vector layout is the mean network followed by ``action_dim``
    log-std entries.  Rollout and constraint gradients use the mean action only;
    the Gaussian form exists for the KL trust region and Fisher products.
    """

    mean_net: MlpSpec
    log_std_frozen: bool = False

    @property
    def action_dim(self) -> int:
        return self.mean_net.output_dim

    def param_count(self) -> int:
        return self.mean_net.param_count() + self.action_dim

    def split(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        params = np.asarray(params, dtype=np.float64).reshape(-1)
        if params.size != self.param_count():
            raise ContractViolation(
                f"expected {self.param_count()} policy parameters, got {params.size}"
            )
        n = self.mean_net.param_count()
        return params[:n], params[n:]

    def sigma(self, params: np.ndarray) -> np.ndarray:
        _, log_std = self.split(params)
        return np.exp(np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX))


def init_policy_params(policy: GaussianPolicy, rng: np.random.Generator,
                       init_log_std: float = np.log(0.2),
                       final_weight_scale: float = 0.01) -> np.ndarray:
    mean = init_mlp_params(policy.mean_net, rng, final_weight_scale=final_weight_scale)
    tail = np.full(policy.action_dim, float(init_log_std))
    return np.concatenate([mean, tail])


def policy_mean(policy: GaussianPolicy, params: np.ndarray, states: np.ndarray) -> np.ndarray:
    mean_params, _ = policy.split(params)
    return mlp_forward(policy.mean_net, mean_params, states)


def sample_actions(policy: GaussianPolicy, params: np.ndarray, states: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Gaussian actions around the mean; callers clip to physical bounds."""
    mean = policy_mean(policy, params, states)
    sigma = policy.sigma(params)
    return mean + sigma * rng.standard_normal(mean.shape)


def policy_mean_vjp(policy: GaussianPolicy, params: np.ndarray, states: np.ndarray,
                    cotangents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """VJP of the mean action; the log-std tail gets a zero gradient slot."""
    mean_params, _ = policy.split(params)
    g_mean, g_in = mlp_vjp(policy.mean_net, mean_params, states, cotangents)
    return np.concatenate([g_mean, np.zeros(policy.action_dim)]), g_in


def policy_mean_state_jacobian(policy: GaussianPolicy, params: np.ndarray,
                               states: np.ndarray) -> np.ndarray:
    mean_params, _ = policy.split(params)
    return mlp_input_jacobian(policy.mean_net, mean_params, states)


def policy_mean_param_jacobian(policy: GaussianPolicy, params: np.ndarray,
                               state: np.ndarray) -> np.ndarray:
    """d mean / d params for one state, shape (action_dim, P).  Test-scale only."""
    mean_params, _ = policy.split(params)
    rows = []
    for d in range(policy.action_dim):
        cot = np.eye(policy.action_dim)[d]
        g, _ = mlp_vjp(policy.mean_net, mean_params, state, cot)
        rows.append(np.concatenate([g, np.zeros(policy.action_dim)]))
    return np.stack(rows, axis=0)


def policy_kl(policy: GaussianPolicy, params_old: np.ndarray, params_new: np.ndarray,
              states: np.ndarray) -> float:
    """Mean over states of KL(pi_old(.|s) || pi_new(.|s)) for diagonal Gaussians."""
    states, _ = _as_batch(states, policy.mean_net.input_dim, "states")
    if states.shape[0] == 0:
        raise ContractViolation("states must be nonempty")
    mu1 = policy_mean(policy, params_old, states)
    mu2 = policy_mean(policy, params_new, states)
    s1 = policy.sigma(params_old)
    s2 = policy.sigma(params_new)
    per_dim = np.log(s2 / s1) + (s1 ** 2 + (mu1 - mu2) ** 2) / (2.0 * s2 ** 2) - 0.5
    return float(per_dim.sum(axis=1).mean())


def policy_kl_grad(policy: GaussianPolicy, params_old: np.ndarray, params_new: np.ndarray,
                   states: np.ndarray) -> np.ndarray:
    """Gradient of policy_kl with respect to the new parameters."""
    states, _ = _as_batch(states, policy.mean_net.input_dim, "states")
    if states.shape[0] == 0:
        raise ContractViolation("states must be nonempty")
    n = states.shape[0]
    mu1 = policy_mean(policy, params_old, states)
    mu2 = policy_mean(policy, params_new, states)
    s1 = policy.sigma(params_old)
    s2 = policy.sigma(params_new)
    d_mu2 = (mu2 - mu1) / s2 ** 2 / n
    mean_params_new, _ = policy.split(params_new)
    g_mean, _ = mlp_vjp(policy.mean_net, mean_params_new, states, d_mu2)
    d_logstd = (1.0 - (s1 ** 2 + (mu1 - mu2) ** 2) / s2 ** 2).mean(axis=0)
    if policy.log_std_frozen:
        d_logstd = np.zeros_like(d_logstd)
    return np.concatenate([g_mean, d_logstd])


def fisher_vector_product(policy: GaussianPolicy, params: np.ndarray, states: np.ndarray,
                          v: np.ndarray, damping: float = 0.1) -> np.ndarray:
    """(H + damping I) v, H the Hessian of mean KL at params_old = params.

    At the expansion point the KL Hessian equals the Gauss-Newton form
    J^T diag(1/sigma^2) J on the mean network plus 2 I on the log-std block,
    so one JVP and one VJP suffice; no second derivatives of the network.
    """
    if damping < 0.0:
        raise ContractViolation("damping must be nonnegative")
    states, _ = _as_batch(states, policy.mean_net.input_dim, "states")
    if states.shape[0] == 0:
        raise ContractViolation("states must be nonempty")
    n = states.shape[0]
    mean_params, _ = policy.split(params)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != policy.param_count():
        raise ContractViolation("v has wrong length")
    v_mean = v[:mean_params.size]
    v_tail = v[mean_params.size:]
    sigma = policy.sigma(params)

    jv = mlp_jvp(policy.mean_net, mean_params, states, v_mean)
    h_mean, _ = mlp_vjp(policy.mean_net, mean_params, states, jv / sigma ** 2 / n)
    h_tail = 2.0 * v_tail
    if policy.log_std_frozen:
        h_tail = np.zeros_like(v_tail)
    out = np.concatenate([h_mean, h_tail]) + damping * v
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite Fisher-vector product")
    return out
