import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcbfrl.errors import ContractViolation
from gcbfrl.nets import (GaussianPolicy, MlpSpec, fisher_vector_product,
                         init_mlp_params, init_policy_params, mlp_forward,
                         mlp_jvp, mlp_vjp, policy_kl, policy_kl_grad,
                         unflatten_params)
from gcbfrl.verify import fd_gradient, rel_error


def spec_2x8(out_act="tanh"):
    return MlpSpec(input_dim=3, output_scale=np.array([1.0, 2.0]), hidden_layers=2,
                   hidden_units=8, output_activation=out_act)


def reference_forward(spec, params, x):
    """Independent plain-loop forward pass used as the oracle."""
    layers = []
    k = 0
    dims = [spec.input_dim] + [spec.hidden_units] * spec.hidden_layers + [spec.output_dim]
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        w = params[k:k + n_in * n_out].reshape(n_in, n_out)
        k += n_in * n_out
        b = params[k:k + n_out]
        k += n_out
        layers.append((w, b))
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            h = np.where(z > 0, z, np.exp(z) - 1.0)
        elif spec.output_activation == "tanh":
            h = spec.output_scale * np.tanh(z)
        else:
            h = spec.output_scale * z
    return h


class TestMlpForward:
    def test_zero_params_give_zero_tanh_output(self):
        spec = spec_2x8()
        out = mlp_forward(spec, np.zeros(spec.param_count()), np.array([1.0, -2.0, 3.0]))
        assert np.all(out == 0.0)

    def test_identity_one_layer_linear_net(self):
        spec = MlpSpec(input_dim=3, output_scale=np.ones(3), hidden_layers=0,
                       hidden_units=1, output_activation="identity")
        params = np.concatenate([np.eye(3).reshape(-1), np.zeros(3)])
        x = np.array([0.3, -1.2, 4.0])
        assert np.allclose(mlp_forward(spec, params, x), x)

    def test_matches_independent_forward(self):
        rng = np.random.default_rng(7)
        for act in ("tanh", "identity"):
            spec = spec_2x8(act)
            params = rng.standard_normal(spec.param_count())
            x = rng.standard_normal((5, 3))
            assert rel_error(mlp_forward(spec, params, x),
                             reference_forward(spec, params, x)) < 1e-15

    def test_tanh_output_bounded_by_scale(self):
        # Open interval mathematically; float tanh saturates to exactly 1.
        rng = np.random.default_rng(8)
        spec = spec_2x8()
        params = 10.0 * rng.standard_normal(spec.param_count())
        out = mlp_forward(spec, params, 100.0 * rng.standard_normal((20, 3)))
        assert np.all(np.abs(out) <= spec.output_scale)

    def test_dimension_mismatch_raises(self):
        spec = spec_2x8()
        with pytest.raises(ContractViolation):
            mlp_forward(spec, np.zeros(spec.param_count() + 1), np.zeros(3))
        with pytest.raises(ContractViolation):
            mlp_forward(spec, np.zeros(spec.param_count()), np.zeros(4))

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        spec = spec_2x8()
        params = rng.standard_normal(spec.param_count())
        x = rng.standard_normal(3)
        a = mlp_forward(spec, params, x)
        b = mlp_forward(spec, params, x)
        assert np.array_equal(a, b)


class TestMlpVjp:
    def test_zero_cotangent(self):
        rng = np.random.default_rng(0)
        spec = spec_2x8()
        params = rng.standard_normal(spec.param_count())
        pg, ig = mlp_vjp(spec, params, rng.standard_normal(3), np.zeros(2))
        assert np.all(pg == 0.0) and np.all(ig == 0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        spec = spec_2x8()
        params = 0.5 * rng.standard_normal(spec.param_count())
        x = rng.standard_normal(3)
        cot = rng.standard_normal(2)
        pg, ig = mlp_vjp(spec, params, x, cot)
        fd_p = fd_gradient(lambda p: float(cot @ mlp_forward(spec, p, x)), params)
        fd_x = fd_gradient(lambda xv: float(cot @ mlp_forward(spec, params, xv)), x)
        assert rel_error(pg, fd_p) < 1e-5
        assert rel_error(ig, fd_x) < 1e-5

    def test_linear_net_param_grad_is_outer_product(self):
        spec = MlpSpec(input_dim=3, output_scale=np.ones(2), hidden_layers=0,
                       hidden_units=1, output_activation="identity")
        rng = np.random.default_rng(2)
        params = rng.standard_normal(spec.param_count())
        x = rng.standard_normal(3)
        cot = rng.standard_normal(2)
        pg, _ = mlp_vjp(spec, params, x, cot)
        expected_w = np.outer(x, cot).reshape(-1)
        assert np.allclose(pg[:6], expected_w)
        assert np.allclose(pg[6:], cot)

    def test_batched_param_grad_sums_over_batch(self):
        rng = np.random.default_rng(3)
        spec = spec_2x8()
        params = rng.standard_normal(spec.param_count())
        xs = rng.standard_normal((4, 3))
        cots = rng.standard_normal((4, 2))
        pg, igs = mlp_vjp(spec, params, xs, cots)
        acc = np.zeros_like(pg)
        for x, c in zip(xs, cots):
            p_i, i_i = mlp_vjp(spec, params, x, c)
            acc += p_i
        assert rel_error(pg, acc) < 1e-12
        assert igs.shape == (4, 3)

    def test_jvp_consistent_with_vjp(self):
        rng = np.random.default_rng(4)
        spec = spec_2x8()
        params = rng.standard_normal(spec.param_count())
        x = rng.standard_normal(3)
        v = rng.standard_normal(spec.param_count())
        cot = rng.standard_normal(2)
        jv = mlp_jvp(spec, params, x, v)
        pg, _ = mlp_vjp(spec, params, x, cot)
        assert abs(float(cot @ jv) - float(pg @ v)) < 1e-10


class TestPolicyKl:
    def make(self, seed=0):
        rng = np.random.default_rng(seed)
        policy = GaussianPolicy(spec_2x8())
        theta = init_policy_params(policy, rng, final_weight_scale=1.0)
        states = rng.standard_normal((6, 3))
        return rng, policy, theta, states

    def test_identical_params_zero(self):
        _, policy, theta, states = self.make()
        assert policy_kl(policy, theta, theta, states) == 0.0

    def test_closed_form_mean_shift(self):
        # Fixed std both sides, mean shift delta in one dim -> delta^2/(2 sigma^2).
        spec = MlpSpec(input_dim=1, output_scale=np.array([5.0]), hidden_layers=0,
                       hidden_units=1, output_activation="identity")
        policy = GaussianPolicy(spec)
        sigma = 0.5
        theta_old = np.array([0.0, 0.0, np.log(sigma)])
        delta = 0.7
        theta_new = np.array([0.0, delta / 5.0, np.log(sigma)])  # bias shift, scale 5
        kl = policy_kl(policy, theta_old, theta_new, np.zeros((3, 1)))
        assert abs(kl - delta ** 2 / (2.0 * sigma ** 2)) < 1e-12

    def test_matches_numerical_integration_1d(self):
        rng = np.random.default_rng(5)
        spec = MlpSpec(input_dim=2, output_scale=np.array([1.0]), hidden_layers=1,
                       hidden_units=8)
        policy = GaussianPolicy(spec)
        theta1 = init_policy_params(policy, rng, final_weight_scale=1.0)
        theta2 = theta1 + 0.2 * rng.standard_normal(theta1.size)
        states = rng.standard_normal((4, 2))
        from gcbfrl.nets import policy_mean
        mu1 = policy_mean(policy, theta1, states)[:, 0]
        mu2 = policy_mean(policy, theta2, states)[:, 0]
        s1 = policy.sigma(theta1)[0]
        s2 = policy.sigma(theta2)[0]
        x = np.linspace(-12, 12, 20001)
        dx = x[1] - x[0]
        kls = []
        for m1, m2 in zip(mu1, mu2):
            p = np.exp(-(x - m1) ** 2 / (2 * s1 ** 2)) / (s1 * np.sqrt(2 * np.pi))
            q = np.exp(-(x - m2) ** 2 / (2 * s2 ** 2)) / (s2 * np.sqrt(2 * np.pi))
            kls.append(float(np.sum(p * (np.log(p + 1e-300) - np.log(q + 1e-300))) * dx))
        assert abs(policy_kl(policy, theta1, theta2, states) - np.mean(kls)) < 1e-3

    def test_kl_grad_matches_finite_differences(self):
        rng, policy, theta, states = self.make(6)
        theta2 = theta + 0.1 * rng.standard_normal(theta.size)
        grad = policy_kl_grad(policy, theta, theta2, states)
        fd = fd_gradient(lambda p: policy_kl(policy, theta, p, states), theta2)
        assert rel_error(grad, fd) < 1e-6

    def test_empty_states_rejected(self):
        _, policy, theta, _ = self.make()
        with pytest.raises(ContractViolation):
            policy_kl(policy, theta, theta, np.zeros((0, 3)))


class TestFisherVectorProduct:
    def make(self, seed=0):
        rng = np.random.default_rng(seed)
        policy = GaussianPolicy(spec_2x8())
        theta = init_policy_params(policy, rng, final_weight_scale=1.0)
        states = rng.standard_normal((5, 3))
        return rng, policy, theta, states

    def test_zero_vector(self):
        _, policy, theta, states = self.make()
        out = fisher_vector_product(policy, theta, states, np.zeros(theta.size), 0.3)
        assert np.all(out == 0.0)

    def test_matches_fd_hessian_vector_product(self):
        rng, policy, theta, states = self.make(1)
        v = rng.standard_normal(theta.size)
        fvp = fisher_vector_product(policy, theta, states, v, damping=0.0)
        eps = 1e-5
        fd = (policy_kl_grad(policy, theta, theta + eps * v, states)
              - policy_kl_grad(policy, theta, theta - eps * v, states)) / (2 * eps)
        assert rel_error(fvp, fd) < 1e-4

    def test_damping_identity_on_dead_direction(self):
        # A direction that cannot influence the outputs (weights out of a dead
        # input) gets exactly damping * v back.
        spec = MlpSpec(input_dim=2, output_scale=np.array([1.0]), hidden_layers=0,
                       hidden_units=1, output_activation="identity")
        policy = GaussianPolicy(spec)
        theta = np.array([1.0, 0.0, 0.0, np.log(0.5)])  # w = (1, 0), b = 0
        states = np.zeros((4, 2))
        states[:, 0] = 1.0  # second input always zero
        v = np.array([0.0, 1.0, 0.0, 0.0])
        out = fisher_vector_product(policy, theta, states, v, damping=0.25)
        assert rel_error(out, 0.25 * v) < 1e-12

    def test_symmetry(self):
        rng, policy, theta, states = self.make(2)
        u = rng.standard_normal(theta.size)
        v = rng.standard_normal(theta.size)
        hu = fisher_vector_product(policy, theta, states, u, 0.1)
        hv = fisher_vector_product(policy, theta, states, v, 0.1)
        assert abs(u @ hv - v @ hu) <= 1e-8 * max(1.0, abs(u @ hv))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_positive_semidefinite(self, seed):
        rng = np.random.default_rng(seed)
        policy = GaussianPolicy(MlpSpec(input_dim=2, output_scale=np.ones(1),
                                        hidden_layers=1, hidden_units=4))
        theta = init_policy_params(policy, rng, final_weight_scale=1.0)
        states = rng.standard_normal((3, 2))
        v = rng.standard_normal(theta.size)
        quad = float(v @ fisher_vector_product(policy, theta, states, v, damping=0.0))
        assert quad >= -1e-8 * float(v @ v)

    def test_negative_damping_rejected(self):
        _, policy, theta, states = self.make()
        with pytest.raises(ContractViolation):
            fisher_vector_product(policy, theta, states, np.zeros(theta.size), -0.1)


def test_param_flattening_order_roundtrip():
    spec = spec_2x8()
    rng = np.random.default_rng(11)
    params = rng.standard_normal(spec.param_count())
    layers = unflatten_params(spec, params)
    rebuilt = np.concatenate([np.concatenate([w.reshape(-1), b]) for w, b in layers])
    assert np.array_equal(rebuilt, params)


def test_log_std_clamped():
    policy = GaussianPolicy(spec_2x8())
    rng = np.random.default_rng(12)
    theta = init_policy_params(policy, rng)
    theta[-2:] = [-100.0, 100.0]
    sig = policy.sigma(theta)
    assert sig[0] == pytest.approx(1e-4) and sig[1] == pytest.approx(10.0)
