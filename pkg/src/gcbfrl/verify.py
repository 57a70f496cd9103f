"""Executable verification suites: gradient audits, solver oracles, barrier
forward invariance, and relative-degree checks.

The oracles here are deliberately independent of the implementation paths they
check: gradients are compared against central finite differences of the plain
forward evaluations, the trust-region solver against a dense dual-grid search
with KKT verification, and feasibility classification against sampling of the
trust-region ball.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstraintSpec, gcbf_bound, verify_relative_degree
from .dynamics import BicycleModel, DoubleIntegrator
from .envs.toy import PositionLimit, ToyModel
from .nets import (GaussianPolicy, MlpSpec, fisher_vector_product, init_mlp_params,
                   init_policy_params, mlp_forward, policy_kl, policy_kl_grad)
from .rollout import (constraint_value_and_gradient, objective_and_gradient,
                      objective_value, rollout)
from .solver import (FEASIBLE, INFEASIBLE, LinearizedStep, check_feasibility,
                     recovery_step, solve_step)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    tolerance: float | None = None
    replay: dict | None = field(default=None, repr=False)


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def fd_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (f(x + e) - f(x - e)) / (2.0 * eps)
    return g


def fd_jacobian(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * eps))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# Gradient audits
# ---------------------------------------------------------------------------


def _tiny_policy(rng, input_dim=2, action_dim=1, hidden=8):
    spec = MlpSpec(input_dim=input_dim, output_scale=np.full(action_dim, 1.0),
                   hidden_layers=1, hidden_units=hidden, output_activation="tanh")
    policy = GaussianPolicy(spec)
    theta = init_policy_params(policy, rng, final_weight_scale=1.0)
    theta += 0.1 * rng.standard_normal(theta.size)
    return policy, theta


def suite_gradients(seed: int = 0, n: int = 100, tol: float = 1e-4) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []

    # Rollout objective and constraint gradients vs finite differences.
    worst_obj, worst_con = 0.0, 0.0
    model = ToyModel(dt=0.1, p_ref=0.5)
    h = PositionLimit(1.0)
    for _ in range(n):
        policy, theta = _tiny_policy(rng)
        critic = MlpSpec(input_dim=2, output_scale=np.array([1.0]), hidden_layers=1,
                         hidden_units=8, output_activation="identity")
        w = init_mlp_params(critic, rng)
        starts = rng.uniform(-1.0, 0.5, size=(4, 2))
        rb = rollout(model, policy, theta, starts, steps=3, gamma=0.9)
        _, g = objective_and_gradient(rb, policy, theta, critic, w, window=2)
        fd = fd_gradient(lambda th: objective_value(
            rollout(model, policy, th, starts, 3, gamma=0.9, with_jacobians=False),
            critic, w, window=2), theta)
        worst_obj = max(worst_obj, rel_error(g, fd))

        spec = ConstraintSpec(h, relative_degree=2, alpha=0.3)
        _, _, c = constraint_value_and_gradient(rb, policy, theta, spec)
        fd_c = fd_gradient(lambda th: float(h.value(
            rollout(model, policy, th, starts, 3, gamma=0.9,
                    with_jacobians=False).states[:, 2]).mean()), theta)
        worst_con = max(worst_con, rel_error(c, fd_c))
    checks.append(Check("objective rollout gradient vs finite differences",
                        worst_obj < tol, f"worst rel err {worst_obj:.2e}", tol))
    checks.append(Check("constraint rollout gradient vs finite differences",
                        worst_con < tol, f"worst rel err {worst_con:.2e}", tol))

    # Critic gradient vs finite differences of the squared-error loss.
    from .trainer import critic_update
    worst = 0.0
    for _ in range(n):
        critic = MlpSpec(input_dim=3, output_scale=np.array([1.0]), hidden_layers=1,
                         hidden_units=8, output_activation="identity")
        w = init_mlp_params(critic, rng) + 0.1 * rng.standard_normal(critic.param_count())
        obs = rng.standard_normal((6, 3))
        targets = rng.standard_normal(6)
        lr = 1e-3
        w_new, _ = critic_update(critic, w, obs, targets, lr)
        grad = (w - w_new) / lr

        def loss(wv):
            v = mlp_forward(critic, wv, obs)[:, 0]
            return float(0.5 * ((targets - v) ** 2).mean())

        worst = max(worst, rel_error(grad, fd_gradient(loss, w)))
    checks.append(Check("critic gradient vs finite differences",
                        worst < tol, f"worst rel err {worst:.2e}", tol))

    # Fisher-vector products vs finite differences of the KL gradient.
    worst = 0.0
    for _ in range(n):
        policy, theta = _tiny_policy(rng, input_dim=3, action_dim=2)
        states = rng.standard_normal((5, 3))
        v = rng.standard_normal(theta.size)
        fvp = fisher_vector_product(policy, theta, states, v, damping=0.0)
        eps = 1e-5
        fd = (policy_kl_grad(policy, theta, theta + eps * v, states)
              - policy_kl_grad(policy, theta, theta - eps * v, states)) / (2.0 * eps)
        worst = max(worst, rel_error(fvp, fd))
    checks.append(Check("Fisher-vector product vs finite-difference KL Hessian",
                        worst < tol, f"worst rel err {worst:.2e}", tol))

    # Dynamics Jacobian audits on random points.
    worst = 0.0
    for mdl, sdim, adim, sampler in (
        (DoubleIntegrator(0.1), 2, 1, lambda: (rng.uniform(-2, 2, 2), rng.uniform(-1, 1, 1))),
        (BicycleModel(dt=0.1), 6, 2,
         lambda: (np.concatenate([rng.uniform([3, -0.5, -0.3], [12, 0.5, 0.3]),
                                  rng.uniform(-20, 20, 2), rng.uniform(-2.5, 2.5, 1)]),
                  rng.uniform([-0.3, -2.0], [0.3, 2.0]))),
    ):
        for _ in range(n):
            s, a = sampler()
            A, B = mdl.jacobians(s, a)
            fa = fd_jacobian(lambda sv: mdl.step(sv, a), s)
            fb = fd_jacobian(lambda av: mdl.step(s, av), a)
            worst = max(worst, rel_error(A, fa), rel_error(B, fb))
    checks.append(Check("dynamics Jacobians vs finite differences",
                        worst < tol, f"worst rel err {worst:.2e}", tol))

    # Least-required-rollout property: below the relative degree the constraint
    # gradient vanishes identically; at the degree it is generically nonzero.
    max_short, min_full = 0.0, np.inf
    policy, theta = _tiny_policy(rng)
    for _ in range(n):
        starts = rng.uniform(-1.0, 0.5, size=(1, 2))
        rb = rollout(model, policy, theta, starts, steps=2, gamma=0.9)
        spec1 = ConstraintSpec(h, relative_degree=1, alpha=0.3)
        spec2 = ConstraintSpec(h, relative_degree=2, alpha=0.3)
        _, _, c1 = constraint_value_and_gradient(rb, policy, theta, spec1)
        _, _, c2 = constraint_value_and_gradient(rb, policy, theta, spec2)
        max_short = max(max_short, float(np.abs(c1).max()))
        min_full = min(min_full, float(np.abs(c2).max()))
    ok = max_short < 1e-12 and min_full > 1e-6
    checks.append(Check("zero constraint gradient below the relative degree",
                        ok, f"max |grad| short {max_short:.2e}, min at degree {min_full:.2e}",
                        1e-12))
    return checks


# ---------------------------------------------------------------------------
# Solver oracles
# ---------------------------------------------------------------------------


def random_spd(rng, dim: int) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    return a @ a.T + dim * np.eye(dim)


def dual_grid_oracle(h_mat: np.ndarray, g: np.ndarray, c: np.ndarray, z: float,
                     delta: float) -> dict:
    """Brute-force solve of the single-constraint subproblem.

    Scans a fine grid over the constraint dual, reconstructs the primal point
    for each candidate with dense linear algebra, keeps the best feasible one,
    zooms repeatedly, and verifies the KKT conditions of the winner.
    """
    h_inv = np.linalg.inv(h_mat)

    def primal(nu):
        u = g + nu * c
        e = float(u @ h_inv @ u)
        if e < 1e-16:
            return None
        lam = np.sqrt(e / (2.0 * delta))
        d = -(h_inv @ u) / lam
        return d, lam

    def evaluate(nu):
        res = primal(nu)
        if res is None:
            return None
        d, lam = res
        if z + float(c @ d) > 1e-9:
            return None
        return float(g @ d), d, lam, nu

    best = None
    for nu in np.concatenate([[0.0], np.logspace(-8, 8, 4001)]):
        out = evaluate(nu)
        if out is not None and (best is None or out[0] < best[0]):
            best = out
    if best is None:
        return {"status": INFEASIBLE}
    for shrink in (0.5, 0.05, 0.005, 5e-4):
        nu0 = best[3]
        if nu0 == 0.0:
            break
        lo, hi = nu0 * (1.0 - shrink), nu0 * (1.0 + shrink)
        for nu in np.linspace(max(lo, 0.0), hi, 4001):
            out = evaluate(nu)
            if out is not None and out[0] < best[0]:
                best = out
    obj, d, lam, nu = best
    kkt = np.linalg.norm(g + lam * (h_mat @ d) + nu * c)
    return {"status": FEASIBLE, "objective": obj, "dtheta": d, "lam": lam,
            "nu": nu, "kkt_stationarity": float(kkt)}


def ball_sampling_feasible(h_mat: np.ndarray, c: np.ndarray, z: float, delta: float,
                           rng: np.random.Generator, n_samples: int = 20000) -> bool:
    """Feasibility by sampling the trust-region boundary (the linear constraint
    is extremal on the boundary)."""
    dim = c.size
    u = rng.standard_normal((n_samples, dim))
    hn = np.einsum("ki,ij,kj->k", u, h_mat, u)
    d = u * np.sqrt(2.0 * delta / hn)[:, None]
    return bool((z + d @ c <= 0.0).any())


def make_solver_instance(rng, dim: int, force: str | None = None,
                         margin: float = 0.08) -> dict:
    """Random instance with a margin away from the feasibility boundary so the
    sampling oracle cannot be fooled by borderline cases."""
    while True:
        h_mat = random_spd(rng, dim)
        g = rng.standard_normal(dim)
        c = rng.standard_normal(dim)
        delta = 10.0 ** rng.uniform(-3, 0)
        max_dec = np.sqrt(2.0 * delta * float(c @ np.linalg.solve(h_mat, c)))
        kind = force or ("infeasible" if rng.uniform() < 0.3 else "feasible")
        if kind == "infeasible":
            z = max_dec * rng.uniform(1.0 + margin, 3.0)
        else:
            z = rng.uniform(-1.0, max_dec * (1.0 - margin))
        if abs(z) > 1e-6:
            return {"h": h_mat, "g": g, "c": c, "z": float(z), "delta": float(delta)}


def suite_solver(seed: int = 0, n_feasible: int = 210, n_infeasible: int = 60) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    worst_obj = 0.0
    feas_mismatch = 0
    worst_energy = 0.0
    n_compared = 0
    replay = None
    kinds = ["feasible"] * n_feasible + ["infeasible"] * n_infeasible
    for kind in kinds:
        dim = int(rng.integers(4, 7))
        inst = make_solver_instance(rng, dim, force=kind)
        h_mat = inst["h"]
        step = LinearizedStep(inst["g"], [inst["c"]], [inst["z"]],
                              lambda v, hm=h_mat: hm @ v, inst["delta"])
        status = check_feasibility(step, cg_iters=4 * dim, cg_tol=1e-12)
        oracle_feasible = ball_sampling_feasible(h_mat, inst["c"], inst["z"],
                                                 inst["delta"], rng)
        if (status == FEASIBLE) != oracle_feasible:
            feas_mismatch += 1
            replay = replay or {k: np.asarray(v).tolist() for k, v in inst.items()}

        if status == FEASIBLE:
            dtheta, _, _ = solve_step(step, cg_iters=4 * dim, cg_tol=1e-12)
            oracle = dual_grid_oracle(h_mat, inst["g"], inst["c"], inst["z"],
                                      inst["delta"])
            if oracle["status"] == FEASIBLE:
                err = abs(float(inst["g"] @ dtheta) - oracle["objective"])
                err /= max(1.0, abs(oracle["objective"]))
                if err > worst_obj:
                    worst_obj = err
                    if err > 1e-5:
                        replay = {k: np.asarray(v).tolist() for k, v in inst.items()}
                n_compared += 1
        b = rng.standard_normal(dim)
        d = recovery_step(step, b, cg_iters=4 * dim, cg_tol=1e-12)
        energy = 0.5 * float(d @ h_mat @ d)
        worst_energy = max(worst_energy, abs(energy / inst["delta"] - 1.0))

    checks.append(Check(f"solve_step objective vs dual-grid oracle ({n_compared} comparisons)",
                        n_compared >= min(200, n_feasible) and worst_obj < 1e-5,
                        f"worst rel err {worst_obj:.2e}", 1e-5, replay))
    checks.append(Check(f"feasibility classification vs ball sampling ({len(kinds)} instances)",
                        feas_mismatch == 0, f"{feas_mismatch} mismatches", None, replay))
    checks.append(Check("recovery step lands on the trust-region boundary",
                        worst_energy < 1e-6, f"worst |energy/delta - 1| {worst_energy:.2e}",
                        1e-6))
    return checks


# ---------------------------------------------------------------------------
# Forward invariance
# ---------------------------------------------------------------------------


def suite_invariance(seed: int = 0, n_trajectories: int = 200,
                     n_steps: int = 120) -> list[Check]:
    """Exhaustive simulation on the double integrator: if every step satisfies
    h(s_{t+m}) <= (1-alpha)^m h(s_t) and the first m states are safe, every
    visited state stays in the safe set.

    The controller chooses, at time t, the largest acceleration whose two-step
    position consequence respects the barrier bound anchored at s_t (the
    action's first influence on h is exactly two steps out).  Trajectories
    where no admissible action exists break the theorem's premise and are
    excluded (counted separately); none should violate among the rest.
    """
    rng = np.random.default_rng(seed)
    dt, p_max, alpha, m = 0.1, 1.0, 0.3, 2
    model = DoubleIntegrator(dt)
    violations = 0
    premise_broken = 0
    tested = 0
    for _ in range(n_trajectories):
        s = np.array([rng.uniform(-1.0, 0.6), rng.uniform(-0.5, 0.5)])
        p_ref = rng.uniform(0.5, 0.98)
        # Premise: the first m states must be safe; s_1's position is fixed by
        # (p_0, v_0) regardless of the action.
        if s[0] > p_max or s[0] + s[1] * dt > p_max:
            continue
        tested += 1
        hist = [s.copy()]
        ok = True
        for _ in range(n_steps):
            p, v = hist[-1]
            # Perturbed PD regulator toward p_ref, projected onto the barrier
            # bound: a only enters h(s_{t+2}) = p + 2 v dt + a dt^2.
            a_nom = 2.0 * (p_ref - p) - 2.0 * v + rng.uniform(-0.3, 0.3)
            bnd = gcbf_bound(p - p_max, alpha, m)
            a_ub = (bnd + p_max - p - 2.0 * v * dt) / dt ** 2
            a = float(np.clip(min(a_nom, a_ub), -3.0, 3.0))
            if a > a_ub + 1e-12:
                premise_broken += 1
                ok = False
                break
            hist.append(model.step(hist[-1], np.array([a])))
        if ok:
            violations += sum(1 for st in hist if st[0] > p_max + 1e-12)
    checks = [Check(f"barrier-bounded rollouts stay in the safe set ({tested} trajectories)",
                    violations == 0 and premise_broken == 0 and tested > n_trajectories // 2,
                    f"{violations} violating steps, {premise_broken} premise-broken runs",
                    1e-12)]
    return checks


# ---------------------------------------------------------------------------
# Relative degree
# ---------------------------------------------------------------------------


def suite_degree(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    model = DoubleIntegrator(0.1)
    h = PositionLimit(1.0)
    policy, theta = _tiny_policy(rng)
    s = np.array([0.2, 0.1])
    ok2 = verify_relative_degree(model, h, s, policy, theta, m=2)
    ok1 = verify_relative_degree(model, h, s, policy, theta, m=1)
    checks.append(Check("double integrator position constraint has degree 2",
                        bool(ok2) and not bool(ok1),
                        f"m=2 -> {bool(ok2)}, m=1 -> {bool(ok1)} ({ok2.message})", 1e-8))

    from .envs.intersection import IntersectionEnv
    env = IntersectionEnv()
    obs = env.reset(np.random.default_rng(seed + 1))
    meta = env.current_meta()
    mdl = env.build_model([meta])
    start = env.model_start_states(obs[None, :], [meta])[0]
    pol_spec = MlpSpec(input_dim=41, output_scale=env.action_scale, hidden_layers=1,
                       hidden_units=8, output_activation="tanh")
    pol = GaussianPolicy(pol_spec)
    th = init_policy_params(pol, rng, final_weight_scale=1.0)
    res3 = verify_relative_degree(mdl, env.state_constraint(), start, pol, th, m=3,
                                  obs_slice=mdl.obs_slice)
    res2 = verify_relative_degree(mdl, env.state_constraint(), start, pol, th, m=2,
                                  obs_slice=mdl.obs_slice)
    checks.append(Check("driving distance constraint has degree 3",
                        bool(res3) and not bool(res2),
                        f"m=3 -> {bool(res3)}, m=2 -> {bool(res2)}; norms {res3.influence_norms}",
                        1e-8))

    class FlatConstraint(PositionLimit):
        def grad(self, s):
            return np.zeros_like(np.asarray(s, dtype=np.float64))

    res = verify_relative_degree(model, FlatConstraint(1.0), s, policy, theta, m=2)
    checks.append(Check("vanishing constraint gradient reported inconclusive",
                        res.inconclusive and not bool(res), res.message))
    return checks


SUITES = {
    "gradients": suite_gradients,
    "solver": suite_solver,
    "invariance": suite_invariance,
    "degree": suite_degree,
}


def run_suite(name: str, seed: int = 0) -> list[Check]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}")
    return SUITES[name](seed)


def dump_failures(checks: list[Check], path) -> None:
    bad = [c for c in checks if not c.passed]
    if bad:
        payload = [{"name": c.name, "detail": c.detail, "replay": c.replay} for c in bad]
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
