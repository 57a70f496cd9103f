"""Training loops: barrier-constrained updates, the adaptive-conservativeness
variant, the pointwise-constraint baseline, and the critic update.

One Trainer owns all mutable state.  Randomness flows from a single seed
through named substreams (environment/traffic, parameter init, action noise,
batch subsampling) so components can be varied independently and runs are
reproducible bit for bit, including across checkpoint/resume boundaries.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .constraints import ConstraintSpec, aggregate_h, gcbf_bound
from .envs.base import SafeModelEnv
from .errors import ContractViolation
from .nets import (GaussianPolicy, MlpSpec, init_mlp_params, init_policy_params,
                   fisher_vector_product, mlp_forward, mlp_vjp, policy_kl,
                   sample_actions)
from .rollout import (constraint_residual_lse, objective_and_gradient,
                      objective_value, pointwise_constraint_values,
                      returns_per_start, rollout)
from .solver import (FEASIBLE, LinearizedStep, check_feasibility, line_search,
                     normalize_gradients, recovery_step, solve_step)

ALGORITHMS = ("gcbf", "gcbf_adaptive", "mbpo_pointwise")
METRIC_FIELDS = ("iteration", "interactions", "mean_return", "violation_distance",
                 "xi", "alpha", "feasible_fraction", "kl", "critic_loss", "wall_ms")
RNG_STREAMS = ("env", "policy_init", "actions", "subsample")


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the shared algorithm table."""

    gamma: float = 0.99
    delta: float = 0.01
    alpha0: float = 0.3                 # 0.1 for the adaptive variant
    relative_degree: int = 3
    xi_tolerance: float = 0.3
    alpha_lr: float = 1e-3
    alpha_min: float = 0.01
    alpha_max: float = 0.99
    damping: float = 0.1
    cg_iters: int = 20
    cg_tol: float = 1e-8
    backtrack_coeff: float = 0.8
    max_backtracks: int = 10
    constraint_tol: float = 1e-6
    pointwise_steps: int = 10
    dual_ascent_iters: int = 500
    dual_ascent_rate: float = 1e-2
    batch_residual_temperature: float = 0.05
    critic_lr_start: float = 8e-5
    critic_lr_end: float = 8e-6
    critic_epochs: int = 1
    critic_batch_size: int = 0          # 0 = fit the critic on all visited states
    hidden_layers: int = 2
    hidden_units: int = 64
    init_log_std: float = float(np.log(0.2))
    log_std_frozen: bool = False
    final_weight_scale: float = 0.01
    batch_env_steps: int = 2048
    rollout_batch_size: int = 512
    fvp_batch_size: int = 1024
    total_interactions: int = 200_000
    max_iterations: int | None = None
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.critic_lr_start < self.critic_lr_end:
            raise ContractViolation("critic learning-rate anneal endpoints out of order")
        for name in ("gamma", "delta", "alpha0", "xi_tolerance", "alpha_lr",
                     "batch_env_steps", "total_interactions"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be nonnegative")
        if not 0.0 < self.alpha0 < 1.0:
            raise ContractViolation("alpha0 must lie in (0, 1)")

    def critic_lr(self, interactions: int) -> float:
        frac = min(1.0, interactions / max(self.total_interactions, 1))
        return self.critic_lr_start + (self.critic_lr_end - self.critic_lr_start) * frac


@dataclass
class TrainState:
    theta: np.ndarray
    w: np.ndarray
    alpha: float
    iteration: int = 0
    interactions: int = 0
    total_violation_steps: int = 0
    model_steps_per_update: int = 0
    dual_warm_start: tuple | None = None
    metrics: list = field(default_factory=list)


def critic_update(critic_spec: MlpSpec, w: np.ndarray, obs: np.ndarray,
                  targets: np.ndarray, learning_rate: float) -> tuple[np.ndarray, float]:
    """One gradient step on the squared value error E{(G - V)^2}/2.

    Returns (updated params, scalar loss); a non-finite loss skips the update.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    v = mlp_forward(critic_spec, w, obs)[:, 0]
    err = targets - v
    loss = float(0.5 * (err ** 2).mean())
    if not np.isfinite(loss):
        return w, loss
    cot = (-err / err.size)[:, None]
    grad, _ = mlp_vjp(critic_spec, w, obs, cot)
    return w - learning_rate * grad, loss


def adaptive_alpha_update(state: TrainState, xi: float, config: TrainConfig) -> TrainState:
    """alpha grows by alpha_lr * xi when the violation measure exceeds the
    tolerance (strict inequality); otherwise unchanged.  Clamped to (0, 1)."""
    if xi < 0.0:
        raise ContractViolation("xi must be nonnegative")
    if xi > config.xi_tolerance:
        state.alpha = float(np.clip(state.alpha + config.alpha_lr * xi,
                                    config.alpha_min, config.alpha_max))
    return state


@dataclass
class SampleBatch:
    obs: np.ndarray
    metas: list
    episode_returns: list
    episode_violation_distances: list
    violation_steps: int
    steps: int


class Trainer:
    """Owns policy/critic parameters, RNG streams and the metrics log."""

    def __init__(self, env: SafeModelEnv, config: TrainConfig, algorithm: str = "gcbf",
                 out_dir: str | Path | None = None):
        if algorithm not in ALGORITHMS:
            raise ContractViolation(f"unknown algorithm {algorithm!r}")
        self.env = env
        self.config = config
        self.algorithm = algorithm
        self.out_dir = Path(out_dir) if out_dir is not None else None

        mean_spec = MlpSpec(input_dim=env.obs_dim, output_scale=env.action_scale,
                            hidden_layers=config.hidden_layers,
                            hidden_units=config.hidden_units,
                            output_activation="tanh")
        self.policy = GaussianPolicy(mean_spec, log_std_frozen=config.log_std_frozen)
        self.critic_spec = MlpSpec(input_dim=env.obs_dim, output_scale=np.array([1.0]),
                                   hidden_layers=config.hidden_layers,
                                   hidden_units=config.hidden_units,
                                   output_activation="identity")

        seqs = np.random.SeedSequence(config.seed).spawn(len(RNG_STREAMS))
        self.rngs = {name: np.random.Generator(np.random.PCG64(seq))
                     for name, seq in zip(RNG_STREAMS, seqs)}

        theta = init_policy_params(self.policy, self.rngs["policy_init"],
                                   init_log_std=config.init_log_std,
                                   final_weight_scale=config.final_weight_scale)
        # A flat near-zero initial value surface gives the actor no phantom
        # slopes to chase before the critic has seen data.
        w = init_mlp_params(self.critic_spec, self.rngs["policy_init"],
                            final_weight_scale=0.01)
        self.state = TrainState(theta=theta, w=w, alpha=config.alpha0)
        self._dump_trajectories = False
        self._episode_counter = 0

    def enable_trajectory_dump(self):
        """Write one JSONL record per environment step (post-step observation,
        action, penalty, violation) for offline plotting."""
        if self.out_dir is None:
            raise ContractViolation("trajectory dump needs an output directory")
        self._dump_trajectories = True

    # -- sampling -------------------------------------------------------------

    def sample_batch(self) -> SampleBatch:
        """Collect whole episodes until the step budget is reached."""
        cfg = self.config
        obs_list, metas = [], []
        ep_returns, ep_viol = [], []
        violation_steps = 0
        steps = 0
        dump_fh = None
        if self._dump_trajectories:
            dump_fh = open(self.out_dir / "trajectories.jsonl", "a")
        while steps < cfg.batch_env_steps:
            obs = self.env.reset(self.rngs["env"])
            penalties, violations = [], []
            done = False
            t = 0
            while not done:
                obs_list.append(obs)
                metas.append(self.env.current_meta())
                a = sample_actions(self.policy, self.state.theta, obs,
                                   self.rngs["actions"])
                a = np.clip(a, -self.env.action_scale, self.env.action_scale)
                obs, penalty, done, info = self.env.step(a)
                penalties.append(penalty)
                violations.append(info["violation"])
                if info["h_max"] > 0.0:
                    violation_steps += 1
                if dump_fh is not None:
                    dump_fh.write(json.dumps({
                        "episode": self._episode_counter, "step": t,
                        "penalty": penalty, "violation": info["violation"],
                        "h_max": info["h_max"], "action": a.tolist(),
                        "obs": obs.tolist(),
                    }) + "\n")
                steps += 1
                t += 1
            self._episode_counter += 1
            ep_returns.append(-float(np.sum(penalties)))
            ep_viol.append(float(np.mean(violations)))
        if dump_fh is not None:
            dump_fh.close()
        return SampleBatch(np.array(obs_list), metas, ep_returns, ep_viol,
                           violation_steps, steps)

    def _subsample(self, n: int, k: int) -> np.ndarray:
        if n <= k:
            return np.arange(n)
        return self.rngs["subsample"].choice(n, size=k, replace=False)

    # -- one policy update ----------------------------------------------------

    def iteration(self) -> dict:
        t0 = time.perf_counter()
        cfg = self.config
        batch = self.sample_batch()
        self.state.interactions += batch.steps
        self.state.total_violation_steps += batch.violation_steps

        idx = self._subsample(batch.obs.shape[0], cfg.rollout_batch_size)
        metas_sel = [batch.metas[i] for i in idx]
        model = self.env.build_model(metas_sel)
        starts = self.env.model_start_states(batch.obs[idx], metas_sel)
        fvp_idx = self._subsample(batch.obs.shape[0], cfg.fvp_batch_size)
        fvp_obs = batch.obs[fvp_idx]

        h = self.env.state_constraint()
        m = cfg.relative_degree
        if self.algorithm == "mbpo_pointwise":
            steps = max(cfg.pointwise_steps, m + 1)
        else:
            steps = m + 1
        rb = rollout(model, self.policy, self.state.theta, starts, steps,
                     gamma=cfg.gamma)

        theta = self.state.theta
        _, g_raw = objective_and_gradient(rb, self.policy, theta,
                                          self.critic_spec, self.state.w, window=m)

        def h_op(v):
            return fisher_vector_product(self.policy, theta, fvp_obs, v, cfg.damping)

        if self.algorithm == "mbpo_pointwise":
            result = self._pointwise_update(rb, h, h_op, g_raw, starts, model, fvp_obs)
        else:
            result = self._gcbf_update(rb, h, h_op, g_raw, starts, model, fvp_obs)
        new_theta, xi, feasible, kl = result
        self.state.theta = new_theta

        critic_loss = self._fit_critic(batch, m)

        if self.algorithm == "gcbf_adaptive":
            adaptive_alpha_update(self.state, xi, cfg)

        self.state.iteration += 1
        record = {
            "iteration": self.state.iteration,
            "interactions": self.state.interactions,
            "mean_return": float(np.mean(batch.episode_returns)),
            "violation_distance": float(np.mean(batch.episode_violation_distances)),
            "xi": float(xi),
            "alpha": float(self.state.alpha),
            "feasible_fraction": 1.0 if feasible else 0.0,
            "kl": float(kl),
            "critic_loss": float(critic_loss),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        self.state.metrics.append(record)
        return record

    def _fit_critic(self, batch: SampleBatch, m: int) -> float:
        """Fit the value function on (a large subsample of) all visited states.

        Targets come from a fresh value-only model rollout under the current
        policy; broad state coverage keeps the critic from extrapolating wildly
        into regions the actor is about to steer toward.
        """
        cfg = self.config
        n = batch.obs.shape[0]
        k = n if cfg.critic_batch_size <= 0 else min(cfg.critic_batch_size, n)
        idx = self._subsample(n, k)
        metas = [batch.metas[i] for i in idx]
        model = self.env.build_model(metas)
        starts = self.env.model_start_states(batch.obs[idx], metas)
        rb = rollout(model, self.policy, self.state.theta, starts, m + 1,
                     gamma=cfg.gamma, with_jacobians=False)
        targets = returns_per_start(rb, self.critic_spec, self.state.w, window=m)
        valid = rb.valid
        lr = cfg.critic_lr(self.state.interactions)
        critic_loss = float("nan")
        for _ in range(cfg.critic_epochs):
            self.state.w, critic_loss = critic_update(
                self.critic_spec, self.state.w, starts[valid][:, model.obs_slice],
                targets[valid], lr)
        return critic_loss

    def _line_search_evals(self, model, starts, fvp_obs, constraint_fn):
        cfg = self.config
        m = cfg.relative_degree
        theta_old = self.state.theta

        def objective_eval(p):
            rb = rollout(model, self.policy, p, starts, m + 1, gamma=cfg.gamma,
                         with_jacobians=False)
            return objective_value(rb, self.critic_spec, self.state.w, window=m)

        def kl_eval(p):
            return policy_kl(self.policy, theta_old, p, fvp_obs)

        return objective_eval, kl_eval, constraint_fn

    def _gcbf_update(self, rb, h, h_op, g_raw, starts, model, fvp_obs):
        cfg = self.config
        m = cfg.relative_degree
        alpha = self.state.alpha
        spec = ConstraintSpec(h, m, alpha)
        h_m = h.value(rb.states[:, m])
        h_0 = h.value(rb.states[:, 0])
        residuals = h_m - gcbf_bound(h_0, alpha, m)
        xi = float(np.maximum(residuals[rb.valid], 0.0).mean())
        # The barrier bound is enforced per start state through a smooth
        # maximum of the residuals, keeping a single scalar constraint for the
        # analytic dual while protecting the worst visited state.
        tau = cfg.batch_residual_temperature
        z, c_raw = constraint_residual_lse(rb, self.policy, self.state.theta,
                                           spec, tau)
        self.state.model_steps_per_update = m

        g, (c,) = normalize_gradients(g_raw, [c_raw])
        step = LinearizedStep(g, [c], [z], h_op, cfg.delta)
        status = check_feasibility(step, cfg.cg_iters, cfg.cg_tol)
        if status == FEASIBLE:
            dtheta, _, _ = solve_step(step, cfg.cg_iters, cfg.cg_tol)
        else:
            dtheta = recovery_step(step, c_raw, cfg.cg_iters, cfg.cg_tol)

        def constraint_eval(p):
            rbp = rollout(model, self.policy, p, starts, m, gamma=cfg.gamma,
                          with_jacobians=False)
            res = (h.value(rbp.states[:, m])
                   - gcbf_bound(h.value(rbp.states[:, 0]), alpha, m))
            return aggregate_h(res[rbp.valid], tau)

        obj_eval, kl_eval, c_eval = self._line_search_evals(model, starts, fvp_obs,
                                                            constraint_eval)
        res = line_search(self.state.theta, dtheta, obj_eval, kl_eval, c_eval,
                          cfg.delta, feasible=(status == FEASIBLE),
                          backtrack_coeff=cfg.backtrack_coeff,
                          max_backtracks=cfg.max_backtracks,
                          constraint_tol=cfg.constraint_tol)
        return res.params, xi, status == FEASIBLE, res.kl

    def _pointwise_update(self, rb, h, h_op, g_raw, starts, model, fvp_obs):
        cfg = self.config
        n = cfg.pointwise_steps
        triples = pointwise_constraint_values(rb, self.policy, self.state.theta, h, n)
        self.state.model_steps_per_update = n
        xi = 0.0
        for i in range(1, n + 1):
            vals = h.value(rb.states[:, i])[rb.valid]
            xi += float(np.maximum(vals - triples[i - 1][1], 0.0).mean())

        # Steps whose gradient is identically zero (below the relative degree)
        # cannot be influenced at this linearization; they are excluded from the
        # dual problem but still measured by xi.
        controllable = [(j_c, d, c_raw) for j_c, d, c_raw in triples
                        if np.linalg.norm(c_raw) > 1e-12]
        if not controllable:
            return self.state.theta.copy(), xi, True, 0.0
        z = np.array([j_c - d for j_c, d, _ in controllable])
        raws = [c_raw for _, _, c_raw in controllable]
        g, c_list = normalize_gradients(g_raw, raws)
        step = LinearizedStep(g, c_list, z, h_op, cfg.delta)
        dtheta, lam, nu = solve_step(step, cfg.cg_iters, cfg.cg_tol,
                                     warm_start=self.state.dual_warm_start,
                                     ascent_iters=cfg.dual_ascent_iters,
                                     ascent_rate=cfg.dual_ascent_rate)
        feasible = step.status == FEASIBLE
        if feasible:
            self.state.dual_warm_start = (float(lam), nu.copy())
        else:
            b = np.sum([raw for (jc, d, raw), zi in zip(controllable, z) if zi > 0.0],
                       axis=0) if np.any(z > 0.0) else np.sum(raws, axis=0)
            dtheta = recovery_step(step, b, cfg.cg_iters, cfg.cg_tol)

        bounds = np.array([d for _, d, _ in controllable])
        horizons = [i for i, (jc, d, raw) in enumerate(triples, start=1)
                    if np.linalg.norm(raw) > 1e-12]

        def constraint_eval(p):
            rbp = rollout(model, self.policy, p, starts, n, gamma=cfg.gamma,
                          with_jacobians=False)
            vals = np.array([float(h.value(rbp.states[:, i])[rbp.valid].mean())
                             for i in horizons])
            return float((vals - bounds).max())

        obj_eval, kl_eval, c_eval = self._line_search_evals(model, starts, fvp_obs,
                                                            constraint_eval)
        res = line_search(self.state.theta, dtheta, obj_eval, kl_eval, c_eval,
                          cfg.delta, feasible=feasible,
                          backtrack_coeff=cfg.backtrack_coeff,
                          max_backtracks=cfg.max_backtracks,
                          constraint_tol=cfg.constraint_tol)
        return res.params, xi, feasible, res.kl

    # -- persistence ----------------------------------------------------------

    def _rng_states(self) -> dict:
        return {name: rng.bit_generator.state for name, rng in self.rngs.items()}

    def _set_rng_states(self, states: dict):
        for name, st in states.items():
            self.rngs[name].bit_generator.state = st

    def save_checkpoint(self, path: str | Path):
        path = Path(path)
        meta = {
            "version": __version__,
            "algorithm": self.algorithm,
            "alpha": self.state.alpha,
            "iteration": self.state.iteration,
            "interactions": self.state.interactions,
            "total_violation_steps": self.state.total_violation_steps,
            "model_steps_per_update": self.state.model_steps_per_update,
            "rng": self._rng_states(),
            "dual_warm_start": None if self.state.dual_warm_start is None else
                [self.state.dual_warm_start[0], self.state.dual_warm_start[1].tolist()],
            "n_metrics": len(self.state.metrics),
            "episode_counter": self._episode_counter,
        }
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, theta=self.state.theta, w=self.state.w,
                 meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))
        os.replace(tmp, path)

    def load_checkpoint(self, path: str | Path):
        data = np.load(path)
        meta = json.loads(bytes(data["meta"].tobytes()).decode())
        self.state.theta = data["theta"].astype(np.float64)
        self.state.w = data["w"].astype(np.float64)
        self.state.alpha = float(meta["alpha"])
        self.state.iteration = int(meta["iteration"])
        self.state.interactions = int(meta["interactions"])
        self.state.total_violation_steps = int(meta["total_violation_steps"])
        self.state.model_steps_per_update = int(meta["model_steps_per_update"])
        if meta["dual_warm_start"] is not None:
            lam, nu = meta["dual_warm_start"]
            self.state.dual_warm_start = (float(lam), np.array(nu, dtype=np.float64))
        self._episode_counter = int(meta.get("episode_counter", 0))
        self._set_rng_states(meta["rng"])
        return meta

    # -- full run ------------------------------------------------------------

    def train(self, resume: bool = False) -> TrainState:
        """Run until the interaction budget; writes metrics, checkpoints and a
        manifest when an output directory is configured."""
        cfg = self.config
        out = self.out_dir
        metrics_path = ckpt_path = manifest_path = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_path = out / "metrics.jsonl"
            ckpt_path = out / "checkpoint.npz"
            manifest_path = out / "manifest.json"

        if resume and ckpt_path is not None and ckpt_path.exists():
            meta = self.load_checkpoint(ckpt_path)
            self._truncate_metrics(metrics_path, meta["n_metrics"])
        elif metrics_path is not None:
            metrics_path.write_text("")
            if self._dump_trajectories:
                (out / "trajectories.jsonl").write_text("")

        if manifest_path is not None:
            self._write_manifest(manifest_path, finished=False)

        while self.state.interactions < cfg.total_interactions:
            if cfg.max_iterations is not None and self.state.iteration >= cfg.max_iterations:
                break
            record = self.iteration()
            if metrics_path is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(json.dumps({k: record[k] for k in METRIC_FIELDS}) + "\n")
            if ckpt_path is not None and (self.state.iteration % cfg.checkpoint_every == 0):
                self.save_checkpoint(ckpt_path)

        if ckpt_path is not None:
            self.save_checkpoint(ckpt_path)
        if manifest_path is not None:
            self._write_manifest(manifest_path, finished=True)
        return self.state

    def _truncate_metrics(self, metrics_path: Path, n: int):
        if metrics_path is None or not metrics_path.exists():
            return
        lines = metrics_path.read_text().splitlines()
        metrics_path.write_text("".join(line + "\n" for line in lines[:n]))
        self.state.metrics = [json.loads(line) for line in lines[:n]]

    def _write_manifest(self, path: Path, finished: bool):
        recent = self.state.metrics[-20:]
        manifest = {
            "version": __version__,
            "algorithm": self.algorithm,
            "seed": self.config.seed,
            "config": _jsonable(asdict(self.config)),
            "started": getattr(self, "_started", None) or time.strftime("%Y-%m-%dT%H:%M:%S"),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S") if finished else None,
            "summary": {
                "iterations": self.state.iteration,
                "interactions": self.state.interactions,
                "total_violation_steps": self.state.total_violation_steps,
                "model_steps_per_update": self.state.model_steps_per_update,
                "final_alpha": self.state.alpha,
                "recent_mean_return": (float(np.mean([r["mean_return"] for r in recent]))
                                       if recent else None),
                "recent_violation_distance": (
                    float(np.mean([r["violation_distance"] for r in recent]))
                    if recent else None),
            },
        }
        if not hasattr(self, "_started"):
            self._started = manifest["started"]
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=2))
        os.replace(tmp, path)


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, (np.floating, np.integer)):
            out[k] = v.item()
        else:
            out[k] = v
    return out


def train(env: SafeModelEnv, config: TrainConfig, algorithm: str = "gcbf",
          out_dir: str | Path | None = None, resume: bool = False) -> TrainState:
    """Convenience wrapper: build a Trainer and run it to the budget."""
    trainer = Trainer(env, config, algorithm=algorithm, out_dir=out_dir)
    return trainer.train(resume=resume)
