"""Command-line entry points: train, verify, export.

Exit codes are a stable contract: 0 success, 1 runtime/assertion failure,
2 usage or configuration error.  Setting the GCBFRL_OUT environment variable
reroots relative output directories; file schemas are documented in README.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .config import ConfigError, build_env, build_train_config, load_config
from .trainer import METRIC_FIELDS, Trainer
from .verify import SUITES, dump_failures, run_suite

CURVE_FIELDS = ("iteration", "interactions", "mean_return", "violation_distance", "alpha")


def _resolve_out(out: str) -> Path:
    root = os.environ.get("GCBFRL_OUT")
    if root:
        return Path(root) / out
    return Path(out)


@click.group()
def main():
    """Safe model-based RL toolkit."""


@main.command()
@click.option("--config", "-c", "config_path", type=str, default=None,
              help="YAML configuration overlaying the defaults.")
@click.option("--algo", type=click.Choice(["gcbf", "gcbf-adaptive", "mbpo"]),
              default="gcbf", show_default=True)
@click.option("--seed", type=int, default=None, help="Overrides train.seed.")
@click.option("--out", type=str, required=True, help="Run output directory.")
@click.option("--resume", is_flag=True, help="Resume from the run's checkpoint.")
def train(config_path, algo, seed, out, resume):
    """Run a training job and write metrics, checkpoints and a manifest."""
    algorithm = {"gcbf": "gcbf", "gcbf-adaptive": "gcbf_adaptive",
                 "mbpo": "mbpo_pointwise"}[algo]
    try:
        cfg = load_config(config_path)
        env = build_env(cfg)
        tc = build_train_config(cfg, algorithm, seed=seed)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(2)
    try:
        out_dir = _resolve_out(out)
        trainer = Trainer(env, tc, algorithm=algorithm, out_dir=out_dir)
        if cfg["train"].get("dump_trajectories"):
            trainer.enable_trajectory_dump()
        state = trainer.train(resume=resume)
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        click.echo(f"run failed: {exc}", err=True)
        sys.exit(1)
    click.echo(f"finished after {state.iteration} iterations, "
               f"{state.interactions} interactions -> {out_dir}")


@main.command()
@click.option("--suite", type=click.Choice(sorted(SUITES)), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
def verify(suite, seed):
    """Run a property suite and print one line per check."""
    checks = run_suite(suite, seed)
    width = max(len(c.name) for c in checks)
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        tol = f" (tol {c.tolerance:g})" if c.tolerance is not None else ""
        click.echo(f"{status}  {c.name:<{width}}  {c.detail}{tol}")
    if not all(c.passed for c in checks):
        replay = Path(f"verify_failure_{suite}.json")
        dump_failures(checks, replay)
        click.echo(f"failing instances written to {replay}", err=True)
        sys.exit(1)


@main.command()
@click.option("--run", "run_dir", type=str, required=True, help="Run directory.")
@click.option("--what", type=click.Choice(["curves", "trajectories"]), required=True)
def export(run_dir, what):
    """Convert run artifacts into plain CSV files for plotting."""
    run = _resolve_out(run_dir)
    if not run.is_dir():
        click.echo(f"no such run directory: {run}", err=True)
        sys.exit(2)
    if what == "curves":
        src = run / "metrics.jsonl"
        if not src.exists():
            click.echo(f"missing metrics file: {src}", err=True)
            sys.exit(2)
        dst = run / "curves.csv"
        with open(dst, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_FIELDS)
            for line in src.read_text().splitlines():
                rec = json.loads(line)
                writer.writerow([rec[k] for k in CURVE_FIELDS])
        click.echo(f"wrote {dst}")
    else:
        src = run / "trajectories.jsonl"
        dst = run / "trajectories.csv"
        records = []
        if src.exists():
            records = [json.loads(line) for line in src.read_text().splitlines()]
        obs_dim = len(records[0]["obs"]) if records else 0
        act_dim = len(records[0]["action"]) if records else 0
        header = (["episode", "step", "penalty", "violation", "h_max"]
                  + [f"a_{i}" for i in range(act_dim)]
                  + [f"obs_{i}" for i in range(obs_dim)])
        with open(dst, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for rec in records:
                writer.writerow([rec["episode"], rec["step"], rec["penalty"],
                                 rec["violation"], rec["h_max"]]
                                + list(rec["action"]) + list(rec["obs"]))
        click.echo(f"wrote {dst}")


if __name__ == "__main__":
    main()
