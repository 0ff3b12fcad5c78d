"""Helpers shared by the experiment scripts and the acceptance suite."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .algorithm import init_policy
from .cli import EVAL_STREAM, cmd_run
from .config import ExperimentConfig, parse_text
from .policy_io import load_policy
from .rollout import policy_return, sample_rollouts


def read_iterations(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def decrease_fraction(mean: np.ndarray, stderr: np.ndarray, sigmas: float = 2.0) -> float:
    """Share of iterations whose mean return drops by more than ``sigmas`` combined stderr."""
    mean, stderr = np.asarray(mean), np.asarray(stderr)
    if mean.size < 2:
        return 0.0
    drop = mean[1:] < mean[:-1] - sigmas * np.sqrt(stderr[1:] ** 2 + stderr[:-1] ** 2)
    return float(np.mean(drop))


def learning_curve_area(mean: np.ndarray) -> float:
    """Area under the learning curve: sum of per-iteration mean returns."""
    return float(np.sum(mean))


def evaluate(cfg: ExperimentConfig, policy, rollouts: int) -> tuple[float, float]:
    env = cfg.make_env()
    batch = sample_rollouts(env, policy, rollouts, cfg.seed, EVAL_STREAM, cfg.threads_effective)
    return policy_return(batch)


@dataclass
class RunResult:
    out_dir: Path
    curve: dict
    j_init: tuple
    j_final: tuple


def run_experiment(text: str, out_dir, preset: str | None = None, eval_rollouts: int = 100) -> RunResult:
    """Run through the CLI code path, then evaluate the initial and final policies."""
    out_dir = Path(out_dir)
    cfg = parse_text(text, preset)
    code = cmd_run(cfg, str(out_dir))
    if code != 0:
        raise RuntimeError(f"run in {out_dir} failed with exit code {code}")
    env = cfg.make_env()
    pi0 = init_policy(env, cfg.moto_config())
    final = load_policy(out_dir / "policy_final.txt")
    return RunResult(out_dir, read_iterations(out_dir / "iterations.csv"),
                     evaluate(cfg, pi0, eval_rollouts), evaluate(cfg, final, eval_rollouts))

