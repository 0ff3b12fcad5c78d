"""Command-line experiment runner.

Subcommands::

    moto run <config> [--preset NAME] [--output-dir DIR]
    moto verify-bounds [config] [--preset NAME] [--output-dir DIR]
    moto eval <policy> <config> [--rollouts M]

Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
3 bound violation.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import bounds
from .algorithm import IterationLog, run
from .config import ConfigError, ExperimentConfig, PRESETS, parse_config
from .env import NonFiniteStateError
from .gauss import DegenerateFitError, NotPositiveDefiniteError
from .policy_io import PolicyFormatError, load_policy, save_policy
from .qmodel import SingularRegressionError
from .rollout import policy_return, sample_rollouts
from .update import DualOptimizationError, InfeasibleDualError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_BOUND = 0, 1, 2, 3

ITERATION_FIELDS = ["iter", "return_mean", "return_stderr", "kl_mean", "entropy_mean", "ess_min",
                    "eta_mean", "omega_mean", "seconds"]

NUMERICAL_ERRORS = (NonFiniteStateError, NotPositiveDefiniteError, DegenerateFitError,
                    SingularRegressionError, DualOptimizationError, InfeasibleDualError,
                    FloatingPointError, np.linalg.LinAlgError)

# evaluation rollouts use an iteration index no training run reaches
EVAL_STREAM = 2**31

log = logging.getLogger("moto")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(v) -> str:
    return f"{v:.17g}" if isinstance(v, float) else str(v)


class IterationWriter:
    """Appends one CSV row per iteration and flushes immediately."""

    def __init__(self, path: Path, wall_clock: bool = True):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(ITERATION_FIELDS)
        self._fh.flush()
        self.wall_clock = wall_clock

    def __call__(self, entry: IterationLog, policy=None) -> None:
        row = entry.row()
        if not self.wall_clock:
            row["seconds"] = 0.0
        self._w.writerow([_fmt(row[k]) for k in ITERATION_FIELDS])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _load(path, preset) -> ExperimentConfig:
    return parse_config(path, preset)


def cmd_run(cfg: ExperimentConfig, output_dir: str | None = None) -> int:
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.txt").write_text(cfg.resolved_text())
    env = cfg.make_env()
    mcfg = cfg.moto_config()
    writer = IterationWriter(out / "iterations.csv", cfg.log_wall_clock)
    last = {}

    def on_iter(entry, policy):
        writer(entry)
        last["policy"] = policy
        log.info("iter %d  return %.6g +- %.3g", entry.iteration, entry.return_mean,
                 entry.return_stderr)

    try:
        policy, _ = run(env, mcfg, on_iter)
    except NUMERICAL_ERRORS as exc:
        log.error("numerical failure: %s: %s", type(exc).__name__, exc)
        if "policy" in last:
            save_policy(out / "policy_last_good.txt", last["policy"])
        return EXIT_NUMERIC
    finally:
        writer.close()
    save_policy(out / "policy_final.txt", policy)
    print(f"wrote {out / 'iterations.csv'}, {out / 'policy_final.txt'}, {out / 'config_resolved.txt'}")
    return EXIT_OK


def cmd_verify_bounds(cfg: ExperimentConfig, output_dir: str | None = None) -> int:
    reports = bounds.run_suite(cfg.seed, cfg.bounds_instances, cfg.bounds_rollouts)
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    bounds.write_reports_csv(out / "bounds_report.csv", reports)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed; report in {out / 'bounds_report.csv'}")
    return EXIT_BOUND if failed else EXIT_OK


def cmd_eval(policy_path: str, cfg: ExperimentConfig, rollouts: int | None = None) -> int:
    policy = load_policy(policy_path)
    env = cfg.make_env()
    spec = env.spec
    p0 = policy[0]
    if (p0.d_s, p0.d_a, len(policy)) != (spec.d_s, spec.d_a, spec.T):
        raise ConfigError(
            f"policy has d_s={p0.d_s}, d_a={p0.d_a}, T={len(policy)} but the environment "
            f"has d_s={spec.d_s}, d_a={spec.d_a}, T={spec.T}"
        )
    m = rollouts or cfg.eval_rollouts
    try:
        batch = sample_rollouts(env, policy, m, cfg.seed, EVAL_STREAM, cfg.threads_effective)
    except NUMERICAL_ERRORS as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    mean, se = policy_return(batch)
    print(f"mean return {mean:.10g} +- {se:.4g} (stderr, {m} rollouts)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moto", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run the optimiser and write iterations.csv and the final policy")
    r.add_argument("config", nargs="?", help="config file (optional with --preset)")
    r.add_argument("--preset", choices=PRESETS)
    r.add_argument("--output-dir")

    b = sub.add_parser("verify-bounds", help="run the numerical theory audits")
    b.add_argument("config", nargs="?")
    b.add_argument("--preset", choices=PRESETS)
    b.add_argument("--output-dir")

    e = sub.add_parser("eval", help="evaluate a saved policy")
    e.add_argument("policy")
    e.add_argument("config", nargs="?")
    e.add_argument("--preset", choices=PRESETS)
    e.add_argument("--rollouts", type=int, help="number of evaluation rollouts")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("run", "eval") and args.config is None and args.preset is None:
            raise UsageError(f"moto {args.command}: a config file or --preset is required")
        cfg = _load(args.config, args.preset)
        if args.command == "run":
            return cmd_run(cfg, args.output_dir)
        if args.command == "verify-bounds":
            return cmd_verify_bounds(cfg, args.output_dir)
        if args.rollouts is not None and args.rollouts < 1:
            raise UsageError("--rollouts must be >= 1")
        return cmd_eval(args.policy, cfg, args.rollouts)
    except (UsageError, ConfigError, PolicyFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
