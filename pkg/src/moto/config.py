"""Flat ``key = value`` experiment configuration with strict parsing.

One key per line, ``#`` starts a comment. Vectors are comma or space
separated; matrices separate rows with ``;``. Keys not listed in
:data:`SCHEMA` are rejected, and every error names the offending line.
A ``preset = <name>`` line (or the ``--preset`` flag) loads a bundled
preset first; later keys override it.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .algorithm import TARGET_MODES, MotoConfig
from .env import LinearEnv, LinearEnvParams, PendulumEnv, PendulumParams
from .gauss import GaussianDist
from .reuse import METHODS

PRESETS = ("double_link", "quad_link", "linquad")
ENVS = ("pendulum", "linear")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- value parsers


def _float(text: str) -> float:
    return float(text)


def _int(text: str) -> int:
    v = float(text)
    if not v.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _vector(text: str) -> tuple:
    parts = text.replace(",", " ").split()
    if not parts:
        raise ValueError("empty vector")
    return tuple(float(p) for p in parts)


def _matrix(text: str) -> tuple:
    rows = [_vector(r) for r in text.split(";")]
    if len({len(r) for r in rows}) != 1:
        raise ValueError("matrix rows have different lengths")
    return tuple(rows)


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


def _str(text: str) -> str:
    return text


# ---------------------------------------------------------------- range checks

_pos = (lambda v: v > 0, "must be > 0")
_nonneg = (lambda v: v >= 0, "must be >= 0")
_ge1 = (lambda v: v >= 1, "must be >= 1")
_all_pos = (lambda v: all(x > 0 for x in v), "entries must be > 0")
_all_nonneg = (lambda v: all(x >= 0 for x in v), "entries must be >= 0")
_unit = (lambda v: 0 < v <= 1, "must lie in (0, 1]")
_prune = (lambda v: 0 <= v < 1, "must lie in [0, 1)")


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: tuple | None = None
    doc: str = ""


_LINQUAD = {
    "lin_A": ((1.0, 0.1), (0.0, 1.0)),
    "lin_B": ((0.0,), (0.1,)),
    "lin_noise_cov": ((0.0, 0.0), (0.0, 0.0)),
    "lin_R_ss": ((-1.0, 0.0), (0.0, -0.1)),
    "lin_R_aa": ((-0.01,),),
    "lin_r_s": (0.0, 0.0),
    "lin_init_mean": (5.0, 0.0),
    "lin_init_cov": ((0.25, 0.0), (0.0, 0.25)),
}

SCHEMA: dict[str, Key] = {
    "env": Key(_choice(*ENVS), "pendulum", doc="pendulum or linear"),
    # pendulum
    "n_links": Key(_int, 2, _ge1),
    "masses": Key(_vector, (1.0, 1.0), _all_pos, "one per link"),
    "lengths": Key(_vector, (1.0, 1.0), _all_pos, "one per link"),
    "gravity": Key(_float, 9.81, _nonneg),
    "torque_limit": Key(_float, 25.0, _pos),
    "joint_limit_enabled": Key(_bool, False),
    "joint_threshold": Key(_float, 2.0 * math.pi / 3.0, _pos, "radians"),
    "joint_kp": Key(_float, 100.0, _nonneg),
    "joint_kd": Key(_float, 10.0, _nonneg),
    "dt": Key(_float, 0.02, _pos),
    "substeps": Key(_int, 4, _ge1),
    "cost_window": Key(_int, 20, _nonneg, "terminal steps carrying the state cost"),
    "state_cost_weights": Key(_vector, (100.0, 100.0, 1.0, 1.0), _all_nonneg,
                              "angles then velocities"),
    "action_cost_weight": Key(_float, 1e-3, _nonneg),
    "init_std": Key(_float, 1e-2, _pos),
    # shared
    "horizon": Key(_int, 100, _ge1, "T"),
    # linear
    "lin_A": Key(_matrix, _LINQUAD["lin_A"]),
    "lin_B": Key(_matrix, _LINQUAD["lin_B"]),
    "lin_noise_cov": Key(_matrix, _LINQUAD["lin_noise_cov"]),
    "lin_R_ss": Key(_matrix, _LINQUAD["lin_R_ss"]),
    "lin_R_aa": Key(_matrix, _LINQUAD["lin_R_aa"], doc="negative definite"),
    "lin_r_s": Key(_vector, _LINQUAD["lin_r_s"]),
    "lin_init_mean": Key(_vector, _LINQUAD["lin_init_mean"]),
    "lin_init_cov": Key(_matrix, _LINQUAD["lin_init_cov"]),
    # algorithm
    "eps": Key(_float, 0.1, _pos, "KL step size"),
    "beta0": Key(_float, 0.1, _nonneg, "entropy reduction per iteration (inf disables)"),
    "M": Key(_int, 20, _ge1, "rollouts per iteration"),
    "n_iters": Key(_int, 100, _nonneg),
    "gamma": Key(_float, 0.6, _unit, "reuse decay"),
    "k_last": Key(_int, 10, _ge1, "reuse window in iterations"),
    "ridge": Key(_float, 1e-6, _nonneg, "relative ridge parameter"),
    "target_mode": Key(_choice(*TARGET_MODES), "dynamic_programming"),
    "statedist_mode": Key(_choice(*METHODS), "mixture"),
    "importance_sampling": Key(_bool, True),
    "init_var": Key(_float, 1.0, _pos, "initial policy variance"),
    "ess_floor": Key(_float, 5.0, _nonneg),
    "weight_prune": Key(_float, 1e-10, _prune),
    # run
    "seed": Key(_int, 0, _nonneg),
    "threads": Key(_int, 0, _nonneg, "0 means all available cores"),
    "output_dir": Key(_str, "runs/default"),
    "log_wall_clock": Key(_bool, True, doc="false writes 0 in the seconds column"),
    "bounds_instances": Key(_int, 1000, _ge1),
    "bounds_rollouts": Key(_int, 100_000, (lambda v: v >= 2, "must be >= 2")),
    "eval_rollouts": Key(_int, 100, _ge1),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    preset: str | None = None

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def threads_effective(self) -> int:
        env = os.environ.get("MOTO_THREADS")
        if env:
            try:
                n = int(env)
            except ValueError as exc:
                raise ConfigError(f"MOTO_THREADS must be an integer, got {env!r}") from exc
            if n < 1:
                raise ConfigError("MOTO_THREADS must be >= 1")
            return n
        return self.values["threads"] or (os.cpu_count() or 1)

    def moto_config(self) -> MotoConfig:
        v = self.values
        return MotoConfig(
            eps=v["eps"], beta0=v["beta0"], M=v["M"], n_iters=v["n_iters"], gamma=v["gamma"],
            k_last=v["k_last"], ridge=v["ridge"], target_mode=v["target_mode"],
            statedist_mode=v["statedist_mode"], importance_sampling=v["importance_sampling"],
            init_var=v["init_var"], ess_floor=v["ess_floor"], weight_prune=v["weight_prune"],
            seed=v["seed"], threads=self.threads_effective,
        )

    def make_env(self):
        v = self.values
        if v["env"] == "pendulum":
            return PendulumEnv(PendulumParams(
                n_links=v["n_links"], masses=v["masses"], lengths=v["lengths"],
                gravity=v["gravity"], torque_limit=v["torque_limit"],
                joint_limit_enabled=v["joint_limit_enabled"], joint_threshold=v["joint_threshold"],
                joint_kp=v["joint_kp"], joint_kd=v["joint_kd"], dt=v["dt"], substeps=v["substeps"],
                horizon=v["horizon"], cost_window=v["cost_window"],
                state_cost_weights=v["state_cost_weights"],
                action_cost_weight=v["action_cost_weight"], init_std=v["init_std"],
            ))
        init = GaussianDist(np.array(v["lin_init_mean"]), np.array(v["lin_init_cov"]))
        return LinearEnv(LinearEnvParams(
            A=v["lin_A"], B=v["lin_B"], noise_cov=v["lin_noise_cov"], R_ss=v["lin_R_ss"],
            R_aa=v["lin_R_aa"], r_s=v["lin_r_s"], initial_state_dist=init, horizon=v["horizon"],
        ))

    def resolved_text(self) -> str:
        """Every effective value, in a form :func:`parse_text` reads back to the same config."""
        lines = []
        if self.preset:
            lines.append(f"# preset: {self.preset}")
        lines += [f"{k} = {format_value(self.values[k])}" for k in SCHEMA]
        return "\n".join(lines) + "\n"


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(format_value(r) for r in v)
        return ", ".join(format_value(x) for x in v)
    return str(v)


def _parse_lines(text: str, source: str):
    """Yield ``(line_no, key, raw_value)``; syntax errors name the line."""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        yield no, key, value


def _apply(values: dict, text: str, source: str, seen: dict) -> None:
    for no, key, raw in _parse_lines(text, source):
        if key == "preset":
            continue
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r} (first set on line {seen[key]})")
        spec = SCHEMA[key]
        try:
            val = spec.parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{no}: bad value for {key}: {exc}") from None
        if isinstance(val, float) and math.isnan(val):
            raise ConfigError(f"{source}:{no}: {key} must not be NaN")
        if spec.check is not None and not spec.check[0](val):
            raise ConfigError(f"{source}:{no}: {key} = {raw} out of range ({spec.check[1]})")
        seen[key] = no
        values[key] = val


def _preset_in(text: str, source: str) -> str | None:
    name = None
    for no, key, raw in _parse_lines(text, source):
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"{source}:{no}: unknown preset {raw!r} (known: {', '.join(PRESETS)})")
            name = raw
    return name


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})")
    return resources.files("moto.presets").joinpath(f"{name}.cfg").read_text()


def _cross_checks(v: dict) -> None:
    if v["env"] == "pendulum":
        n = v["n_links"]
        for key, size in (("masses", n), ("lengths", n), ("state_cost_weights", 2 * n)):
            if len(v[key]) != size:
                raise ConfigError(f"{key} needs {size} entries for n_links = {n}")
        if v["cost_window"] > v["horizon"]:
            raise ConfigError("cost_window must not exceed horizon")
    if not math.isfinite(v["eps"]):
        raise ConfigError("eps must be finite")


def parse_text(text: str, preset: str | None = None, source: str = "<config>") -> ExperimentConfig:
    values = {k: spec.default for k, spec in SCHEMA.items()}
    name = _preset_in(text, source) or preset
    if name is not None:
        _apply(values, preset_text(name), f"preset {name}", {})
    _apply(values, text, source, {})
    _cross_checks(values)
    cfg = ExperimentConfig(values, name)
    try:
        cfg.make_env()
        cfg.moto_config()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def parse_config(path=None, preset: str | None = None) -> ExperimentConfig:
    """Parse a config file (or only the preset when ``path`` is None)."""
    if path is None:
        return parse_text("", preset, "<defaults>")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_text(p.read_text(), preset, str(p))
