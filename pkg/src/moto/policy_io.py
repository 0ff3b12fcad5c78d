"""Flat-text persistence of time-dependent linear-Gaussian policies.

Format::

    MOTO-POLICY v1 <d_s> <d_a> <T>
    <K row-major> <k> <Sigma row-major>      # one line per time-step

Numbers are written with 17 significant digits, which round-trips any
float64 exactly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .gauss import LinGaussPolicy

MAGIC = "MOTO-POLICY"
VERSION = "v1"


class PolicyFormatError(ValueError):
    pass


def _fmt(x) -> str:
    return " ".join(f"{v:.17g}" for v in np.ravel(x))


def format_policy(policy: list[LinGaussPolicy]) -> str:
    if not policy:
        raise ValueError("empty policy")
    d_a, d_s = policy[0].gain.shape
    lines = [f"{MAGIC} {VERSION} {d_s} {d_a} {len(policy)}"]
    for t, p in enumerate(policy, start=1):
        if p.gain.shape != (d_a, d_s):
            raise ValueError(f"gain at t={t} has shape {p.gain.shape}, expected {(d_a, d_s)}")
        lines.append(" ".join([_fmt(p.gain), _fmt(p.bias), _fmt(p.cov)]))
    return "\n".join(lines) + "\n"


def parse_policy(text: str) -> list[LinGaussPolicy]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise PolicyFormatError("empty policy file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != MAGIC:
        raise PolicyFormatError(f"bad header: {lines[0]!r}")
    if head[1] != VERSION:
        raise PolicyFormatError(f"unsupported policy format version {head[1]!r}")
    try:
        d_s, d_a, T = (int(x) for x in head[2:])
    except ValueError as exc:
        raise PolicyFormatError(f"bad header: {lines[0]!r}") from exc
    if min(d_s, d_a, T) < 1:
        raise PolicyFormatError("dimensions in the header must be positive")
    if len(lines) - 1 != T:
        raise PolicyFormatError(f"header announces T={T} but the file has {len(lines) - 1} rows")
    n_gain, n_cov = d_a * d_s, d_a * d_a
    policy = []
    for t, line in enumerate(lines[1:], start=1):
        try:
            vals = np.array([float(x) for x in line.split()])
        except ValueError as exc:
            raise PolicyFormatError(f"row t={t}: {exc}") from exc
        if vals.size != n_gain + d_a + n_cov:
            raise PolicyFormatError(
                f"row t={t} has {vals.size} numbers, expected {n_gain + d_a + n_cov}"
            )
        gain = vals[:n_gain].reshape(d_a, d_s)
        bias = vals[n_gain : n_gain + d_a]
        cov = vals[n_gain + d_a :].reshape(d_a, d_a)
        policy.append(LinGaussPolicy(gain, bias, cov))
    return policy


def save_policy(path, policy: list[LinGaussPolicy]) -> None:
    Path(path).write_text(format_policy(policy))


def load_policy(path) -> list[LinGaussPolicy]:
    return parse_policy(Path(path).read_text())
