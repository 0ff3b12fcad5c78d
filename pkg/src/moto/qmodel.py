"""Quadratic Q- and V-function models and their weighted ridge regression.

Feature layout for ``z = (s, a)`` of dimension ``n = d_s + d_a``::

    [1, z_0, ..., z_{n-1}, z_0 z_0, z_0 z_1, ..., z_0 z_{n-1}, z_1 z_1, ..., z_{n-1} z_{n-1}]

i.e. bias, linear terms, then the upper triangle of ``z z^T`` row by row.
Each cross term appears once, so the Hessian entry for ``i != j`` equals
its coefficient while the diagonal entry is twice the coefficient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .gauss import symmetrize


class SingularRegressionError(np.linalg.LinAlgError):
    pass


def n_features(dim: int) -> int:
    return 1 + dim * (dim + 3) // 2


def _quad_features(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    n = z.shape[1]
    iu, ju = np.triu_indices(n)
    return np.concatenate([np.ones((z.shape[0], 1)), z, z[:, iu] * z[:, ju]], axis=1)


def features(s: np.ndarray, a: np.ndarray | None = None) -> np.ndarray:
    """Quadratic features of ``(s, a)``; pass ``a=None`` for state-only features."""
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    z = np.atleast_2d(s) if a is None else np.concatenate(
        [np.atleast_2d(s), np.atleast_2d(np.asarray(a, dtype=float))], axis=1
    )
    phi = _quad_features(z)
    return phi[0] if single else phi


def _coef_to_quadratic(w: np.ndarray, n: int):
    """Split coefficients into (H, g, c) with f(z) = 1/2 z'Hz + g'z + c."""
    w = np.asarray(w, dtype=float)
    if w.size != n_features(n):
        raise ValueError(f"expected {n_features(n)} coefficients for dim {n}, got {w.size}")
    c = w[0]
    g = w[1 : 1 + n].copy()
    iu, ju = np.triu_indices(n)
    h = np.zeros((n, n))
    h[iu, ju] = w[1 + n :]
    h = h + h.T  # diagonal doubled, off-diagonal mirrored
    return h, g, c


def _quadratic_to_coef(h: np.ndarray, g: np.ndarray, c: float) -> np.ndarray:
    n = g.size
    h = symmetrize(h)
    iu, ju = np.triu_indices(n)
    quad = np.where(iu == ju, 0.5 * h[iu, ju], h[iu, ju])
    return np.concatenate([[c], g, quad])


@dataclass(frozen=True)
class QuadraticModel:
    """``Q(s,a) = 1/2 a'Q_aa a + a'Q_as s + a'q_a + 1/2 s'Q_ss s + s'q_s + q_0``."""

    Q_aa: np.ndarray
    Q_as: np.ndarray
    Q_ss: np.ndarray
    q_a: np.ndarray
    q_s: np.ndarray
    q_0: float

    @property
    def d_s(self) -> int:
        return self.q_s.size

    @property
    def d_a(self) -> int:
        return self.q_a.size

    def __call__(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return (
            0.5 * np.sum((a @ self.Q_aa) * a, axis=-1)
            + np.sum((s @ self.Q_as.T) * a, axis=-1)
            + a @ self.q_a
            + 0.5 * np.sum((s @ self.Q_ss) * s, axis=-1)
            + s @ self.q_s
            + self.q_0
        )

    @classmethod
    def from_coefficients(cls, w: np.ndarray, d_s: int, d_a: int) -> "QuadraticModel":
        h, g, c = _coef_to_quadratic(w, d_s + d_a)
        return cls(
            Q_aa=symmetrize(h[d_s:, d_s:]),
            Q_as=h[d_s:, :d_s].copy(),
            Q_ss=symmetrize(h[:d_s, :d_s]),
            q_a=g[d_s:],
            q_s=g[:d_s],
            q_0=float(c),
        )

    def coefficients(self) -> np.ndarray:
        h = np.block([[self.Q_ss, self.Q_as.T], [self.Q_as, self.Q_aa]])
        return _quadratic_to_coef(h, np.concatenate([self.q_s, self.q_a]), self.q_0)


@dataclass(frozen=True)
class QuadraticV:
    """``V(s) = 1/2 s'V_ss s + s'v_s + v_0``."""

    V_ss: np.ndarray
    v_s: np.ndarray
    v_0: float

    @classmethod
    def zero(cls, d_s: int) -> "QuadraticV":
        return cls(np.zeros((d_s, d_s)), np.zeros(d_s), 0.0)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return 0.5 * np.sum((s @ self.V_ss) * s, axis=-1) + s @ self.v_s + self.v_0

    @classmethod
    def from_coefficients(cls, w: np.ndarray, d_s: int) -> "QuadraticV":
        h, g, c = _coef_to_quadratic(w, d_s)
        return cls(symmetrize(h), g, float(c))

    def coefficients(self) -> np.ndarray:
        return _quadratic_to_coef(self.V_ss, self.v_s, self.v_0)


def fit_weighted_ridge(
    phi: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    lam: float = 0.0,
    penalize_bias: bool = False,
) -> np.ndarray:
    """Minimise ``sum_k w_k (<w, phi_k> - y_k)^2 / sum_k w_k + lam |w|^2``.

    Column 0 of ``phi`` is taken to be the bias and is left unpenalised
    unless ``penalize_bias`` is set.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    if lam < 0:
        raise ValueError("ridge parameter must be nonnegative")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative with at least one positive entry")
    w = w / w.sum()
    gram = (phi * w[:, None]).T @ phi
    rhs = phi.T @ (w * y)
    pen = np.ones(phi.shape[1])
    if not penalize_bias:
        pen[0] = 0.0
    gram = symmetrize(gram) + lam * np.diag(pen)
    try:
        chol = linalg.cholesky(gram, lower=True)
    except linalg.LinAlgError:
        chol = None
    if chol is None or np.min(np.diag(chol)) <= 1e-12 * np.sqrt(np.max(np.diag(gram))):
        if lam == 0:
            raise SingularRegressionError(
                "normal equations are singular; use a nonzero ridge parameter"
            )
        if chol is None:
            raise SingularRegressionError("regularised normal equations are not positive definite")
    return linalg.cho_solve((chol, True), rhs)


def _whitening(z: np.ndarray, w: np.ndarray):
    wn = w / w.sum()
    mean = wn @ z
    std = np.sqrt(wn @ (z - mean) ** 2)
    scale = np.max(std) if np.max(std) > 0 else 1.0
    std = np.where(std > 1e-12 * scale, std, 1.0)
    return mean, std


def _fit_quadratic(z, y, weights, lam_rel):
    """Weighted ridge on standardized quadratic features, mapped back to raw z."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    mean, std = _whitening(z, w)
    phi = _quad_features((z - mean) / std)
    wn = w / w.sum()
    lam = lam_rel * float(wn @ np.sum(phi**2, axis=1))
    coef = fit_weighted_ridge(phi, y, w, lam)
    # f(z) = 1/2 u'Hu + g'u + c with u = D (z - m), D = diag(1/std)
    n = z.shape[1]
    h, g, c = _coef_to_quadratic(coef, n)
    d = 1.0 / std
    h_raw = h * np.outer(d, d)
    g_raw = d * g - h_raw @ mean
    c_raw = c - g @ (d * mean) + 0.5 * mean @ h_raw @ mean
    return h_raw, g_raw, c_raw


def fit_q(s, a, targets, weights=None, lam: float = 1e-6) -> QuadraticModel:
    """Fit a quadratic Q-model; ``lam`` is relative to the mean squared feature norm."""
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    d_s = s.shape[1]
    h, g, c = _fit_quadratic(np.concatenate([s, a], axis=1), targets, weights, lam)
    return QuadraticModel(
        Q_aa=symmetrize(h[d_s:, d_s:]),
        Q_as=h[d_s:, :d_s].copy(),
        Q_ss=symmetrize(h[:d_s, :d_s]),
        q_a=g[d_s:],
        q_s=g[:d_s],
        q_0=float(c),
    )


def fit_v(s, targets, weights=None, lam: float = 1e-6) -> QuadraticV:
    """Weighted ridge fit of a quadratic V-model on state-only features."""
    h, g, c = _fit_quadratic(np.atleast_2d(s), targets, weights, lam)
    return QuadraticV(symmetrize(h), g, float(c))


def mc_targets(rewards: np.ndarray, t: int) -> np.ndarray:
    """Monte-Carlo targets: sum of rewards from 1-based step ``t`` to the horizon.

    ``rewards`` has shape ``(T,)`` for one trajectory or ``(M, T)`` for several.
    """
    r = np.asarray(rewards, dtype=float)
    return np.sum(r[..., t - 1 :], axis=-1)


def dp_targets(r: np.ndarray, s_next: np.ndarray, v_next: QuadraticV | None) -> np.ndarray:
    """Dynamic-programming targets ``r + V_{t+1}(s')``; ``None`` stands for the zero V."""
    r = np.asarray(r, dtype=float)
    if v_next is None:
        return r.copy()
    return r + v_next(s_next)


def extract_update_blocks(q: QuadraticModel):
    """Action-dependent blocks ``(Q_aa, Q_as, q_a)``; state-only terms never enter the update."""
    return q.Q_aa, q.Q_as, q.q_a
