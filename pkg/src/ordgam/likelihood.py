"""Cumulative-logit (proportional odds) log-likelihood.

``P(Y <= r) = F(alpha_{r+1} - eta)`` with ``F`` the logistic CDF and cut
points ``alpha_1 < ... < alpha_{R-1}``. The first cut point is pinned at -1;
the others are parameterized by log gaps ``delta_r = log(alpha_{r+1} - alpha_r)``.

The log-probability of category ``y`` with ``a = alpha_{y+1} - eta`` and
``b = alpha_y - eta`` is evaluated as

    log F(a) + log(1 - F(b)) + log(1 - exp(b - a))

which never forms a difference of nearly equal CDF values.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

ALPHA_1 = -1.0
LOG_PROB_FLOOR = np.log(1e-305)


def logistic_cdf(z):
    """Logistic CDF, sign-split so neither branch overflows."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    nan = np.isnan(z)
    out[nan] = np.nan
    return out if out.ndim else float(out)


def logistic_quantile(u):
    u = np.asarray(u, dtype=float)
    return np.log(u) - np.log1p(-u)


@dataclass(frozen=True)
class CutPoints:
    """Increasing thresholds with ``alpha_1 = -1`` stored as log gaps."""

    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta", np.atleast_1d(np.asarray(self.delta, dtype=float)))

    @property
    def n_categories(self) -> int:
        return self.delta.size + 2

    @property
    def alpha(self) -> np.ndarray:
        return np.concatenate([[ALPHA_1], ALPHA_1 + np.cumsum(np.exp(self.delta))])

    def extended(self) -> np.ndarray:
        """``[-inf, alpha_1, ..., alpha_{R-1}, +inf]``."""
        return np.concatenate([[-np.inf], self.alpha, [np.inf]])

    def jacobian(self) -> np.ndarray:
        """d alpha_ext / d delta, shape (R+1, R-2); rows for +-inf are zero."""
        R = self.n_categories
        J = np.zeros((R + 1, R - 2))
        e = np.exp(self.delta)
        for j in range(2, R):
            J[j, : j - 1] = e[: j - 1]
        return J

    @classmethod
    def from_alpha(cls, alpha) -> "CutPoints":
        alpha = np.asarray(alpha, dtype=float)
        if alpha.size < 1 or abs(alpha[0] - ALPHA_1) > 1e-12:
            raise ValueError("first cut point must be -1")
        gaps = np.diff(alpha)
        if np.any(gaps <= 0):
            raise ValueError("cut points must be strictly increasing")
        return cls(np.log(gaps))

    @classmethod
    def equally_spaced(cls, n_categories: int, gap: float = 1.0) -> "CutPoints":
        return cls(np.full(n_categories - 2, np.log(gap)))


def _check_r(r, R):
    if not 0 <= r <= R - 1:
        raise ValueError(f"category {r} outside 0..{R - 1}")


def cumulative_prob(alpha: CutPoints, eta, r: int):
    """P(Y <= r) = F(alpha_{r+1} - eta); exactly 1 for r = R-1."""
    _check_r(r, alpha.n_categories)
    eta = np.asarray(eta, dtype=float)
    if r == alpha.n_categories - 1:
        return np.ones_like(eta) if eta.ndim else 1.0
    return logistic_cdf(alpha.alpha[r] - eta)


def _log_interval_prob(a, b):
    """log(F(a) - F(b)) for a > b (either may be infinite)."""
    with np.errstate(invalid="ignore"):
        return -np.logaddexp(0.0, -a) - np.logaddexp(0.0, b) + np.log(-np.expm1(b - a))


def category_prob(alpha: CutPoints, eta, r: int):
    _check_r(r, alpha.n_categories)
    ext = alpha.extended()
    eta = np.asarray(eta, dtype=float)
    out = np.exp(_log_interval_prob(ext[r + 1] - eta, ext[r] - eta))
    return out if out.ndim else float(out)


def category_probs(alpha: CutPoints, eta) -> np.ndarray:
    """(n, R) matrix of category probabilities."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    ext = alpha.extended()
    upper = ext[1:][None, :] - eta[:, None]
    lower = ext[:-1][None, :] - eta[:, None]
    return np.exp(_log_interval_prob(upper, lower))


def _obs_terms(eta, y, ext):
    """Per-observation log-likelihood and derivatives w.r.t. (a, b)."""
    a = ext[y + 1] - eta
    b = ext[y] - eta
    ll = _log_interval_prob(a, b)
    Fa = logistic_cdf(a)
    Fa_c = logistic_cdf(-a)
    Fb = logistic_cdf(b)
    Fb_c = logistic_cdf(-b)
    with np.errstate(divide="ignore", over="ignore"):
        g = 1.0 / np.expm1(a - b)
    g = np.where(np.isfinite(g), g, 0.0)
    gg = g * (1.0 + g)
    la = Fa_c + g
    lb = -Fb - g
    laa = -Fa * Fa_c - gg
    lbb = -Fb * Fb_c - gg
    lab = gg
    return ll, la, lb, laa, lbb, lab


def eta_derivatives(eta, y, alpha: CutPoints):
    """Log-likelihood terms and first/second derivatives with respect to eta.

    Returns ``(ll_i, d1_i, d2_i)``; ``d2`` is strictly negative.
    """
    ll, la, lb, laa, lbb, lab = _obs_terms(eta, y, alpha.extended())
    return ll, -(la + lb), laa + 2.0 * lab + lbb


@dataclass(frozen=True)
class LikelihoodState:
    eta: np.ndarray
    probs: np.ndarray
    value: float
    grad: np.ndarray
    hess: Optional[np.ndarray]
    flagged: bool = False

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.value))


def loglik_arrays(X, y, theta, alpha: CutPoints, hessian: bool = True,
                  with_probs: bool = True) -> LikelihoodState:
    """Log-likelihood, gradient and Hessian in (theta, delta).

    The gradient and Hessian are ordered as ``[theta..., delta...]``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    eta = X @ theta
    ext = alpha.extended()
    ll, la, lb, laa, lbb, lab = _obs_terms(eta, y, ext)
    flagged = bool(np.any(~(ll >= LOG_PROB_FLOOR)))
    if flagged:
        ll = np.where(np.isnan(ll), -np.inf, ll)
    value = float(np.sum(ll))

    Jext = alpha.jacobian()
    Ja = Jext[y + 1]
    Jb = Jext[y]
    d1 = -(la + lb)
    grad = np.concatenate([X.T @ d1, Ja.T @ la + Jb.T @ lb])

    hess = None
    if hessian:
        p, q = X.shape[1], Ja.shape[1]
        hess = np.empty((p + q, p + q))
        w = laa + 2.0 * lab + lbb
        hess[:p, :p] = (X * w[:, None]).T @ X
        cross = -(X.T @ ((laa + lab)[:, None] * Ja + (lab + lbb)[:, None] * Jb))
        hess[:p, p:] = cross
        hess[p:, :p] = cross.T
        ab = (Ja * lab[:, None]).T @ Jb
        dd = (Ja * laa[:, None]).T @ Ja + ab + ab.T + (Jb * lbb[:, None]).T @ Jb
        hess[p:, p:] = dd + np.diag(grad[p:])
        hess = (hess + hess.T) / 2
    probs = category_probs(alpha, eta) if with_probs else np.empty((0, alpha.n_categories))
    return LikelihoodState(eta, probs, value, grad, hess, flagged)


def loglik(blocks, theta, alpha: CutPoints, d, hessian: bool = True) -> LikelihoodState:
    """Log-likelihood state of a dataset under assembled design ``blocks``."""
    theta = np.asarray(theta, dtype=float)
    if theta.size != blocks.p:
        raise ValueError(f"theta has length {theta.size}, design has {blocks.p} columns")
    X = blocks.X if blocks.X.shape[0] == len(d) else blocks.design(d)
    return loglik_arrays(X, d.scores, theta, alpha, hessian=hessian)
