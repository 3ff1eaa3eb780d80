"""Nested estimation: PIRLS for coefficients, LAML for smoothing parameters and cut points.

Inner problem, for fixed log smoothing parameters ``rho`` and cut-point log
gaps ``delta``::

    maximize  l(theta) - 1/2 * sum_k exp(rho_k) theta' S_k theta

solved by penalized Newton iterations with step halving. Outer problem::

    V(rho, delta) = l_p(theta_hat) + 1/2 log|S_lambda|_+ - 1/2 log|H_p| + M_p/2 log(2 pi)

maximized by BFGS with central finite-difference gradients, each evaluation
warm-started from the previous inner optimum. The inverse-Hessian
approximation starts from a forward-difference Hessian of V (refreshed when
the set of coordinates held at a bound changes) rather than a scaled identity.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

from . import _jsonio
from .basis import DesignBlocks, ModelSpec, assemble
from .data import Dataset
from .exceptions import ConvergenceError, RidgeWarning, SeparationWarning, SingularHessianError
from .likelihood import CutPoints, category_probs, eta_derivatives, loglik_arrays

log = logging.getLogger(__name__)
_EPS = np.finfo(float).eps

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FitConfig:
    """Tolerances and caps for the inner and outer iterations."""

    pirls_tol: float = 1e-8
    pirls_max_iter: int = 200
    outer_max_iter: int = 100
    outer_f_tol: float = 1e-6
    outer_g_tol: float = 1e-4
    fd_step_rho: float = 1e-4
    fd_step_delta: float = 1e-5
    fd_hess_step_rho: float = 1e-3
    fd_hess_step_delta: float = 1e-4
    outer_method: str = "bfgs"
    outer_init_hessian: bool = True

    def __post_init__(self):
        if self.outer_method not in ("bfgs", "newton"):
            raise ValueError(f"unknown outer method {self.outer_method!r}")
    rho_bound: float = 15.0
    delta_bound: float = 15.0
    max_outer_step: float = 3.0
    separation_eta: float = 30.0


# --------------------------------------------------------------------------
# inner iteration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PirlsResult:
    theta: np.ndarray
    hessian: np.ndarray          # negative Hessian of the penalized log-likelihood
    neg_hessian: np.ndarray      # negative Hessian of the log-likelihood
    penalized_loglik: float
    loglik: float
    eta: np.ndarray
    iterations: int
    grad_norm: float
    ridge: bool = False
    chol: Optional[np.ndarray] = None


def _cholesky(H, warn=True):
    """Lower Cholesky factor, adding a ridge if H is not positive definite."""
    try:
        return linalg.cholesky(H, lower=True), False
    except linalg.LinAlgError:
        pass
    p = H.shape[0]
    ridge = 1e-8 * max(np.trace(H), 1e-300) / p
    for _ in range(20):
        try:
            L = linalg.cholesky(H + ridge * np.eye(p), lower=True)
        except linalg.LinAlgError:
            ridge *= 10.0
            continue
        if warn:
            warnings.warn(f"penalized Hessian not positive definite; added ridge {ridge:.3g}",
                          RidgeWarning, stacklevel=3)
        return L, True
    raise SingularHessianError("penalized Hessian is singular even after ridge stabilization")


def pirls(blocks: DesignBlocks, alpha: CutPoints, rho, d: Optional[Dataset] = None,
          init=None, config: FitConfig = FitConfig(), y=None) -> PirlsResult:
    """Maximize the penalized log-likelihood over coefficients for fixed ``rho`` and cut points.

    Every accepted step increases the penalized log-likelihood; steps are
    halved until they do.
    """
    X = blocks.X
    if y is None:
        y = d.scores
    rho = np.asarray(rho, dtype=float)
    if rho.size != blocks.n_penalties or np.any(np.isnan(rho)) or np.any(rho == np.inf):
        raise ValueError("rho needs one entry per penalty, each finite or -inf (no penalty)")
    S = blocks.penalty_matrix(rho)
    absX, absS = np.abs(X), np.abs(S)
    theta = np.zeros(blocks.p) if init is None else np.array(init, dtype=float)

    def objective(th):
        eta = X @ th
        ll, d1, d2 = eta_derivatives(eta, y, alpha)
        ll_sum = float(np.sum(ll))
        return ll_sum - 0.5 * th @ S @ th, ll_sum, eta, d1, d2

    lp, ll_sum, eta, d1, d2 = objective(theta)
    if not np.isfinite(lp):
        raise ConvergenceError("non-finite penalized log-likelihood at the starting point", theta)
    polished = False
    ridge_used = False
    for it in range(1, config.pirls_max_iter + 1):
        grad = X.T @ d1 - S @ theta
        Hneg = -(X * d2[:, None]).T @ X
        Hp = Hneg + S
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        L, ridged = _cholesky(Hp)
        ridge_used |= ridged
        step = linalg.cho_solve((L, True), grad)
        # Newton decrement below the rounding floor of lp (which grows with
        # cancellation in X @ theta): no step can be verified as an ascent
        decrement = float(grad @ step)
        absth = np.abs(theta)
        floor = _EPS * (abs(lp) + np.abs(d1) @ (absX @ absth) + absth @ absS @ absth)
        unresolvable = decrement <= max(floor, 1e3 * _EPS * (1.0 + abs(lp)))
        if gnorm <= config.pirls_tol * (1.0 + abs(lp)) or unresolvable:
            if polished:
                break
            polished = True
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = theta + t * step
            lp_new, ll_new, eta_new, d1_new, d2_new = objective(cand)
            if np.isfinite(lp_new) and lp_new >= lp:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if gnorm <= 1e3 * config.pirls_tol * (1.0 + abs(lp)):
                break
            raise ConvergenceError(
                f"PIRLS line search failed (gradient norm {gnorm:.3g})", theta)
        assert lp_new >= lp
        theta, lp, ll_sum, eta, d1, d2 = cand, lp_new, ll_new, eta_new, d1_new, d2_new
    else:
        raise ConvergenceError(
            f"PIRLS did not converge in {config.pirls_max_iter} iterations "
            f"(gradient norm {gnorm:.3g})", theta)

    step_size = float(np.max(np.abs(step))) if step.size else 0.0
    if np.max(np.abs(eta), initial=0.0) > config.separation_eta or step_size > 1e-3 * (1 + np.max(np.abs(theta))):
        warnings.warn("fitted probabilities saturate or Newton steps do not shrink: "
                      "possible (quasi-)complete separation", SeparationWarning, stacklevel=2)
    return PirlsResult(theta, Hp, Hneg, lp, ll_sum, eta, it, gnorm, ridge_used, L)


# --------------------------------------------------------------------------
# edf
# --------------------------------------------------------------------------

def edf(penalized_hessian, hessian, n_extra: int = 0):
    """Effective degrees of freedom ``tr(H_p^{-1} H)``.

    Returns ``(per_coefficient, total)``; ``n_extra`` unpenalized parameters
    estimated outside the coefficient vector (free cut points) are added to
    the total.
    """
    Hp = np.asarray(penalized_hessian, dtype=float)
    H = np.asarray(hessian, dtype=float)
    try:
        L = linalg.cholesky(Hp, lower=True)
    except linalg.LinAlgError:
        raise SingularHessianError(
            "penalized Hessian is singular; add a ridge or penalize the offending terms") from None
    F = linalg.cho_solve((L, True), H)
    per = np.diag(F).copy()
    return per, float(per.sum() + n_extra)


# --------------------------------------------------------------------------
# outer iteration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    """Converged model. ``covariance`` is over ``[coefficients..., delta...]``."""

    blocks: DesignBlocks
    coefficients: np.ndarray
    cutpoints: CutPoints
    rho: np.ndarray
    loglik: float
    penalized_loglik: float
    laml: float
    edf_total: float
    edf_coef: np.ndarray
    edf_terms: dict
    covariance: np.ndarray
    n_obs: int
    fitted_eta: np.ndarray
    convergence: dict = field(default_factory=dict)

    @property
    def spec(self) -> ModelSpec:
        return self.blocks.spec

    @property
    def labels(self) -> tuple:
        return self.blocks.labels

    @property
    def n_categories(self) -> int:
        return self.cutpoints.n_categories

    @property
    def alpha(self) -> np.ndarray:
        return self.cutpoints.alpha

    @property
    def rho_labels(self) -> list:
        return self.blocks.penalty_labels

    @property
    def sigma_b(self) -> Optional[float]:
        if self.blocks.random is None:
            return None
        return float(np.exp(-self.rho[-1] / 2.0))

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance)[: self.blocks.p])

    @property
    def n_free(self) -> int:
        return self.blocks.p + self.n_categories - 2

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def to_dict(self, covariance: bool = False) -> dict:
        out = {
            "spec": self.spec.to_dict(),
            "n_obs": self.n_obs,
            "n_categories": self.n_categories,
            "coefficients": {lab: float(v) for lab, v in zip(self.labels, self.coefficients)},
            "se": {lab: float(v) for lab, v in zip(self.labels, self.se)},
            "cutpoints": self.alpha.tolist(),
            "cutpoint_log_gaps": self.cutpoints.delta.tolist(),
            "rho": {lab: float(v) for lab, v in zip(self.rho_labels, self.rho)},
            "sigma_b": self.sigma_b,
            "edf": {"total": self.edf_total, "terms": dict(self.edf_terms)},
            "loglik": self.loglik,
            "penalized_loglik": self.penalized_loglik,
            "laml": self.laml,
            "convergence": self.convergence,
            "design": self.blocks.to_dict(),
        }
        if covariance:
            out["covariance"] = self.covariance
        return out

    def write_json(self, path, covariance: bool = False) -> None:
        _jsonio.dump(self.to_dict(covariance), path)

    @classmethod
    def from_dict(cls, obj) -> "FitResult":
        """Rebuild a prediction-capable result from :meth:`to_dict` output."""
        blocks = DesignBlocks.from_dict(obj["design"])
        theta = np.array([obj["coefficients"][lab] for lab in blocks.labels])
        cov = obj.get("covariance")
        q = blocks.p + obj["n_categories"] - 2
        if cov is None:
            se = np.array([obj["se"][lab] for lab in blocks.labels])
            cov = np.diag(np.r_[se ** 2, np.full(q - blocks.p, np.nan)])
        return cls(blocks, theta, CutPoints(obj["cutpoint_log_gaps"]),
                   np.array([obj["rho"][k] for k in blocks.penalty_labels]), obj["loglik"],
                   obj["penalized_loglik"], obj["laml"], obj["edf"]["total"],
                   np.full(blocks.p, np.nan), dict(obj["edf"]["terms"]), np.asarray(cov, dtype=float),
                   obj["n_obs"], np.empty(0), obj.get("convergence", {}))


def initial_cutpoints(y, n_categories: int) -> CutPoints:
    """Log gaps matching the empirical cumulative score distribution (unit gaps where degenerate)."""
    y = np.asarray(y)
    R = n_categories
    if R == 2:
        return CutPoints(np.empty(0))
    q = np.cumsum(np.bincount(y, minlength=R))[:-1] / y.size
    q = np.clip(q, 0.5 / y.size, 1 - 0.5 / y.size)
    gaps = np.diff(np.log(q) - np.log1p(-q))
    gaps = np.where(np.isfinite(gaps) & (gaps > 0.05), gaps, 1.0)
    return CutPoints(np.log(gaps))


class _Objective:
    """LAML criterion V(rho, delta) with inner warm starts."""

    def __init__(self, blocks, y, R, config):
        self.blocks = blocks
        self.y = y
        self.R = R
        self.config = config
        self.n_rho = blocks.n_penalties
        self.evals = 0

    def split(self, x):
        return x[: self.n_rho], CutPoints(x[self.n_rho:])

    def __call__(self, x, init):
        rho, cuts = self.split(x)
        self.evals += 1
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SeparationWarning)
            res = pirls(self.blocks, cuts, rho, init=init, config=self.config, y=self.y)
        logdet_hp = 2.0 * float(np.sum(np.log(np.diag(res.chol))))
        V = (res.penalized_loglik + 0.5 * self.blocks.logdet_penalty(rho)
             - 0.5 * logdet_hp + 0.5 * self.blocks.null_space_dim * LOG_2PI)
        return V, res

    def gradient(self, x, init):
        steps = np.r_[np.full(self.n_rho, self.config.fd_step_rho),
                      np.full(x.size - self.n_rho, self.config.fd_step_delta)]
        g = np.empty(x.size)
        for i, h in enumerate(steps):
            e = np.zeros(x.size)
            e[i] = h
            g[i] = (self(x + e, init)[0] - self(x - e, init)[0]) / (2 * h)
        return g

    def hessian(self, x, V0, init, free=None):
        """Forward-difference Hessian over the ``free`` coordinates."""
        idx = np.flatnonzero(np.ones(x.size, bool) if free is None else free)
        steps = np.where(np.arange(x.size) < self.n_rho,
                         self.config.fd_hess_step_rho, self.config.fd_hess_step_delta)
        m = idx.size
        single = np.empty(m)
        for a, i in enumerate(idx):
            e = np.zeros(x.size)
            e[i] = steps[i]
            single[a] = self(x + e, init)[0]
        H = np.empty((m, m))
        for a, i in enumerate(idx):
            for b in range(a, m):
                j = idx[b]
                e = np.zeros(x.size)
                e[i] += steps[i]
                e[j] += steps[j]
                H[a, b] = H[b, a] = (self(x + e, init)[0] - single[a] - single[b] + V0) \
                    / (steps[i] * steps[j])
        return H


def _newton_direction(H, g):
    """Ascent direction from a Hessian made negative definite by eigenvalue flipping."""
    w, Q = np.linalg.eigh((H + H.T) / 2)
    floor = max(1e-8 * np.max(np.abs(w), initial=0.0), 1e-10)
    w = -np.maximum(np.abs(w), floor)
    return -Q @ ((Q.T @ g) / w)


def _inverse_curvature(H):
    """Positive-definite inverse of -H after eigenvalue flipping."""
    w, Q = np.linalg.eigh((H + H.T) / 2)
    floor = max(1e-8 * np.max(np.abs(w), initial=0.0), 1e-10)
    return (Q / np.maximum(np.abs(w), floor)) @ Q.T


def _bfgs_update(Binv, s, yv):
    """BFGS update of the inverse Hessian of -V; skipped without positive curvature."""
    sy = s @ yv
    if sy <= 1e-12 * max(1.0, np.linalg.norm(s) * np.linalg.norm(yv)):
        return Binv
    n = s.size
    I = np.eye(n)
    if np.allclose(Binv, I):
        Binv = I * sy / (yv @ yv)
    r = 1.0 / sy
    return (I - r * np.outer(s, yv)) @ Binv @ (I - r * np.outer(yv, s)) + r * np.outer(s, s)


def laml(blocks: DesignBlocks, d: Dataset, spec: Optional[ModelSpec] = None,
         config: FitConfig = FitConfig(), rho0=None, delta0=None) -> FitResult:
    """Fit by Laplace-approximate marginal likelihood over (rho, delta).

    ``spec`` is accepted for symmetry with :func:`fit`; the assembled
    ``blocks`` already carry it.
    """
    y = d.scores
    R = d.n_categories
    if R < 2:
        raise ValueError("need at least two categories")
    if blocks.X.shape[0] != len(d):
        raise ValueError("design rows do not match the dataset")
    obj = _Objective(blocks, y, R, config)
    n_rho = blocks.n_penalties
    rho0 = np.zeros(n_rho) if rho0 is None else np.asarray(rho0, dtype=float)
    delta0 = initial_cutpoints(y, R).delta if delta0 is None else np.asarray(delta0, dtype=float)
    x = np.r_[rho0, delta0].astype(float)
    lb = np.r_[np.full(n_rho, -config.rho_bound), np.full(R - 2, -config.delta_bound)]
    ub = -lb
    x = np.clip(x, lb, ub)

    V, res = obj(x, None)
    trace = []
    converged = x.size == 0
    it = 0
    if x.size:
        g = obj.gradient(x, res.theta)
        Binv = None
        active_prev = None
        dV = np.inf
        for it in range(1, config.outer_max_iter + 1):
            at_ub = (x >= ub - 1e-12) & (g > 0)
            at_lb = (x <= lb + 1e-12) & (g < 0)
            free = ~(at_ub | at_lb)
            gnorm = float(np.max(np.abs(g[free]))) if free.any() else 0.0
            trace.append({"iter": it, "laml": V, "grad_norm": gnorm, "x": x.tolist()})
            log.debug("outer %d: V=%.10g |g|=%.3g", it, V, gnorm)
            if gnorm < config.outer_g_tol and (abs(dV) < config.outer_f_tol or not free.any()):
                converged = True
                break
            direction = np.zeros(x.size)
            if config.outer_method == "newton":
                H = obj.hessian(x, V, res.theta, free)
                direction[free] = _newton_direction(H, g[free])
            else:
                if active_prev is None or np.any(active_prev != free):
                    Binv = np.eye(x.size)
                    if config.outer_init_hessian:
                        Binv[np.ix_(free, free)] = _inverse_curvature(
                            obj.hessian(x, V, res.theta, free))
                    active_prev = free.copy()
                direction[free] = Binv[np.ix_(free, free)] @ g[free]
                if direction @ g <= 0:
                    log.debug("outer %d: not an ascent direction, using the gradient", it)
                    active_prev = None
                    direction = np.where(free, g, 0.0)
            big = np.max(np.abs(direction))
            if big > config.max_outer_step:
                direction *= config.max_outer_step / big

            t = 1.0
            accepted = False
            for _ in range(40):
                x_new = np.clip(x + t * direction, lb, ub)
                V_new, res_new = obj(x_new, res.theta)
                if V_new >= V + 1e-4 * (g @ (x_new - x)) and V_new >= V:
                    accepted = True
                    break
                t *= 0.5
            log.debug("outer %d: step %.3g accepted=%s", it, t, accepted)
            if not accepted:
                if gnorm < 10 * config.outer_g_tol or not np.any(direction):
                    converged = gnorm < 10 * config.outer_g_tol
                    break
                active_prev = None
                continue
            g_new = obj.gradient(x_new, res_new.theta)
            if config.outer_method != "newton":
                Binv = _bfgs_update(Binv, x_new - x, g - g_new)
            dV = V_new - V
            x, V, res, g = x_new, V_new, res_new, g_new
        else:
            raise ConvergenceError(
                f"LAML outer iteration did not converge in {config.outer_max_iter} iterations",
                iterate=x, trace=trace)

    return _finalize(blocks, d, obj, x, V, res, trace, converged, it, config)


def _finalize(blocks, d, obj, x, V, res, trace, converged, iterations, config) -> FitResult:
    rho, cuts = obj.split(x)
    R = cuts.n_categories
    notices = []
    for lab, r in zip(blocks.penalty_labels, rho):
        if r >= config.rho_bound - 1e-9:
            notices.append(f"{lab}: smoothing parameter at upper bound (penalty null space)")
        elif r <= -config.rho_bound + 1e-9:
            notices.append(f"{lab}: smoothing parameter at lower bound (effectively unpenalized)")
    for msg in notices:
        log.info(msg)

    # one last inner solve, emitting any separation warning to the caller
    res = pirls(blocks, cuts, rho, init=res.theta, config=config, y=obj.y)
    theta = res.theta
    state = loglik_arrays(blocks.X, obj.y, theta, cuts, hessian=True, with_probs=False)
    S = blocks.penalty_matrix(rho)
    H_full = -state.hess
    p = blocks.p
    H_full[:p, :p] += S
    L, ridged = _cholesky(H_full)
    if ridged:
        notices.append("joint Hessian needed a ridge for the covariance")
    cov = linalg.cho_solve((L, True), np.eye(H_full.shape[0]))
    cov = (cov + cov.T) / 2

    per, total = edf(res.hessian, res.neg_hessian, n_extra=R - 2)
    terms = {}
    for name, cols in blocks.term_slices().items():
        terms[name] = float(per[cols].sum())
    if R > 2:
        terms["cutpoints"] = float(R - 2)

    convergence = {
        "converged": bool(converged),
        "outer_iterations": int(iterations),
        "laml_evaluations": int(obj.evals),
        "pirls_iterations": int(res.iterations),
        "pirls_grad_norm": float(res.grad_norm),
        "outer_grad_norm": float(trace[-1]["grad_norm"]) if trace else 0.0,
        "ridge": bool(res.ridge or ridged),
        "notices": notices,
        "trace": trace,
    }
    return FitResult(blocks, theta, cuts, np.asarray(rho, dtype=float), res.loglik,
                     res.penalized_loglik, float(V), total, per, terms, cov, len(obj.y),
                     res.eta, convergence)


def fit(spec: ModelSpec, d: Dataset, config: FitConfig = FitConfig(), **kw) -> FitResult:
    """Assemble ``spec`` on ``d`` and fit it by LAML."""
    return laml(assemble(spec, d), d, spec, config=config, **kw)


def fixed_fit(blocks: DesignBlocks, d: Dataset, rho, delta, config: FitConfig = FitConfig()) -> FitResult:
    """Evaluate the fit at given (rho, delta) without outer optimization."""
    obj = _Objective(blocks, d.scores, d.n_categories, config)
    x = np.r_[np.asarray(rho, dtype=float), np.asarray(delta, dtype=float)]
    V, res = obj(x, None)
    return _finalize(blocks, d, obj, x, V, res, [], True, 0,
                     replace(config, rho_bound=np.inf, delta_bound=np.inf))


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    eta: np.ndarray
    probs: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.probs, axis=1)


def predict(fit: FitResult, newdata: Dataset, mode: str = "population",
            ghq_points: int = 20) -> Prediction:
    """Category probabilities for new rows.

    ``mode`` is ``"population"`` (random intercept set to 0),
    ``"conditional"`` (estimated intercepts; patients must be known) or
    ``"marginal"`` (intercept integrated over N(0, sigma_b^2) by
    Gauss-Hermite quadrature with ``ghq_points`` nodes).
    """
    if mode not in ("population", "conditional", "marginal"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    X = fit.blocks.design(newdata, random=(mode == "conditional"))
    eta = X @ fit.coefficients
    if mode == "marginal" and fit.sigma_b is not None and fit.sigma_b > 0:
        nodes, weights = np.polynomial.hermite_e.hermegauss(ghq_points)
        weights = weights / weights.sum()
        probs = np.zeros((eta.size, fit.n_categories))
        for z, w in zip(nodes, weights):
            probs += w * category_probs(fit.cutpoints, eta + fit.sigma_b * z)
    else:
        probs = category_probs(fit.cutpoints, eta)
    return Prediction(eta, probs)


def smooth_grid(fit: FitResult, n_points: int = 200) -> list:
    """Fitted smooth curves with pointwise standard errors on an even grid.

    The grid spans the knot range of each smooth. Returns one record per
    grid point and smooth: ``term, by_level, x, fit, se``.
    """
    cov = fit.covariance[: fit.blocks.p, : fit.blocks.p]
    rows = []
    for b, cols in zip(fit.blocks.smooths, fit.blocks.smooth_cols):
        x = np.linspace(b.knots.min(), b.knots.max(), n_points)
        B = b.raw_matrix(x) @ b.constraint
        f = B @ fit.coefficients[cols]
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", B, cov[cols, cols], B), 0.0))
        for xi, fi, si in zip(x, f, se):
            rows.append({"term": b.label, "by_level": b.by_level, "x": float(xi),
                         "fit": float(fi), "se": float(si)})
    return rows
