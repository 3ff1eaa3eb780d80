"""Model comparison and inference summaries.

Odds ratios follow the cumulative-logit orientation: for a factor level with
coefficient ``beta``::

    OR = odds(Y > r | level) / odds(Y > r | reference) = exp(beta)

for every ``r``, so ``OR > 1`` means higher scores are more likely than at
the reference level. Intervals are Wald intervals ``exp(beta +- 1.96 SE)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from .basis import ModelSpec, _is_factor
from .data import Dataset, collapse_binary
from .exceptions import ConvergenceError, SingularHessianError, ValidationError
from .fit import FitConfig, FitResult, fit, predict
from .likelihood import logistic_cdf, logistic_quantile

log = logging.getLogger(__name__)

Z_95 = 1.96


# --------------------------------------------------------------------------
# information criteria and prediction error
# --------------------------------------------------------------------------

def aic_bic(fit: FitResult, n: Optional[int] = None):
    """``(AIC, BIC)`` from the conditional log-likelihood and total edf.

    ``n`` defaults to the number of records the model was fitted to.
    """
    n = fit.n_obs if n is None else int(n)
    dev = -2.0 * fit.loglik
    return dev + 2.0 * fit.edf_total, dev + math.log(n) * fit.edf_total


def rmspe(y, probs, n_categories: Optional[int] = None) -> np.ndarray:
    """Root mean squared difference between category indicators and probabilities.

    Returns one value per category, pooled over all rows.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    R = probs.shape[1] if n_categories is None else int(n_categories)
    if probs.shape[1] != R:
        raise ValueError(f"probabilities have {probs.shape[1]} columns, expected {R}")
    y = np.asarray(y, dtype=np.int64)
    if y.size != probs.shape[0]:
        raise ValueError("y and probs differ in length")
    onehot = y[:, None] == np.arange(R)[None, :]
    return np.sqrt(np.mean((onehot - probs) ** 2, axis=0))


# --------------------------------------------------------------------------
# grouped cross-validation
# --------------------------------------------------------------------------

Predictor = Callable[[Dataset, Dataset], np.ndarray]


class FitPredictor:
    """Fit ``spec`` on the training rows, predict held-out rows.

    Held-out patients have no estimated intercept, so prediction is in
    population mode unless ``ghq_points`` asks for Gauss-Hermite
    marginalization over the fitted random-intercept distribution.
    """

    def __init__(self, spec: ModelSpec, config: FitConfig = FitConfig(),
                 ghq_points: Optional[int] = None):
        self.spec = spec
        self.config = config
        self.ghq_points = ghq_points

    def __call__(self, train: Dataset, test: Dataset) -> np.ndarray:
        m = fit(self.spec, train, self.config)
        if self.ghq_points:
            return predict(m, test, mode="marginal", ghq_points=self.ghq_points).probs
        return predict(m, test, mode="population").probs


def patient_folds(patients: Sequence, folds: int, seed) -> list:
    """Shuffle patients with a seeded PCG64 stream and split into near-equal groups."""
    patients = np.asarray(list(patients), dtype=object)
    if folds < 2:
        raise ValidationError("need at least 2 folds")
    if folds > patients.size:
        raise ValidationError(f"{folds} folds but only {patients.size} patients")
    perm = np.random.default_rng(seed).permutation(patients.size)
    return [tuple(patients[np.sort(g)]) for g in np.array_split(perm, folds)]


def _factor_columns(spec: ModelSpec, d: Dataset) -> list:
    cols = [c for c in spec.linear if c in d.frame.columns and _is_factor(d, c)]
    cols += [s.by for s in spec.smooth if s.by is not None]
    return sorted(set(cols))


def _missing_level(spec, d, groups):
    factors = _factor_columns(spec, d) if spec is not None else []
    pat = d.frame["patient"].to_numpy()
    for k, test in enumerate(groups):
        held = np.isin(pat, test)
        for col in factors:
            vals = d.frame[col].astype(str).to_numpy()
            lacking = set(vals[held]) - set(vals[~held])
            if lacking:
                return k, col, sorted(lacking)[0]
    return None


@dataclass(frozen=True)
class CVResult:
    """Pooled held-out prediction error.

    ``probs`` are the held-out predictions in the row order of the dataset;
    ``seed`` is the seed that produced ``folds`` (it differs from the
    requested one only after a level-coverage retry).
    """

    rpe: np.ndarray
    probs: np.ndarray
    folds: tuple
    seed: object
    n: int


def cv_rmspe(spec: Optional[ModelSpec], d: Dataset, folds: int = 15, seed=0,
             predictor: Optional[Predictor] = None, threads: int = 1,
             config: FitConfig = FitConfig(), ghq_points: Optional[int] = None) -> CVResult:
    """Patient-grouped k-fold cross-validated RMSPE per category.

    Parameters
    ----------
    spec : ModelSpec
        Model refitted on every training split. May be ``None`` when a
        custom ``predictor`` is given.
    folds, seed
        Patients are shuffled with ``numpy.random.default_rng(seed)`` and
        split into ``folds`` near-equal groups.
    predictor : callable, optional
        ``predictor(train, test) -> (n_test, R)`` probabilities. Defaults to
        :class:`FitPredictor`.
    threads : int
        Worker threads for the folds. Results do not depend on it.
    """
    if predictor is None:
        if spec is None:
            raise ValueError("need a spec or a predictor")
        predictor = FitPredictor(spec, config, ghq_points)
    groups = patient_folds(d.patients, folds, seed)
    used_seed = seed
    miss = _missing_level(spec, d, groups)
    if miss is not None:
        retry_seed = [seed, 1] if np.isscalar(seed) else list(seed) + [1]
        log.info("fold %d lacks level %r of %r in training; reshuffling", miss[0] + 1, miss[2], miss[1])
        groups = patient_folds(d.patients, folds, retry_seed)
        used_seed = retry_seed
        miss = _missing_level(spec, d, groups)
        if miss is not None:
            raise ValidationError(
                f"fold {miss[0] + 1}: training data lacks level {miss[2]!r} of {miss[1]!r} "
                "even after reshuffling")

    pat = d.frame["patient"].to_numpy()
    splits = []
    for test in groups:
        held = np.isin(pat, test)
        train_ids = set(pat[~held])
        if train_ids & set(test):
            raise AssertionError("a patient appears in both training and test folds")
        splits.append((np.flatnonzero(~held), np.flatnonzero(held)))

    def run(split):
        tr, te = split
        return predictor(d.subset(tr), d.subset(te))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, splits))
    else:
        outs = [run(s) for s in splits]

    R = d.n_categories
    probs = np.empty((len(d), R))
    for (_, te), p in zip(splits, outs):
        p = np.asarray(p, dtype=float)
        if p.shape != (te.size, R):
            raise ValueError(f"predictor returned shape {p.shape}, expected {(te.size, R)}")
        probs[te] = p
    return CVResult(rmspe(d.scores, probs, R), probs, tuple(groups), used_seed, len(d))


# --------------------------------------------------------------------------
# comparison report
# --------------------------------------------------------------------------

@dataclass
class SelectionReport:
    """One row per model: label, N, edf, AIC, BIC and RPE per category."""

    rows: list = field(default_factory=list)
    seed: object = 0
    folds: int = 15

    def add(self, label: str, n: int, edf: float, aic: float, bic: float, rpe) -> None:
        if self.rows and self.rows[0]["N"] != n:
            raise ValueError("models were fitted to different numbers of records")
        row = {"label": label, "N": int(n), "edf": float(edf), "AIC": float(aic), "BIC": float(bic)}
        for r, v in enumerate(np.asarray(rpe, dtype=float)):
            row[f"RPE{r}"] = float(v)
        self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def compare(specs: Sequence[ModelSpec], d: Dataset, folds: int = 15, seed=0, threads: int = 1,
            config: FitConfig = FitConfig(), ghq_points: Optional[int] = None,
            cv: bool = True) -> SelectionReport:
    """Fit every spec on all of ``d`` and cross-validate it with the same folds."""
    report = SelectionReport(seed=seed, folds=folds)
    for spec in specs:
        m = fit(spec, d, config)
        aic, bic = aic_bic(m)
        if cv:
            rpe = cv_rmspe(spec, d, folds, seed, threads=threads, config=config,
                           ghq_points=ghq_points).rpe
        else:
            rpe = np.full(d.n_categories, np.nan)
        report.add(spec.label, m.n_obs, m.edf_total, aic, bic, rpe)
    return report


# --------------------------------------------------------------------------
# odds ratios
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OddsRatioRow:
    level: str
    log_or: float
    se: float
    odds_ratio: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class OddsRatioTable:
    """Wald odds ratios of a factor's levels against its reference level."""

    term: str
    reference: str
    rows: tuple

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([vars(r) for r in self.rows])
        df.insert(0, "term", self.term)
        return df

    def row(self, level: str) -> OddsRatioRow:
        for r in self.rows:
            if r.level == level:
                return r
        raise KeyError(f"no level {level!r} in {self.term!r}")


def wald_odds_ratio(log_or: float, se: float, z: float = Z_95):
    """``(OR, low, high)`` for a log odds ratio and its standard error."""
    return math.exp(log_or), math.exp(log_or - z * se), math.exp(log_or + z * se)


def odds_ratio_per_change(beta: float, change: float) -> float:
    """Odds ratio of a linear covariate effect for a change of ``change`` units."""
    return math.exp(change * beta)


def odds_ratios(fit: FitResult, term: str, z: float = Z_95) -> OddsRatioTable:
    """Odds ratios of every level of factor ``term`` against its reference."""
    for t in fit.blocks.parametric:
        if t.name == term and t.kind == "factor":
            break
    else:
        raise KeyError(f"{term!r} is not a fitted factor term")
    se = fit.se
    rows = [OddsRatioRow(t.reference, 0.0, 0.0, 1.0, 1.0, 1.0)]
    others = [lv for lv in t.levels if lv != t.reference]
    for j, lv in zip(range(t.cols.start, t.cols.stop), others):
        b, s = float(fit.coefficients[j]), float(se[j])
        rows.append(OddsRatioRow(lv, b, s, *wald_odds_ratio(b, s, z)))
    return OddsRatioTable(term, t.reference, tuple(rows))


def factor_terms(fit: FitResult) -> list:
    return [t.name for t in fit.blocks.parametric if t.kind == "factor"]


# --------------------------------------------------------------------------
# proportional-odds diagnostic
# --------------------------------------------------------------------------

def po_diagnostic(spec: ModelSpec, d: Dataset, config: FitConfig = FitConfig(),
                  terms: Optional[Sequence[str]] = None,
                  po_fit: Optional[FitResult] = None) -> pd.DataFrame:
    """Factor odds ratios from the ordinal fit and from binary fits of ``Y > r``.

    Under proportional odds every binary fit estimates the same log odds
    ratios, with larger standard errors. Rows of a binary fit that failed
    carry ``converged = False`` and missing estimates.
    """
    R = d.n_categories
    if R < 3:
        raise ValidationError("the proportional-odds diagnostic needs at least 3 categories")
    po = fit(spec, d, config) if po_fit is None else po_fit
    terms = factor_terms(po) if terms is None else list(terms)
    records = []

    def emit(model, r, m, ok, msg=""):
        for term in terms:
            if ok:
                for row in odds_ratios(m, term).rows:
                    records.append({"model": model, "r": r, "converged": True, "message": msg,
                                    "term": term, **vars(row)})
            else:
                ref = odds_ratios(po, term)
                for row in ref.rows:
                    records.append({"model": model, "r": r, "converged": False, "message": msg,
                                    "term": term, "level": row.level, "log_or": np.nan,
                                    "se": np.nan, "odds_ratio": np.nan, "ci_low": np.nan,
                                    "ci_high": np.nan})

    emit("proportional_odds", -1, po, True)
    for r in range(R - 1):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                m = fit(spec, collapse_binary(d, r), config)
            emit("binary", r, m, True)
        except (ConvergenceError, SingularHessianError) as exc:
            log.warning("binary fit at r=%d failed: %s", r, exc)
            emit("binary", r, None, False, str(exc))
    return pd.DataFrame(records)


# --------------------------------------------------------------------------
# residuals
# --------------------------------------------------------------------------

def randomized_quantile_residuals(fit: FitResult, d: Dataset, rng=None,
                                  mode: str = "conditional") -> np.ndarray:
    """Latent-scale randomized quantile residuals.

    For a row with score ``y`` and linear predictor ``eta``, draw ``u``
    uniformly between ``F(alpha_y - eta)`` and ``F(alpha_{y+1} - eta)`` and
    return the logistic quantile of ``u``. Under the model they are
    standard logistic.
    """
    rng = np.random.default_rng(rng)
    eta = predict(fit, d, mode=mode).eta
    ext = fit.cutpoints.extended()
    y = d.scores
    lo = logistic_cdf(ext[y] - eta)
    hi = logistic_cdf(ext[y + 1] - eta)
    u = lo + (hi - lo) * rng.random(y.size)
    # keep u strictly inside (0, 1) so saturated rows stay finite
    tiny = np.finfo(float).tiny
    return logistic_quantile(np.clip(u, tiny, 1.0 - np.finfo(float).epsneg))


def residual_frame(fit: FitResult, d: Dataset, rng=None) -> pd.DataFrame:
    """Residuals with their logistic plotting positions, ready for a QQ plot."""
    res = randomized_quantile_residuals(fit, d, rng)
    n = res.size
    expected = np.empty(n)
    expected[np.argsort(res, kind="stable")] = logistic_quantile((np.arange(1, n + 1) - 0.5) / n)
    out = d.frame[["patient", "eval", "site", "score"]].copy()
    out["eta"] = predict(fit, d, mode="conditional").eta
    out["residual"] = res
    out["logistic_quantile"] = expected
    return out

