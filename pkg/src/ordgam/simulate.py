"""Synthetic longitudinal multivariate ordinal data from the latent-logistic model.

For patient ``i``, evaluation ``j`` and site ``l``::

    U = eta + eps,  eps ~ Logistic(0, 1)
    eta = x' beta + f(cumdos_site) + b_i,  b_i ~ N(0, sigma_b^2)
    Y = #{r : alpha_r < U}

Randomness comes from NumPy's PCG64 with one substream per patient, seeded
by ``(seed, patient_index)``; logistic errors are drawn by inverting uniforms.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .bed import BedParams, BedSchedule, bed_series
from .data import Dataset

PAPER_SITES = ("hard", "soft", "tongue", "floor", "upper", "lower", "left_cheek", "right_cheek")


def _default_f_grid():
    x = np.linspace(0.0, 80.0, 161)
    return tuple(x.tolist()), tuple((3.0 * (1.0 - np.exp(-x / 12.0))).tolist())


@dataclass(frozen=True)
class SimConfig:
    n_patients: int = 75
    sites: tuple = PAPER_SITES
    site_effects: Mapping[str, float] = field(default_factory=dict)
    site_perc: Mapping[str, float] = field(default_factory=dict)
    perc_log_sd: float = 0.15
    evals_min: int = 10
    evals_max: int = 15
    evals_mean: float = 12.23
    eval_weekdays: tuple = (1, 4)
    fraction_dose: float = 2.0
    fractions_min: int = 30
    fractions_max: int = 35
    break_prob: float = 0.0
    break_days: int = 14
    intercept: float = 0.0
    study_effect: float = 0.0
    sex_effect: float = 0.0
    age_effect: float = 0.0
    age_mean: float = 60.0
    age_sd: float = 10.0
    dose_slope: float = 0.0
    f_grid_x: tuple = field(default_factory=lambda: _default_f_grid()[0])
    f_grid_y: tuple = field(default_factory=lambda: tuple([0.0] * 161))
    cutpoints: tuple = (-1.0, 0.0, 1.0)
    sigma_b: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1 or len(self.sites) < 1:
            raise ValueError("need at least one patient and one site")
        c = np.asarray(self.cutpoints, dtype=float)
        if c.size < 1 or abs(c[0] + 1.0) > 1e-12 or np.any(np.diff(c) <= 0):
            raise ValueError("cut points must be increasing with the first equal to -1")
        if self.sigma_b < 0:
            raise ValueError("sigma_b must be >= 0")
        if not self.evals_min <= self.evals_mean <= self.evals_max:
            raise ValueError("evals_mean must lie in [evals_min, evals_max]")
        if len(self.f_grid_x) != len(self.f_grid_y):
            raise ValueError("f grid x and y differ in length")

    @property
    def n_categories(self) -> int:
        return len(self.cutpoints) + 1

    def f(self, x):
        """True smooth effect (linear interpolation on the grid) plus ``dose_slope * x``."""
        x = np.asarray(x, dtype=float)
        return np.interp(x, self.f_grid_x, self.f_grid_y) + self.dose_slope * x

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SimConfig":
        obj = dict(obj)
        for key in ("sites", "eval_weekdays", "f_grid_x", "f_grid_y", "cutpoints"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def paper_like_config(seed: int = 0) -> SimConfig:
    """75 patients, 8 sites, twice-weekly evaluations, 5 x 2 Gy/week to 60-70 Gy."""
    gx, gy = _default_f_grid()
    return SimConfig(
        n_patients=75,
        sites=PAPER_SITES,
        site_effects={"hard": 0.0, "soft": 0.185, "tongue": -0.3, "floor": -0.8,
                      "upper": -1.2, "lower": -1.1, "left_cheek": -0.4, "right_cheek": -0.4},
        site_perc={"hard": 30.0, "soft": 85.0, "tongue": 80.0, "floor": 85.0,
                   "upper": 25.0, "lower": 28.0, "left_cheek": 57.0, "right_cheek": 57.0},
        intercept=-2.6,
        study_effect=0.4,
        f_grid_x=gx,
        f_grid_y=gy,
        cutpoints=(-1.0, 0.5, 2.2, 6.5),
        sigma_b=1.0,
        seed=seed,
    )


def _schedule(rng, cfg: SimConfig) -> BedSchedule:
    n_frac = int(rng.integers(cfg.fractions_min, cfg.fractions_max + 1))
    breaks = ()
    if cfg.break_prob > 0 and rng.random() < cfg.break_prob:
        after = int(rng.integers(5, max(6, n_frac - 5)))
        breaks = ((after, cfg.break_days),)
    return BedSchedule.standard(n_frac, cfg.fraction_dose, breaks=breaks)


def _eval_days(n_eval, weekdays):
    days, week = [], 0
    while len(days) < n_eval:
        for off in weekdays:
            days.append(7 * week + off)
        week += 1
    return np.asarray(days[:n_eval])


def draw_scores(eta, cutpoints, rng) -> np.ndarray:
    """Ordinal draws: count of cut points strictly below ``eta + logistic noise``."""
    u = rng.random(np.shape(eta))
    latent = np.asarray(eta) + (np.log(u) - np.log1p(-u))
    return np.sum(latent[..., None] > np.asarray(cutpoints)[None, :], axis=-1)


def simulate(cfg: SimConfig, bed_params: BedParams = BedParams()):
    """Simulate a dataset; returns ``(Dataset, truth)``.

    ``truth`` holds the random intercepts, the linear predictor per row and
    the configuration.
    """
    sites = tuple(cfg.sites)
    L = len(sites)
    width = len(str(cfg.n_patients))
    p_eval = 0.0 if cfg.evals_max == cfg.evals_min else \
        (cfg.evals_mean - cfg.evals_min) / (cfg.evals_max - cfg.evals_min)
    site_eff = np.array([cfg.site_effects.get(s, 0.0) for s in sites])
    site_perc = np.array([cfg.site_perc.get(s, 50.0) for s in sites])

    cols = {k: [] for k in ("patient", "eval", "site", "score", "cumdose", "perc",
                            "cumdos_site", "age", "sex", "study", "day", "bed_site")}
    etas, b_draws = [], {}
    for i in range(cfg.n_patients):
        rng = np.random.default_rng([cfg.seed, i])
        pid = f"P{i + 1:0{width}d}"
        sched = _schedule(rng, cfg)
        n_eval = cfg.evals_min + int(rng.binomial(cfg.evals_max - cfg.evals_min, p_eval))
        days = _eval_days(n_eval, cfg.eval_weekdays) + sched.days[0]
        n_delivered = np.searchsorted(np.asarray(sched.days), days, side="right")
        cumdose = np.cumsum(np.r_[0.0, sched.doses])[n_delivered]
        perc = np.clip(site_perc * np.exp(cfg.perc_log_sd * rng.standard_normal(L)), 1.0, 200.0)
        age = cfg.age_mean + cfg.age_sd * rng.standard_normal()
        sex = "M" if rng.random() < 0.5 else "F"
        study = "1" if rng.random() < 0.5 else "0"
        b = cfg.sigma_b * rng.standard_normal()
        b_draws[pid] = float(b)

        site_bed = np.zeros((L, n_eval))
        for l in range(L):
            site_sched = BedSchedule(sched.days, tuple(d * perc[l] / 100.0 for d in sched.doses))
            with warnings.catch_warnings():
                # low-dose sites legitimately go negative once repopulation starts
                warnings.simplefilter("ignore", UserWarning)
                series = np.r_[0.0, [v for _, v in bed_series(site_sched, bed_params)]]
            site_bed[l] = series[n_delivered]

        cds = cumdose[:, None] * perc[None, :] / 100.0              # (n_eval, L)
        eta = (cfg.intercept + cfg.study_effect * (study == "1") + cfg.sex_effect * (sex == "M")
               + cfg.age_effect * (age - cfg.age_mean) + site_eff[None, :] + cfg.f(cds) + b)
        y = draw_scores(eta, cfg.cutpoints, rng)

        cols["patient"] += [pid] * (n_eval * L)
        cols["eval"] += np.repeat(np.arange(1, n_eval + 1), L).tolist()
        cols["site"] += list(sites) * n_eval
        cols["score"] += y.ravel().tolist()
        cols["cumdose"] += np.repeat(cumdose, L).tolist()
        cols["perc"] += np.tile(perc, n_eval).tolist()
        cols["cumdos_site"] += cds.ravel().tolist()
        cols["age"] += [age] * (n_eval * L)
        cols["sex"] += [sex] * (n_eval * L)
        cols["study"] += [study] * (n_eval * L)
        cols["day"] += np.repeat(days, L).astype(float).tolist()
        cols["bed_site"] += site_bed.T.ravel().tolist()
        etas.append(eta.ravel())

    frame = pd.DataFrame(cols)
    levels = {"site": list(sites), "sex": ["F", "M"], "study": ["0", "1"]}
    d = Dataset.from_frame(frame, n_categories=cfg.n_categories, levels=levels)
    truth = {
        "random_intercepts": b_draws,
        "eta": np.concatenate(etas).tolist(),
        "levels": levels,
        "config": cfg.to_dict(),
    }
    return d, truth
