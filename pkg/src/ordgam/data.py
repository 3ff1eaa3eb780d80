"""Longitudinal multivariate ordinal data: CSV ingestion, validation, recoding.

A :class:`Dataset` holds one row per (patient, evaluation, site) with the
ordinal score, the cumulative tumour dose, the site's median percentage dose
and the derived site-specific cumulative dose, plus patient covariates.
Rows are kept sorted by (patient, eval, site level).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np
import pandas as pd

from .exceptions import SchemaError, ValidationError

log = logging.getLogger(__name__)

LOGICAL_COLUMNS = (
    "patient", "eval", "site", "score", "cumdose", "perc", "cumdos_site",
    "age", "sex", "study", "volume", "day",
)
CATEGORICAL_COLUMNS = ("patient", "site", "sex", "study")
REQUIRED_COLUMNS = ("patient", "eval", "site", "score")

_REL_TOL_SITE_DOSE = 1e-9


@dataclass(frozen=True)
class ObservationRecord:
    """One (patient, evaluation, site) observation."""

    patient_id: str
    eval_index: int
    site: str
    score: int
    cumdose: float = float("nan")
    perc: float = float("nan")
    cumdos_site: float = float("nan")
    age: float = float("nan")
    sex: Optional[str] = None
    study: Optional[str] = None
    volume: float = float("nan")
    day: float = float("nan")


@dataclass(frozen=True)
class Dataset:
    """Validated, sorted collection of observations.

    Treat instances as read-only: every transformation returns a new
    Dataset and never mutates ``frame`` in place.
    """

    frame: pd.DataFrame
    n_categories: int
    factor_levels: Mapping[str, tuple] = field(default_factory=dict)

    def __len__(self):
        return len(self.frame)

    @property
    def site_levels(self) -> tuple:
        return self.factor_levels["site"]

    @property
    def patients(self) -> tuple:
        return self.factor_levels["patient"]

    @property
    def scores(self) -> np.ndarray:
        return self.frame["score"].to_numpy(dtype=np.int64)

    @property
    def patient_index(self) -> dict:
        """Map patient id to the ``slice`` of its (contiguous) rows."""
        pid = self.frame["patient"].to_numpy()
        out = {}
        if len(pid) == 0:
            return out
        starts = np.flatnonzero(np.r_[True, pid[1:] != pid[:-1]])
        stops = np.r_[starts[1:], len(pid)]
        for a, b in zip(starts, stops):
            out[pid[a]] = slice(int(a), int(b))
        return out

    def counts(self) -> np.ndarray:
        return np.bincount(self.scores, minlength=self.n_categories)

    def column(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise SchemaError(f"column {name!r} not present in dataset")
        return self.frame[name].to_numpy()

    def is_categorical(self, name: str) -> bool:
        return name in self.factor_levels

    def records(self) -> Iterator[ObservationRecord]:
        names = [f for f in ObservationRecord.__dataclass_fields__]
        mapping = {"patient_id": "patient", "eval_index": "eval"}
        for row in self.frame.itertuples(index=False):
            row = row._asdict()
            kw = {}
            for n in names:
                col = mapping.get(n, n)
                if col in row:
                    kw[n] = row[col]
            yield ObservationRecord(**kw)

    def with_scores(self, scores: np.ndarray, n_categories: int) -> "Dataset":
        frame = self.frame.copy()
        frame["score"] = np.asarray(scores, dtype=np.int64)
        return Dataset(frame, int(n_categories), dict(self.factor_levels))

    def subset(self, rows) -> "Dataset":
        """Rows selected by boolean mask or integer index; factor levels are kept."""
        idx = np.asarray(rows)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        frame = self.frame.iloc[idx].reset_index(drop=True)
        levels = dict(self.factor_levels)
        present = set(frame["patient"])
        levels["patient"] = tuple(p for p in self.factor_levels["patient"] if p in present)
        return Dataset(frame, self.n_categories, levels)

    def select_patients(self, patients) -> "Dataset":
        keep = set(patients)
        return self.subset(self.frame["patient"].isin(keep).to_numpy())

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, n_categories: Optional[int] = None,
                   levels: Optional[Mapping[str, list]] = None) -> "Dataset":
        """Validate a frame with logical column names and build a Dataset."""
        return _build(frame.copy(), n_categories, levels or {})


def _row_label(idx) -> str:
    return f"row {int(idx) + 1}"


def _patient_order(ids):
    ids = list(ids)
    try:
        return sorted(ids, key=lambda s: (int(s), s))
    except (TypeError, ValueError):
        return sorted(ids)


def _build(frame: pd.DataFrame, n_categories, levels) -> Dataset:
    for col in REQUIRED_COLUMNS:
        if col not in frame.columns:
            raise SchemaError(f"missing required column {col!r}")
    has_site_dose = "cumdos_site" in frame.columns
    if not has_site_dose and not {"cumdose", "perc"} <= set(frame.columns):
        missing = "cumdose" if "cumdose" not in frame.columns else "perc"
        raise SchemaError(f"missing column {missing!r} (needed to derive cumdos_site)")

    score = pd.to_numeric(frame["score"], errors="coerce")
    missing = score.isna()
    if missing.any():
        log.info("dropping %d rows with missing score", int(missing.sum()))
        frame = frame.loc[~missing]
        score = score.loc[~missing]
    bad = score != np.round(score)
    if bad.any():
        raise ValidationError(f"non-integer score at {_row_label(score.index[bad.to_numpy()][0])}")
    score = score.astype(np.int64)
    if n_categories is None:
        n_categories = max(int(score.max()) + 1, 2) if len(score) else 2
    n_categories = int(n_categories)
    if n_categories < 2:
        raise ValidationError("n_categories must be at least 2")
    out_of_range = (score < 0) | (score >= n_categories)
    if out_of_range.any():
        i = score.index[out_of_range.to_numpy()][0]
        raise ValidationError(
            f"score {int(score.loc[i])} at {_row_label(i)} outside 0..{n_categories - 1}")
    frame = frame.assign(score=score)

    for col in CATEGORICAL_COLUMNS:
        if col in frame.columns:
            if frame[col].isna().any():
                i = frame.index[frame[col].isna().to_numpy()][0]
                raise ValidationError(f"missing {col} at {_row_label(i)}")
            frame[col] = frame[col].astype(str)
    ev = pd.to_numeric(frame["eval"], errors="coerce")
    if ev.isna().any() or (ev != np.round(ev)).any() or (ev < 1).any():
        i = frame.index[(ev.isna() | (ev != np.round(ev)) | (ev < 1)).to_numpy()][0]
        raise ValidationError(f"eval index must be an integer >= 1 at {_row_label(i)}")
    frame["eval"] = ev.astype(np.int64)

    for col in ("cumdose", "perc", "cumdos_site", "age", "volume", "day"):
        if col in frame.columns:
            frame[col] = pd.to_numeric(frame[col], errors="coerce").astype(float)

    if {"cumdose", "perc"} <= set(frame.columns):
        derived = frame["cumdose"] * frame["perc"] / 100.0
        if has_site_dose:
            given = frame["cumdos_site"]
            both = given.notna() & derived.notna()
            rel = (given[both] - derived[both]).abs() / np.maximum(derived[both].abs(), 1e-300)
            off = rel > _REL_TOL_SITE_DOSE
            off &= (given[both] - derived[both]).abs() > 1e-300
            if off.any():
                i = rel.index[off.to_numpy()][0]
                raise ValidationError(f"cumdos_site != cumdose*perc/100 at {_row_label(i)}")
            frame["cumdos_site"] = given.where(given.notna(), derived)
        else:
            frame["cumdos_site"] = derived
    if "perc" in frame.columns:
        p = frame["perc"].dropna()
        if ((p <= 0) | (p > 200)).any():
            i = p.index[((p <= 0) | (p > 200)).to_numpy()][0]
            raise ValidationError(f"perc outside (0, 200] at {_row_label(i)}")

    # factor levels: declared order wins, otherwise order of first appearance
    factor_levels = {}
    for col in CATEGORICAL_COLUMNS:
        if col not in frame.columns:
            continue
        seen = list(pd.unique(frame[col]))
        if col == "patient":
            factor_levels[col] = tuple(_patient_order(seen))
            continue
        declared = levels.get(col)
        if declared is not None:
            declared = tuple(str(v) for v in declared)
            unknown = [v for v in seen if v not in declared]
            if unknown:
                i = frame.index[(frame[col] == unknown[0]).to_numpy()][0]
                raise ValidationError(f"{col} {unknown[0]!r} at {_row_label(i)} is not a declared level")
            factor_levels[col] = declared
        else:
            factor_levels[col] = tuple(seen)
    for col, lv in levels.items():
        if col not in factor_levels and col in frame.columns:
            frame[col] = frame[col].astype(str)
            factor_levels[col] = tuple(str(v) for v in lv)

    dup = frame.duplicated(subset=["patient", "eval", "site"], keep=False)
    if dup.any():
        i = frame.index[dup.to_numpy()][0]
        r = frame.loc[i]
        raise ValidationError(
            f"duplicate observation for patient {r['patient']!r}, eval {r['eval']}, "
            f"site {r['site']!r} ({_row_label(i)})")

    pat_rank = {p: k for k, p in enumerate(factor_levels["patient"])}
    site_rank = {s: k for k, s in enumerate(factor_levels["site"])}
    order = np.lexsort((
        frame["site"].map(site_rank).to_numpy(),
        frame["eval"].to_numpy(),
        frame["patient"].map(pat_rank).to_numpy(),
    ))
    frame = frame.iloc[order].reset_index(drop=True)

    if "cumdose" in frame.columns:
        cd = frame[["patient", "eval", "cumdose"]].dropna()
        per_eval = cd.groupby(["patient", "eval"], sort=False)["cumdose"]
        if (per_eval.max() - per_eval.min()).abs().max() > 1e-9 * max(1.0, cd["cumdose"].abs().max()):
            bad = (per_eval.max() - per_eval.min()).abs().idxmax()
            raise ValidationError(f"cumdose differs across sites for patient {bad[0]!r}, eval {bad[1]}")
        first = per_eval.first().reset_index()
        drops = first.groupby("patient", sort=False)["cumdose"].diff() < 0
        if drops.any():
            bad = first.loc[drops.to_numpy(), "patient"].iloc[0]
            raise ValidationError(f"cumdose decreases over evaluations for patient {bad!r}")
    if "perc" in frame.columns:
        spread = frame.groupby(["patient", "site"], sort=False)["perc"].agg(lambda s: s.max() - s.min())
        if (spread > 0).any():
            warnings.warn(f"perc varies over time for {int((spread > 0).sum())} (patient, site) pairs",
                          stacklevel=3)

    canonical = [c for c in LOGICAL_COLUMNS if c in frame.columns]
    extras = [c for c in frame.columns if c not in LOGICAL_COLUMNS]
    frame = frame[canonical + extras]
    return Dataset(frame, n_categories, factor_levels)


def read_schema(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        schema = json.load(fh)
    if not isinstance(schema, dict):
        raise SchemaError("schema file must contain a JSON object")
    return schema


def load_csv(path, schema: Optional[Mapping] = None, n_categories: Optional[int] = None) -> Dataset:
    """Read a CSV file into a validated :class:`Dataset`.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : mapping, optional
        Maps logical column names (``patient``, ``eval``, ``site``, ``score``,
        ``cumdose``, ``perc``, ``cumdos_site``, ...) to the headers in the file.
        Unmapped logical names default to themselves. The reserved keys
        ``levels`` (factor name -> ordered levels) and ``n_categories`` are
        also honoured.
    n_categories : int, optional
        Number of ordinal categories R. Defaults to the schema entry, else
        ``max(score) + 1``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    schema = dict(schema or {})
    levels = schema.pop("levels", {}) or {}
    if n_categories is None:
        n_categories = schema.pop("n_categories", None)
    else:
        schema.pop("n_categories", None)
    raw = pd.read_csv(path, dtype=str, keep_default_na=True, encoding="utf-8")
    rename = {}
    for logical, header in schema.items():
        if header not in raw.columns:
            raise SchemaError(f"column {header!r} for {logical!r} not found in {path.name}")
        rename[header] = logical
    frame = raw.rename(columns=rename)
    for col in frame.columns:
        if col not in CATEGORICAL_COLUMNS and col in LOGICAL_COLUMNS:
            frame[col] = pd.to_numeric(frame[col], errors="coerce")
        elif col not in LOGICAL_COLUMNS and col not in levels:
            conv = pd.to_numeric(frame[col], errors="coerce")
            if conv.notna().sum() == frame[col].notna().sum():
                frame[col] = conv
    return _build(frame, n_categories, levels)


def write_csv(d: Dataset, path) -> None:
    """Write a dataset with logical column names (inverse of :func:`load_csv`)."""
    d.frame.to_csv(path, index=False, na_rep="", lineterminator="\n")


def collapse_binary(d: Dataset, r: int) -> Dataset:
    """Recode scores to 0 if ``score <= r`` and 1 otherwise."""
    if not 0 <= r <= d.n_categories - 2:
        raise ValueError(f"cut point r={r} outside 0..{d.n_categories - 2}")
    return d.with_scores((d.scores > r).astype(np.int64), 2)


def merge_top_categories(d: Dataset, from_: int) -> Dataset:
    """Map every score ``>= from_`` onto ``from_``; R becomes ``from_ + 1``."""
    if not 1 <= from_ <= d.n_categories - 1:
        raise ValueError(f"merge index {from_} outside 1..{d.n_categories - 1}")
    return d.with_scores(np.minimum(d.scores, from_), from_ + 1)
