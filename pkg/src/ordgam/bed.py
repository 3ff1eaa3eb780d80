"""Biologically effective dose under the linear-quadratic model.

BED after fraction ``k`` of a schedule is::

    sum_j d_j * (1 + d_j / (alpha/beta)) - max(0, T - T_k) * ln 2 / (alpha * T_p)

where ``T`` is the elapsed overall treatment time in days, counted
inclusively (``T = day_k - day_0 + 1``), ``T_k`` the onset of accelerated
repopulation and ``T_p`` the doubling time during repopulation.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BedParams:
    """LQ parameters; defaults are acute-mucosa values."""

    alpha_beta: float = 10.0
    alpha: float = 0.3
    onset_days: float = 7.0
    doubling_time: float = 2.5

    def __post_init__(self):
        if self.alpha_beta <= 0 or self.alpha <= 0 or self.doubling_time <= 0:
            raise ValueError("alpha_beta, alpha and doubling_time must be > 0")
        if self.onset_days < 0:
            raise ValueError("onset_days must be >= 0")


@dataclass(frozen=True)
class BedSchedule:
    """Ordered fractions as parallel ``days`` / ``doses`` tuples."""

    days: tuple
    doses: tuple

    def __post_init__(self):
        if len(self.days) != len(self.doses):
            raise ValueError("days and doses differ in length")
        if any(d <= 0 for d in self.doses):
            raise ValueError("fraction doses must be positive")
        if any(b < a for a, b in zip(self.days, self.days[1:])):
            raise ValueError("fraction days must be non-decreasing")
        if any(d < 0 for d in self.days):
            raise ValueError("fraction days must be >= 0")

    @classmethod
    def from_pairs(cls, pairs: Sequence) -> "BedSchedule":
        pairs = list(pairs)
        return cls(tuple(int(p[0]) for p in pairs), tuple(float(p[1]) for p in pairs))

    @classmethod
    def standard(cls, n_fractions: int, dose: float = 2.0, start_day: int = 0,
                 breaks: Sequence = ()) -> "BedSchedule":
        """Five fractions per week (weekends off), optional ``(after_fraction, days)`` breaks."""
        extra = {int(k): int(v) for k, v in breaks}
        days, day, shift = [], start_day, 0
        while len(days) < n_fractions:
            if (day - start_day) % 7 < 5:
                days.append(day + shift)
                shift += extra.get(len(days), 0)
            day += 1
        return cls(tuple(days), (float(dose),) * n_fractions)

    def __len__(self):
        return len(self.days)


def _check(s: BedSchedule):
    if len(s) == 0:
        raise ValueError("empty schedule")


def repopulation_loss(elapsed: float, p: BedParams) -> float:
    return max(0.0, elapsed - p.onset_days) * math.log(2.0) / (p.alpha * p.doubling_time)


def bed_at(s: BedSchedule, upto: int, p: BedParams = BedParams()) -> float:
    """BED (Gy) after the first ``upto`` fractions (1-based)."""
    _check(s)
    if not 1 <= upto <= len(s):
        raise ValueError(f"upto={upto} outside 1..{len(s)}")
    d = np.asarray(s.doses[:upto], dtype=float)
    physical = float(np.sum(d * (1.0 + d / p.alpha_beta)))
    elapsed = s.days[upto - 1] - s.days[0] + 1
    bed = physical - repopulation_loss(elapsed, p)
    if bed < 0:
        warnings.warn(f"negative BED {bed:.4g} Gy: repopulation dominates", stacklevel=2)
    return bed


def bed_series(s: BedSchedule, p: BedParams = BedParams()) -> list:
    """``(cumdose, bed)`` after every fraction."""
    _check(s)
    d = np.asarray(s.doses, dtype=float)
    cumdose = np.cumsum(d)
    physical = np.cumsum(d * (1.0 + d / p.alpha_beta))
    elapsed = np.asarray(s.days, dtype=float) - s.days[0] + 1
    loss = np.maximum(0.0, elapsed - p.onset_days) * math.log(2.0) / (p.alpha * p.doubling_time)
    bed = physical - loss
    if np.any(bed < 0):
        warnings.warn("negative BED values: repopulation dominates", stacklevel=2)
    return [(float(c), float(b)) for c, b in zip(cumdose, bed)]


def read_schedule(path) -> BedSchedule:
    """Read a ``day,dose`` CSV (header optional)."""
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                pairs.append((int(float(row[0])), float(row[1])))
            except ValueError:
                if pairs:
                    raise
    return BedSchedule.from_pairs(pairs)
