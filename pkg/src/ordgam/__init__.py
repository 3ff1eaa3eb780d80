"""Penalized proportional-odds additive mixed models for longitudinal ordinal scores."""
from .basis import ModelSpec, SmoothTerm, assemble, tprs_basis
from .bed import BedParams, BedSchedule, bed_at, bed_series
from .data import Dataset, collapse_binary, load_csv, merge_top_categories, write_csv
from .exceptions import (ConvergenceError, OrdgamError, SchemaError, SeparationWarning,
                         SingularHessianError, ValidationError)
from .fit import FitConfig, FitResult, fit, pirls, predict, smooth_grid
from .likelihood import CutPoints, category_probs, loglik
from .selection import aic_bic, compare, cv_rmspe, odds_ratios, po_diagnostic
from .simulate import SimConfig, paper_like_config, simulate

__version__ = "0.1.0"
