"""Model matrices and quadratic penalties.

Smooth terms use a univariate thin plate regression spline (second-order,
cubic radial basis ``r**3 / 12`` plus a linear polynomial), truncated to its
``k`` leading eigenvectors. The sum-to-zero identifiability constraint is
absorbed by an orthogonal reparameterization, leaving ``k - 1`` columns whose
penalty has a one-dimensional null space (the centred linear trend).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import eigsh

from .data import Dataset
from .exceptions import SchemaError

DEFAULT_K = 10
MAX_KNOTS = 2000
_DENSE_EIGEN_LIMIT = 400


# --------------------------------------------------------------------------
# model specification
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothTerm:
    term: str
    k: int = DEFAULT_K
    by: Optional[str] = None
    by_basis: str = "level"  # "level": basis per factor level; "pooled": shared basis

    def __post_init__(self):
        if self.by_basis not in ("level", "pooled"):
            raise ValueError(f"by_basis must be 'level' or 'pooled', got {self.by_basis!r}")

    @property
    def label(self) -> str:
        return f"s({self.term})" if self.by is None else f"s({self.term},by={self.by})"


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model description (parametric, smooth and random-intercept terms)."""

    linear: tuple = ()
    smooth: tuple = ()
    random_intercept: Optional[str] = None
    intercept: bool = True
    reference: Mapping[str, str] = field(default_factory=dict)
    label: str = "model"

    @classmethod
    def from_dict(cls, obj: Mapping) -> "ModelSpec":
        known = {"label", "linear", "smooth", "random_intercept", "intercept", "reference"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model spec keys: {sorted(unknown)}")
        smooth = []
        for s in obj.get("smooth", []) or []:
            if isinstance(s, str):
                smooth.append(SmoothTerm(s))
            else:
                smooth.append(SmoothTerm(s["term"], int(s.get("k", DEFAULT_K)), s.get("by"),
                                         s.get("by_basis", "level")))
        ri = obj.get("random_intercept")
        if isinstance(ri, list):
            if len(ri) > 1:
                raise ValueError("only one random-intercept grouping is supported")
            ri = ri[0] if ri else None
        return cls(
            linear=tuple(obj.get("linear", []) or []),
            smooth=tuple(smooth),
            random_intercept=ri,
            intercept=bool(obj.get("intercept", True)),
            reference=dict(obj.get("reference", {}) or {}),
            label=str(obj.get("label", "model")),
        )

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "linear": list(self.linear),
            "smooth": [dict({"term": s.term, "k": s.k, "by": s.by},
                            **({"by_basis": s.by_basis} if s.by else {})) for s in self.smooth],
            "random_intercept": self.random_intercept,
            "intercept": self.intercept,
            "reference": dict(self.reference),
        }

    @classmethod
    def from_json(cls, path) -> "ModelSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def columns(self) -> list:
        cols = list(self.linear)
        for s in self.smooth:
            cols.append(s.term)
            if s.by:
                cols.append(s.by)
        if self.random_intercept:
            cols.append(self.random_intercept)
        return cols


# --------------------------------------------------------------------------
# thin plate regression spline
# --------------------------------------------------------------------------

def _radial(u, knots):
    return np.abs(u[:, None] - knots[None, :]) ** 3 / 12.0


def _sum_to_zero(v):
    """Orthonormal basis (k x (k-1)) of the complement of ``v``."""
    q, _ = np.linalg.qr(v.reshape(-1, 1), mode="complete")
    return q[:, 1:]


def _pseudo_logdet(S, tol=1e-10):
    ev = np.linalg.eigvalsh((S + S.T) / 2)
    top = max(ev.max(initial=0.0), 0.0)
    pos = ev[ev > tol * top] if top > 0 else ev[:0]
    return int(pos.size), float(np.sum(np.log(pos)))


@dataclass(frozen=True)
class SmoothBasis:
    """A constrained smooth basis block and its penalty.

    ``raw`` is the unconstrained training design (n x k); ``design`` equals
    ``raw @ constraint`` with rows outside ``by_level`` zeroed.
    """

    term: str
    k: int
    knots: np.ndarray
    center: float
    scale: float
    radial_transform: np.ndarray
    raw_penalty: np.ndarray
    constraint: np.ndarray
    penalty: np.ndarray
    design: Optional[np.ndarray] = None
    raw: Optional[np.ndarray] = None
    by: Optional[str] = None
    by_level: Optional[str] = None

    @property
    def label(self) -> str:
        if self.by is None:
            return f"s({self.term})"
        return f"s({self.term}):{self.by}[{self.by_level}]"

    @property
    def null_space_dim(self) -> int:
        return self.penalty.shape[0] - _pseudo_logdet(self.penalty)[0]

    def raw_matrix(self, x) -> np.ndarray:
        u = (np.asarray(x, dtype=float) - self.center) / self.scale
        ku = (self.knots - self.center) / self.scale
        return np.column_stack([_radial(u, ku) @ self.radial_transform, np.ones_like(u), u])

    def predict_matrix(self, x, by_values=None) -> np.ndarray:
        X = self.raw_matrix(x) @ self.constraint
        if self.by is not None:
            if by_values is None:
                raise ValueError(f"{self.label} needs values of {self.by!r}")
            X = X * (np.asarray(by_values) == self.by_level)[:, None]
        return X

    def to_dict(self) -> dict:
        return {
            "term": self.term, "k": self.k, "knots": self.knots, "center": self.center,
            "scale": self.scale, "radial_transform": self.radial_transform,
            "raw_penalty": self.raw_penalty, "constraint": self.constraint,
            "penalty": self.penalty, "by": self.by, "by_level": self.by_level,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SmoothBasis":
        arr = lambda key: np.asarray(d[key], dtype=float)
        return cls(d["term"], int(d["k"]), arr("knots"), float(d["center"]), float(d["scale"]),
                   arr("radial_transform").reshape(-1, int(d["k"]) - 2), arr("raw_penalty"),
                   arr("constraint"), arr("penalty"), by=d.get("by"), by_level=d.get("by_level"))


def tprs_basis(x, k: int = DEFAULT_K, knots=None, term: str = "x") -> SmoothBasis:
    """Thin plate regression spline basis with second-derivative penalty.

    Parameters
    ----------
    x : array_like
        Covariate values at the observations.
    k : int
        Basis dimension before the centring constraint (``k >= 3``).
    knots : array_like, optional
        Knot locations. Defaults to the unique values of ``x``, or 2000 of
        their quantiles when there are more.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in smooth covariate {term!r}")
    if k < 3:
        raise ValueError("basis dimension k must be >= 3")
    uniq = np.unique(x)
    if uniq.size < k:
        raise ValueError(
            f"{term!r} has only {uniq.size} distinct values; use k <= {uniq.size}")
    if knots is None:
        knots = uniq if uniq.size <= MAX_KNOTS else np.unique(
            np.quantile(uniq, np.linspace(0.0, 1.0, MAX_KNOTS)))
    knots = np.unique(np.asarray(knots, dtype=float))
    if knots.size < k:
        raise ValueError(f"need at least k={k} distinct knots, got {knots.size}")

    center = float(np.mean(knots))
    scale = float(np.std(knots)) or 1.0
    ku = (knots - center) / scale
    E = _radial(ku, ku)
    if knots.size <= _DENSE_EIGEN_LIMIT:
        ev, U = np.linalg.eigh(E)
    else:
        ev, U = eigsh(E, k=k, which="LM", v0=np.ones(knots.size))
    order = np.argsort(-np.abs(ev), kind="stable")[:k]
    ev, U = ev[order], U[:, order]
    flip = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(k)])
    U = U * flip

    # absorb T' delta = 0 (T = [1, u]) into the truncated radial coefficients
    T = np.column_stack([np.ones_like(ku), ku])
    Q, _ = np.linalg.qr(U.T @ T, mode="complete")
    Z = Q[:, 2:]
    W = U @ Z
    S_rad = Z.T @ (ev[:, None] * Z)
    S_rad = (S_rad + S_rad.T) / 2

    u = (x - center) / scale
    raw = np.column_stack([_radial(u, ku) @ W, np.ones_like(u), u])
    S_raw = np.zeros((k, k))
    S_raw[: k - 2, : k - 2] = S_rad
    # scale the penalty to the design so log smoothing parameters are O(1)
    S_raw *= np.abs(raw).sum(axis=1).max() ** 2 / np.abs(S_raw).sum(axis=0).max()

    C = _sum_to_zero(raw.sum(axis=0))
    S = C.T @ S_raw @ C
    return SmoothBasis(term, k, knots, center, scale, W, S_raw, C, (S + S.T) / 2,
                       design=raw @ C, raw=raw)


def by_factor(x, f, k: int = DEFAULT_K, term: str = "x", by: str = "by",
              levels: Optional[Sequence] = None, pooled: bool = False) -> list:
    """One separately centred, separately penalized smooth of ``x`` per level of ``f``.

    Columns are zero on rows of other levels. ``x`` may be the covariate
    vector or an already built :class:`SmoothBasis`.

    With ``pooled=True`` every level reuses the basis of the pooled
    covariate, re-centred on the level's rows. Otherwise (the default) each
    level gets a basis built from its own covariate values, which keeps the
    columns well conditioned for a level covering a narrow range.
    """
    base = x if isinstance(x, SmoothBasis) else None
    if base is not None:
        if base.raw is None:
            raise ValueError("by_factor needs a basis carrying its training design")
        k, term = base.k, base.term
        x = None
        pooled = True
    else:
        x = np.asarray(x, dtype=float)
    f = np.asarray(f).astype(str)
    levels = list(levels) if levels is not None else list(dict.fromkeys(f))
    if len(levels) < 2:
        raise ValueError(f"factor {by!r} needs at least 2 levels for a by-smooth")
    if pooled and base is None:
        base = tprs_basis(x, k=k, term=term)
    n = f.size
    out = []
    for lev in levels:
        mask = f == str(lev)
        if base is not None:
            vals = base.raw[mask, -1]
        else:
            vals = x[mask]
        if np.unique(vals).size < 3:
            raise ValueError(f"level {lev!r} of {by!r} has fewer than 3 distinct {term} values")
        if base is not None:
            raw = base.raw * mask[:, None]
            C = _sum_to_zero(raw.sum(axis=0))
            S = C.T @ base.raw_penalty @ C
            out.append(replace(base, constraint=C, penalty=(S + S.T) / 2, design=raw @ C,
                               raw=raw, by=by, by_level=str(lev)))
            continue
        try:
            b = tprs_basis(vals, k=k, term=term)
        except ValueError as exc:
            raise ValueError(f"level {lev!r} of {by!r}: {exc}") from None
        raw = np.zeros((n, k))
        raw[mask] = b.raw
        design = np.zeros((n, k - 1))
        design[mask] = b.design
        out.append(replace(b, design=design, raw=raw, by=by, by_level=str(lev)))
    return out


# --------------------------------------------------------------------------
# random intercept and assembled design
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomInterceptBlock:
    grouping: str
    levels: tuple

    @property
    def label(self) -> str:
        return f"ri({self.grouping})"

    @property
    def penalty(self) -> np.ndarray:
        return np.eye(len(self.levels))

    def design(self, values, strict: bool = True) -> np.ndarray:
        values = np.asarray(values).astype(str)
        index = {g: i for i, g in enumerate(self.levels)}
        Z = np.zeros((values.size, len(self.levels)))
        for row, v in enumerate(values):
            j = index.get(v)
            if j is None:
                if strict:
                    raise ValueError(f"unknown {self.grouping} {v!r}")
                continue
            Z[row, j] = 1.0
        return Z


@dataclass(frozen=True)
class ParametricTerm:
    name: str
    kind: str  # "intercept" | "numeric" | "factor"
    cols: slice
    levels: tuple = ()
    reference: Optional[str] = None


@dataclass(frozen=True)
class Penalty:
    label: str
    cols: slice
    matrix: np.ndarray
    rank: int
    logdet: float


@dataclass(frozen=True)
class DesignBlocks:
    spec: ModelSpec
    X: np.ndarray
    labels: tuple
    parametric: tuple
    smooths: tuple
    smooth_cols: tuple
    random: Optional[RandomInterceptBlock]
    random_cols: Optional[slice]
    penalties: tuple

    @property
    def p(self) -> int:
        return len(self.labels)

    @property
    def n_penalties(self) -> int:
        return len(self.penalties)

    @property
    def penalty_labels(self) -> list:
        return [pen.label for pen in self.penalties]

    @property
    def null_space_dim(self) -> int:
        return self.p - sum(pen.rank for pen in self.penalties)

    def penalty_matrix(self, rho) -> np.ndarray:
        S = np.zeros((self.p, self.p))
        for r, pen in zip(rho, self.penalties):
            S[pen.cols, pen.cols] += np.exp(r) * pen.matrix
        return S

    def logdet_penalty(self, rho) -> float:
        """log |S_lambda|_+ for the (non-overlapping) penalty blocks."""
        return float(sum(pen.rank * r + pen.logdet for r, pen in zip(rho, self.penalties)))

    def term_slices(self) -> dict:
        out = {t.name: t.cols for t in self.parametric}
        for b, cols in zip(self.smooths, self.smooth_cols):
            out[b.label] = cols
        if self.random is not None:
            out[self.random.label] = self.random_cols
        return out

    def design(self, d: Dataset, random: bool = True) -> np.ndarray:
        """Model matrix for (possibly new) data using the training construction.

        With ``random=False`` the random-intercept columns are zero (population
        prediction). With ``random=True`` every grouping level must be known.
        """
        X = np.zeros((len(d), self.p))
        for t in self.parametric:
            if t.kind == "intercept":
                X[:, t.cols] = 1.0
            elif t.kind == "numeric":
                X[:, t.cols] = _numeric(d, t.name)[:, None]
            else:
                vals = _column(d, t.name).astype(str)
                unseen = set(vals) - set(t.levels)
                if unseen:
                    raise ValueError(f"unseen level {sorted(unseen)[0]!r} of factor {t.name!r}")
                others = [lv for lv in t.levels if lv != t.reference]
                X[:, t.cols] = (vals[:, None] == np.asarray(others)[None, :]).astype(float)
        for b, cols in zip(self.smooths, self.smooth_cols):
            by_vals = None
            if b.by is not None:
                by_vals = _column(d, b.by).astype(str)
                known = set(s.by_level for s in self.smooths if s.by == b.by)
                unseen = set(by_vals) - known
                if unseen:
                    raise ValueError(f"unseen level {sorted(unseen)[0]!r} of factor {b.by!r}")
            X[:, cols] = b.predict_matrix(_numeric(d, b.term), by_vals)
        if self.random is not None and random:
            X[:, self.random_cols] = self.random.design(_column(d, self.random.grouping))
        return X

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "labels": list(self.labels),
            "parametric": [
                {"name": t.name, "kind": t.kind, "start": t.cols.start, "stop": t.cols.stop,
                 "levels": list(t.levels), "reference": t.reference}
                for t in self.parametric
            ],
            "smooths": [dict(b.to_dict(), start=c.start, stop=c.stop)
                        for b, c in zip(self.smooths, self.smooth_cols)],
            "random": None if self.random is None else {
                "grouping": self.random.grouping, "levels": list(self.random.levels),
                "start": self.random_cols.start, "stop": self.random_cols.stop},
        }

    @classmethod
    def from_dict(cls, obj: Mapping, X: Optional[np.ndarray] = None) -> "DesignBlocks":
        spec = ModelSpec.from_dict(obj["spec"])
        parametric = tuple(
            ParametricTerm(t["name"], t["kind"], slice(t["start"], t["stop"]),
                           tuple(t["levels"]), t["reference"]) for t in obj["parametric"])
        smooths = tuple(SmoothBasis.from_dict(s) for s in obj["smooths"])
        smooth_cols = tuple(slice(s["start"], s["stop"]) for s in obj["smooths"])
        random = random_cols = None
        if obj.get("random"):
            r = obj["random"]
            random = RandomInterceptBlock(r["grouping"], tuple(r["levels"]))
            random_cols = slice(r["start"], r["stop"])
        labels = tuple(obj["labels"])
        penalties = _penalties(smooths, smooth_cols, random, random_cols)
        if X is None:
            X = np.zeros((0, len(labels)))
        return cls(spec, X, labels, parametric, smooths, smooth_cols, random, random_cols, penalties)


def _column(d: Dataset, name: str) -> np.ndarray:
    if name not in d.frame.columns:
        raise SchemaError(f"unknown column {name!r}")
    return d.frame[name].to_numpy()


def _numeric(d: Dataset, name: str) -> np.ndarray:
    v = _column(d, name)
    try:
        v = v.astype(float)
    except (TypeError, ValueError):
        raise ValueError(f"column {name!r} is not numeric") from None
    if not np.all(np.isfinite(v)):
        raise ValueError(f"missing or non-finite values in column {name!r}")
    return v


def _is_factor(d: Dataset, name: str) -> bool:
    return d.is_categorical(name) or d.frame[name].dtype == object


def _penalties(smooths, smooth_cols, random, random_cols) -> tuple:
    pens = []
    for b, cols in zip(smooths, smooth_cols):
        rank, logdet = _pseudo_logdet(b.penalty)
        pens.append(Penalty(b.label, cols, b.penalty, rank, logdet))
    if random is not None:
        G = len(random.levels)
        pens.append(Penalty(random.label, random_cols, np.eye(G), G, 0.0))
    return tuple(pens)


def assemble(spec: ModelSpec, d: Dataset) -> DesignBlocks:
    """Build the full model matrix and penalty layout for ``spec`` on ``d``.

    Column order: intercept, parametric terms in declaration order (factors
    dummy-coded against their reference level), smooth blocks, and the
    random-intercept block last.
    """
    for col in spec.columns():
        if col not in d.frame.columns:
            raise SchemaError(f"unknown column {col!r} in model spec {spec.label!r}")

    blocks, labels, parametric = [], [], []
    pos = 0
    if spec.intercept:
        blocks.append(np.ones((len(d), 1)))
        labels.append("(Intercept)")
        parametric.append(ParametricTerm("(Intercept)", "intercept", slice(0, 1)))
        pos = 1
    for name in spec.linear:
        if _is_factor(d, name):
            vals = _column(d, name).astype(str)
            declared = d.factor_levels.get(name) or tuple(dict.fromkeys(vals))
            present = set(vals)
            lv = tuple(v for v in declared if v in present)
            if len(lv) < 2:
                raise ValueError(f"factor {name!r} has only {len(lv)} level(s) in the data")
            ref = str(spec.reference.get(name, lv[0]))
            if ref not in lv:
                raise ValueError(f"reference level {ref!r} of {name!r} not present in the data")
            others = [v for v in lv if v != ref]
            blocks.append((vals[:, None] == np.asarray(others)[None, :]).astype(float))
            labels.extend(f"{name}[{v}]" for v in others)
            parametric.append(ParametricTerm(name, "factor", slice(pos, pos + len(others)), lv, ref))
            pos += len(others)
        else:
            blocks.append(_numeric(d, name)[:, None])
            labels.append(name)
            parametric.append(ParametricTerm(name, "numeric", slice(pos, pos + 1)))
            pos += 1

    smooths, smooth_cols = [], []
    for st in spec.smooth:
        x = _numeric(d, st.term)
        if st.by is None:
            parts = [tprs_basis(x, k=st.k, term=st.term)]
        else:
            vals = _column(d, st.by).astype(str)
            declared = d.factor_levels.get(st.by) or tuple(dict.fromkeys(vals))
            present = set(vals)
            parts = by_factor(x, vals, k=st.k, term=st.term, by=st.by,
                              levels=[v for v in declared if v in present],
                              pooled=st.by_basis == "pooled")
        for b in parts:
            m = b.design.shape[1]
            blocks.append(b.design)
            labels.extend(f"{b.label}.{j + 1}" for j in range(m))
            smooths.append(b)
            smooth_cols.append(slice(pos, pos + m))
            pos += m

    random = random_cols = None
    if spec.random_intercept:
        g = spec.random_intercept
        vals = _column(d, g).astype(str)
        declared = d.factor_levels.get(g) or tuple(dict.fromkeys(vals))
        present = set(vals)
        random = RandomInterceptBlock(g, tuple(v for v in declared if v in present))
        Z = random.design(vals)
        blocks.append(Z)
        labels.extend(f"ri({g})[{v}]" for v in random.levels)
        random_cols = slice(pos, pos + Z.shape[1])
        pos += Z.shape[1]

    X = np.hstack(blocks) if blocks else np.zeros((len(d), 0))
    if X.shape[1] == 0:
        raise ValueError("model has no terms")
    penalties = _penalties(smooths, smooth_cols, random, random_cols)
    return DesignBlocks(spec, X, tuple(labels), tuple(parametric), tuple(smooths),
                        tuple(smooth_cols), random, random_cols, penalties)
