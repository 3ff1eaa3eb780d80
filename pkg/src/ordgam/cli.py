"""Command-line interface: ``ordgam <command> [options]``.

Exit codes: 0 success, 1 invalid input, 2 convergence failure (diagnostics
are written to ``<out>/convergence.json``). Set ``ORDGAM_LOG`` to a logging
level name (``DEBUG``, ``INFO``, ...) for more output.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, _jsonio
from .basis import ModelSpec
from .bed import BedParams, bed_series, read_schedule
from .data import load_csv, merge_top_categories, read_schema, write_csv
from .exceptions import ConvergenceError, OrdgamError
from .fit import FitConfig, FitResult, fit, predict, smooth_grid
from .selection import (aic_bic, compare, cv_rmspe, factor_terms, odds_ratios, po_diagnostic,
                        residual_frame)
from .simulate import SimConfig, paper_like_config, simulate

log = logging.getLogger("ordgam")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _csv(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


class _Run:
    """Collects inputs and writes the manifest for one command."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = {}
        self.t0 = time.perf_counter()

    def input(self, path):
        if path is not None:
            self.inputs[str(path)] = _sha256(path)
        return path

    def manifest(self, directory) -> None:
        cfg = {k: v for k, v in sorted(vars(self.args).items())
               if k not in ("func", "out", "threads")}
        cfg_hash = hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()
        _jsonio.dump({
            "command": self.args.command,
            "argv": self.argv,
            "config_hash": cfg_hash,
            "inputs": self.inputs,
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
            "numpy_version": np.__version__,
            "wall_time_seconds": time.perf_counter() - self.t0,
        }, Path(directory) / "manifest.json")


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(run: _Run):
    a = run.args
    schema = read_schema(run.input(a.schema)) if a.schema else None
    d = load_csv(run.input(a.data), schema)
    if getattr(a, "merge_top", None) is not None:
        d = merge_top_categories(d, a.merge_top)
    return d


def _load_spec(run: _Run, path) -> ModelSpec:
    return ModelSpec.from_json(run.input(path))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _write_fit_outputs(m: FitResult, d, out: Path, seed, covariance: bool) -> None:
    m.write_json(out / "fit.json", covariance=covariance)
    tables = [odds_ratios(m, t).to_frame() for t in factor_terms(m)]
    cols = ["term", "level", "log_or", "se", "odds_ratio", "ci_low", "ci_high"]
    _csv(pd.concat(tables, ignore_index=True) if tables else pd.DataFrame(columns=cols),
         out / "or_table.csv")
    _csv(pd.DataFrame(smooth_grid(m), columns=["term", "by_level", "x", "fit", "se"]),
         out / "smooth_grid.csv")
    _csv(residual_frame(m, d, np.random.default_rng(seed)), out / "residuals.csv")


def cmd_fit(run: _Run) -> None:
    a = run.args
    d = _load_data(run)
    spec = _load_spec(run, a.spec)
    out = _outdir(a.out)
    m = fit(spec, d, FitConfig())
    _write_fit_outputs(m, d, out, a.seed, a.covariance)
    aic, bic = aic_bic(m)
    print(f"{spec.label}: loglik={m.loglik:.4f} edf={m.edf_total:.3f} AIC={aic:.3f} BIC={bic:.3f}")


def cmd_predict(run: _Run) -> None:
    a = run.args
    with open(run.input(a.fit), encoding="utf-8") as fh:
        m = FitResult.from_dict(json.load(fh))
    d = _load_data(run)
    mode = "marginal" if a.marginal_ghq else a.mode
    pred = predict(m, d, mode=mode, ghq_points=a.marginal_ghq or 20)
    out = _outdir(a.out)
    df = d.frame[["patient", "eval", "site"]].copy()
    df["eta"] = pred.eta
    for r in range(pred.probs.shape[1]):
        df[f"p{r}"] = pred.probs[:, r]
    _csv(df, out / "predictions.csv")


def cmd_cv(run: _Run) -> None:
    a = run.args
    d = _load_data(run)
    spec = _load_spec(run, a.spec)
    out = _outdir(a.out)
    res = cv_rmspe(spec, d, a.folds, a.seed, threads=a.threads, ghq_points=a.marginal_ghq)
    row = {"label": spec.label, "N": res.n, "folds": a.folds,
           "seed": json.dumps(res.seed)}
    row.update({f"RPE{r}": v for r, v in enumerate(res.rpe)})
    _csv(pd.DataFrame([row]), out / "cv.csv")
    print(" ".join(f"RPE{r}={v:.4f}" for r, v in enumerate(res.rpe)))


def cmd_compare(run: _Run) -> None:
    a = run.args
    d = _load_data(run)
    specs = [_load_spec(run, p) for p in a.specs]
    out = _outdir(a.out)
    report = compare(specs, d, a.folds, a.seed, threads=a.threads,
                     ghq_points=a.marginal_ghq, cv=not a.no_cv)
    report.to_csv(out / "comparison.csv")
    print(report.to_frame().to_string(index=False))


def cmd_diagnose(run: _Run) -> None:
    a = run.args
    d = _load_data(run)
    spec = _load_spec(run, a.spec)
    out = _outdir(a.out)
    m = fit(spec, d, FitConfig())
    _csv(residual_frame(m, d, np.random.default_rng(a.seed)), out / "residuals.csv")
    if d.n_categories >= 3:
        _csv(po_diagnostic(spec, d, po_fit=m), out / "po_diagnostic.csv")
    else:
        log.warning("two categories only: proportional-odds diagnostic skipped")


def cmd_simulate(run: _Run) -> None:
    a = run.args
    cfg = SimConfig.from_json(run.input(a.config)) if a.config else paper_like_config()
    if a.seed is not None:
        cfg = SimConfig.from_dict(dict(cfg.to_dict(), seed=a.seed))
    d, truth = simulate(cfg)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(d, out)
    if a.truth:
        Path(a.truth).parent.mkdir(parents=True, exist_ok=True)
        _jsonio.dump(truth, a.truth)
    run.manifest(out.parent)


def cmd_bed(run: _Run) -> None:
    a = run.args
    sched = read_schedule(run.input(a.schedule))
    params = BedParams(a.alpha_beta, a.alpha, a.onset, a.doubling)
    series = bed_series(sched, params)
    df = pd.DataFrame({
        "fraction": np.arange(1, len(series) + 1),
        "day": list(sched.days),
        "cumdose": [c for c, _ in series],
        "bed": [b for _, b in series],
    })
    if a.out:
        out = Path(a.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _csv(df, out)
        run.manifest(out.parent)
    else:
        df.to_csv(sys.stdout, index=False, lineterminator="\n", float_format="%.17g")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ordgam", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ordgam {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(sp, spec=True):
        sp.add_argument("--data", required=True, help="observation CSV")
        sp.add_argument("--schema", help="JSON mapping logical column names to CSV headers")
        sp.add_argument("--merge-top", type=int, metavar="R",
                        help="merge scores >= R into category R before fitting")
        if spec:
            sp.add_argument("--spec", required=True, help="model spec JSON")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("fit", help="fit one model")
    data_args(sp)
    sp.add_argument("--covariance", action="store_true", help="include the covariance in fit.json")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="category probabilities from a saved fit")
    sp.add_argument("--fit", required=True, help="fit.json written by 'fit'")
    data_args(sp, spec=False)
    sp.add_argument("--mode", choices=["population", "conditional", "marginal"], default="population")
    sp.add_argument("--marginal-ghq", type=int, metavar="POINTS",
                    help="integrate the random intercept with this many Gauss-Hermite nodes")
    sp.set_defaults(func=cmd_predict)

    for name, func, helptext in (("cv", cmd_cv, "patient-grouped cross-validated RMSPE"),
                                 ("compare", cmd_compare, "AIC, BIC and CV RMSPE for several specs")):
        sp = sub.add_parser(name, help=helptext)
        data_args(sp, spec=(name == "cv"))
        if name == "compare":
            sp.add_argument("--specs", nargs="+", required=True, help="model spec JSON files")
            sp.add_argument("--no-cv", action="store_true", help="skip cross-validation")
        sp.add_argument("--folds", type=int, default=15)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--marginal-ghq", type=int, metavar="POINTS",
                        help="marginal instead of population held-out predictions")
        sp.set_defaults(func=func)

    sp = sub.add_parser("diagnose", help="residuals and proportional-odds diagnostic")
    data_args(sp)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("simulate", help="simulate a dataset")
    sp.add_argument("--config", help="SimConfig JSON (default: the built-in 75-patient design)")
    sp.add_argument("--out", required=True, help="output CSV")
    sp.add_argument("--truth", help="output JSON with the true random intercepts and eta")
    sp.add_argument("--seed", type=int, help="override the config seed")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("bed", help="BED after each fraction of a schedule")
    sp.add_argument("--schedule", required=True, help="CSV with day,dose rows")
    sp.add_argument("--alpha-beta", type=float, default=BedParams.alpha_beta)
    sp.add_argument("--alpha", type=float, default=BedParams.alpha)
    sp.add_argument("--onset", type=float, default=BedParams.onset_days)
    sp.add_argument("--doubling", type=float, default=BedParams.doubling_time)
    sp.add_argument("--out", help="output CSV (default: stdout)")
    sp.set_defaults(func=cmd_bed)
    return p


def _setup_logging():
    level = os.environ.get("ORDGAM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    _setup_logging()
    args = build_parser().parse_args(argv)
    run = _Run(args, argv)
    directory_output = args.command in ("fit", "predict", "cv", "compare", "diagnose")
    try:
        args.func(run)
    except ConvergenceError as exc:
        print(f"ordgam: convergence failure: {exc}", file=sys.stderr)
        if directory_output:
            out = _outdir(args.out)
            _jsonio.dump({"message": str(exc), "iterate": exc.iterate, "trace": exc.trace},
                         out / "convergence.json")
            run.manifest(out)
        return 2
    except (OrdgamError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ordgam: error: {msg}", file=sys.stderr)
        return 1
    if directory_output:
        run.manifest(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
