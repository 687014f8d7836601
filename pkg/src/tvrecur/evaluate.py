"""Accuracy metrics, the Monte Carlo study driver and the real-data analysis path."""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np

from .additive import fit_constant_additive, fit_unconstrained_additive
from .dataset import Dataset
from .multiplicative import fit_constant_mult, fit_unconstrained_mult
from .penalty import (
    PenaltyConfig,
    detect_nonconstant,
    fit_tv,
    prepare,
    reweighted_two_step,
    select_lambda,
)
from .results import EstimationError, FitResult
from .simulate import SimConfig, simulate_dataset

ESTIMATORS = ("unconstrained", "constant", "tv", "tv2")


def mse(estimates, beta0) -> float:
    """Mean over replications of ||beta_hat - beta0||^2 / ||beta0||^2 (Frobenius)."""
    beta0 = np.asarray(beta0, dtype=float)
    denom = float(np.sum(beta0 ** 2))
    if denom == 0:
        raise ValueError("rescaled error is undefined for beta0 = 0")
    estimates = list(estimates)
    if not estimates:
        return math.nan
    return float(np.mean([np.sum((np.asarray(b) - beta0) ** 2) for b in estimates]) / denom)


def fp_fn(estimate, beta0, fuse_tol: float = 1e-8) -> tuple[int, int]:
    """False positives and negatives of the non-constancy call.

    The estimate is called non-constant when its TV exceeds ``fuse_tol``; the
    truth is classified exactly (TV > 0).
    """
    est = detect_nonconstant(estimate, fuse_tol)
    truth = detect_nonconstant(beta0, 0.0)
    return int(np.sum(est & ~truth)), int(np.sum(~est & truth))


@dataclass
class LambdaRule:
    """How lambda_n is chosen: a fixed value, per-fit CV, or c*sqrt(n).

    ``mode="sqrt"`` with ``c=None`` picks ``c`` from a pilot cross-validation
    on one extra replication of the design.
    """

    mode: str = "sqrt"
    value: float | None = None
    folds: int = 5
    n_grid: int = 30

    def __post_init__(self):
        if self.mode not in ("fixed", "cv", "sqrt"):
            raise ValueError(f"unknown lambda rule {self.mode!r}")

    @classmethod
    def parse(cls, text: str) -> "LambdaRule":
        text = str(text).strip()
        if text in ("auto", "cv"):
            return cls("cv")
        if text.startswith("sqrt"):
            _, _, c = text.partition(":")
            return cls("sqrt", float(c) if c else None)
        return cls("fixed", float(text))


def choose_lambda(model: str, data: Dataset, rule: LambdaRule, seed: int = 0) -> float:
    if rule.mode == "fixed":
        return float(rule.value)
    if rule.mode == "sqrt" and rule.value is not None:
        return float(rule.value) * math.sqrt(data.n)
    return select_lambda(model, data, folds=rule.folds, seed=seed, n_grid=rule.n_grid).lam


def fit_estimators(model: str, data: Dataset, estimators, lam: float | None = None,
                   rule: LambdaRule | None = None, seed: int = 0, epsilon: float | None = None) -> dict:
    """Fit each requested estimator; failures are returned as exceptions, not raised."""
    target = prepare(model, data)
    out: dict = {}
    need_tv = any(e in ("tv", "tv2") for e in estimators)
    if need_tv and lam is None:
        lam = choose_lambda(model, data, rule or LambdaRule("cv"), seed)
    for est in estimators:
        try:
            if est == "unconstrained":
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    fit = (fit_unconstrained_mult(target) if model == "mult"
                           else fit_unconstrained_additive(target))
            elif est == "constant":
                fit = fit_constant_mult(target) if model == "mult" else fit_constant_additive(target)
            elif est == "tv":
                fit = out.get("tv") or fit_tv(model, target, PenaltyConfig(lam))
            elif est == "tv2":
                first = out.get("tv")
                if first is None or isinstance(first, Exception):
                    first = fit_tv(model, target, PenaltyConfig(lam))
                fit = reweighted_two_step(first, lambda cfg, warm: fit_tv(model, target, cfg, warm), epsilon)
            else:
                raise ValueError(f"unknown estimator {est!r}")
        except (EstimationError, np.linalg.LinAlgError) as exc:
            fit = exc
        out[est] = fit
    return out


@dataclass
class EstimatorSummary:
    mse: float
    mean_fp: float
    mean_fn: float
    failures: int
    M: int


@dataclass
class StudyResult:
    config: SimConfig
    lam: float | None
    summary: dict
    records: list = field(repr=False, default_factory=list)

    def rows(self):
        for est, s in self.summary.items():
            yield {"estimator": est, "n": self.config.n, "mse": s.mse, "mean_fp": s.mean_fp,
                   "mean_fn": s.mean_fn, "failures": s.failures, "M": s.M}


def replication_seed(master: int, m: int) -> int:
    return int(np.random.SeedSequence([master, m]).generate_state(1)[0])


PILOT_INDEX = 2 ** 31 - 1


def summarize(records, beta0, estimators, M, fuse_tol=1e-8) -> dict:
    summary = {}
    for est in estimators:
        ok = [r[est] for r in records if r.get(est) is not None]
        fails = M - len(ok)
        if ok:
            counts = np.array([fp_fn(b, beta0, fuse_tol) for b in ok])
            summary[est] = EstimatorSummary(mse(ok, beta0), float(counts[:, 0].mean()),
                                            float(counts[:, 1].mean()), fails, M)
        else:
            summary[est] = EstimatorSummary(math.nan, math.nan, math.nan, fails, M)
    return summary


def _replicate(cfg, estimators, fitted, lam, rule, m):
    seed = replication_seed(cfg.seed, m)
    data = simulate_dataset(replace(cfg, seed=seed))
    fits = fit_estimators(cfg.model, data, fitted, lam=lam, rule=rule, seed=seed)
    rec = {"m": m, "seed": seed}
    for est in estimators:
        if est == "oracle":
            rec[est] = cfg.beta0.copy()
        else:
            f = fits[est]
            rec[est] = None if isinstance(f, Exception) else f.beta
    return rec


def run_study(cfg: SimConfig, estimators=ESTIMATORS, M: int = 200, lambda_rule: LambdaRule | None = None,
              fuse_tol: float = 1e-8, progress=None, workers: int = 1) -> StudyResult:
    """Monte Carlo study: simulate M seeded replications and score each estimator.

    An estimator failing on a replication is excluded from that estimator's
    averages and counted in ``failures``.  The special estimator ``"oracle"``
    returns the truth and serves as a harness check.  Replication ``m`` is
    seeded from ``(cfg.seed, m)`` alone, so ``workers > 1`` gives the same
    result as a serial run.
    """
    rule = lambda_rule or LambdaRule()
    beta0 = cfg.beta0
    fitted = [e for e in estimators if e != "oracle"]
    lam = None
    if any(e in ("tv", "tv2") for e in fitted):
        if rule.mode == "sqrt" and rule.value is None:
            pilot = simulate_dataset(replace(cfg, seed=replication_seed(cfg.seed, PILOT_INDEX)))
            lam = select_lambda(cfg.model, pilot, folds=rule.folds, seed=cfg.seed, n_grid=rule.n_grid).lam
        elif rule.mode == "sqrt":
            lam = rule.value * math.sqrt(cfg.n)
        elif rule.mode == "fixed":
            lam = float(rule.value)
    job = partial(_replicate, cfg, tuple(estimators), tuple(fitted), lam, rule)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(job, range(M)))
    else:
        records = [job(m) for m in range(M)]
    if progress:
        for rec in records:
            progress(rec["m"], rec)
    return StudyResult(cfg, lam, summarize(records, beta0, estimators, M, fuse_tol), records)


def write_study_csv(results, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "n", "estimator", "mse", "mean_fp", "mean_fn", "failures", "M", "lambda"])
        for res in results:
            for row in res.rows():
                w.writerow([res.config.model, row["n"], row["estimator"], repr(row["mse"]),
                            repr(row["mean_fp"]), repr(row["mean_fn"]), row["failures"], row["M"],
                            "" if res.lam is None else repr(res.lam)])


# ---------------------------------------------------------------------------
# real-data analysis


@dataclass
class AnalysisReport:
    model: str
    lam: float | None
    rows: list
    fits: dict
    errors: dict

    def diagnostics(self) -> dict:
        diag = {"model": self.model, "lambda": self.lam, "errors": self.errors}
        if self.lam is not None and self.fits:
            n = next(iter(self.fits.values())).n
            diag["lambda_over_n"] = self.lam / n if n else None
        for est, f in self.fits.items():
            diag[est] = {"n_iter": f.n_iter, "objective": f.objective,
                         "kkt_ok": None if f.kkt is None else f.kkt.ok, "warnings": f.warnings}
        return diag


def analyze(data: Dataset, model: str, estimators=("constant", "unconstrained", "tv2"),
            lambda_rule: LambdaRule | None = None, seed: int = 0) -> AnalysisReport:
    rule = lambda_rule or LambdaRule("cv")
    lam = None
    if any(e in ("tv", "tv2") for e in estimators):
        lam = choose_lambda(model, data, rule, seed)
    fits = fit_estimators(model, data, estimators, lam=lam, seed=seed)
    rows, ok, errors = [], {}, {}
    for est in estimators:
        f = fits[est]
        if isinstance(f, Exception):
            errors[est] = f"{type(f).__name__}: {f}"
            continue
        ok[est] = f
        for j, name in enumerate(data.covariate_names):
            for s in range(data.B):
                rows.append((name, s + 1, est, float(f.beta[j, s])))
    return AnalysisReport(model, lam, rows, ok, errors)


def write_estimates_csv(report: AnalysisReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", "stratum", "estimator", "estimate"])
        for name, s, est, v in report.rows:
            w.writerow([name, s, est, repr(v)])
