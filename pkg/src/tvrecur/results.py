"""Fit results, KKT reports and estimation errors shared by all estimators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EstimationError(RuntimeError):
    """Base class for failures that make an estimate unavailable."""


class UnidentifiableStratumError(EstimationError):
    def __init__(self, strata, reason: str = "singular or empty"):
        self.strata = list(strata)
        super().__init__(f"strata {[s + 1 for s in self.strata]} unidentifiable ({reason})")


class MonotoneLikelihoodError(EstimationError):
    def __init__(self, stratum, where: str | None = None):
        self.stratum = stratum
        if where is None:
            where = "pooled model" if stratum is None else f"stratum {stratum + 1}"
        super().__init__(f"partial likelihood has no finite maximizer in {where} (|beta| > 1e3)")


class ConvergenceError(EstimationError):
    def __init__(self, message: str, residual: float | None = None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (residual {residual:.3e})"
        super().__init__(message)


@dataclass
class KKTReport:
    penalized: float
    unpenalized: float
    tol_penalized: float
    tol_unpenalized: float

    @property
    def ok(self) -> bool:
        return self.penalized <= self.tol_penalized and self.unpenalized <= self.tol_unpenalized


@dataclass
class FitResult:
    """Estimated coefficient matrix (p x B, column s = beta(s)) with diagnostics."""

    kind: str
    model: str
    beta: np.ndarray
    lam: float = 0.0
    n: int = 0
    converged: bool = True
    n_iter: int = 0
    objective: float = float("nan")
    kkt: KKTReport | None = None
    weights: np.ndarray | None = None
    history: list = field(default_factory=list, repr=False)
    warnings: list = field(default_factory=list)

    @property
    def lam_over_n(self) -> float:
        return self.lam / self.n if self.n else float("nan")
