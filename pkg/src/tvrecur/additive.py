"""Partial least-squares estimation in the event-stratified additive rate model.

With time-fixed covariates the stratum mean covariate ``Xbar^s(t)`` only
changes at interval end points, so every integral is an exact finite sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, RiskRows, StratifiedDesign
from .results import EstimationError, FitResult, UnidentifiableStratumError
from .simulate import cumulative_hazard

RCOND_MIN = 1e-12


@dataclass(frozen=True)
class AdditiveSystem:
    H: np.ndarray  # (B, p, p)
    h: np.ndarray  # (B, p)
    n: int
    empty: np.ndarray  # (B,) bool, stratum has zero at-risk measure

    @property
    def B(self) -> int:
        return self.H.shape[0]

    @property
    def p(self) -> int:
        return self.H.shape[1]

    def rcond(self, s: int) -> float:
        return _rcond(self.H[s])


def _rcond(A: np.ndarray) -> float:
    w = np.linalg.eigvalsh(A)
    if w[-1] <= 0:
        return 0.0
    return max(w[0], 0.0) / w[-1]


def _piecewise_moments(rows: RiskRows):
    """Interval lengths and risk-set moments on each constant piece."""
    cp = rows.change_points()
    lo, hi = cp[:-1], cp[1:]
    # row at risk on the whole piece (lo, hi]
    M = (rows.start[None, :] <= lo[:, None]) & (rows.stop[None, :] >= hi[:, None])
    M = M.astype(float)
    X = rows.X
    S0 = M.sum(axis=1)
    S1 = M @ X
    S2 = (M @ (X[:, :, None] * X[:, None, :]).reshape(len(X), -1)).reshape(-1, X.shape[1], X.shape[1])
    return hi - lo, S0, S1, S2


def _stratum_H(rows: RiskRows, p: int) -> np.ndarray:
    if rows.m == 0:
        return np.zeros((p, p))
    dt, S0, S1, S2 = _piecewise_moments(rows)
    keep = S0 > 0
    dt, S0, S1, S2 = dt[keep], S0[keep], S1[keep], S2[keep]
    centered = S2 - S1[:, :, None] * S1[:, None, :] / S0[:, None, None]
    H = np.einsum("k,kab->ab", dt, centered)
    return 0.5 * (H + H.T)


def event_means(rows: RiskRows) -> np.ndarray:
    """``Xbar^s(t_e)`` at each event time (event order of ``rows.event_rows``)."""
    S = rows.risk_sums(np.column_stack([np.ones(rows.m), rows.X]))
    return S[:, 1:] / S[:, :1]


def assemble_additive(design: StratifiedDesign, data: Dataset | None = None) -> AdditiveSystem:
    p, B, n = design.p, design.B, design.n
    H = np.zeros((B, p, p))
    h = np.zeros((B, p))
    empty = np.zeros(B, dtype=bool)
    for s, rows in enumerate(design.strata):
        if rows.m == 0 or np.all(rows.stop <= rows.start):
            empty[s] = True
            continue
        H[s] = _stratum_H(rows, p) / n
        if rows.n_events:
            xbar = event_means(rows)
            h[s] = (rows.X[rows.event_rows] - xbar).sum(axis=0) / n
    return AdditiveSystem(H, h, n, empty)


def additive_loss(sys: AdditiveSystem, beta: np.ndarray) -> float:
    """Sum over strata of ``beta(s)' H(s) beta(s) - 2 h(s)' beta(s)``."""
    beta = np.asarray(beta, dtype=float)
    quad = np.einsum("js,sjk,ks->", beta, sys.H, beta)
    lin = np.einsum("sj,js->", sys.h, beta)
    return float(quad - 2.0 * lin)


def additive_gradient(sys: AdditiveSystem, beta: np.ndarray) -> np.ndarray:
    """Gradient with respect to beta, shape (p, B)."""
    return 2.0 * (np.einsum("sjk,ks->js", sys.H, beta) - sys.h.T)


def fit_unconstrained_additive(sys: AdditiveSystem, pinv_fallback: bool = False) -> FitResult:
    beta = np.zeros((sys.p, sys.B))
    bad = [s for s in range(sys.B) if sys.empty[s] or sys.rcond(s) < RCOND_MIN]
    if bad and not pinv_fallback:
        raise UnidentifiableStratumError(bad)
    for s in range(sys.B):
        if s in bad:
            beta[:, s] = np.linalg.pinv(sys.H[s]) @ sys.h[s]
        else:
            beta[:, s] = np.linalg.solve(sys.H[s], sys.h[s])
    fit = FitResult("unconstrained", "add", beta, n=sys.n, objective=additive_loss(sys, beta))
    if bad:
        fit.warnings.append(f"pseudo-inverse used for strata {[s + 1 for s in bad]}")
    return fit


def fit_constant_additive(sys: AdditiveSystem) -> FitResult:
    Hp = sys.H.sum(axis=0)
    hp = sys.h.sum(axis=0)
    if _rcond(Hp) < RCOND_MIN:
        raise EstimationError("pooled additive matrix is singular")
    b = np.linalg.solve(Hp, hp)
    beta = np.repeat(b[:, None], sys.B, axis=1)
    return FitResult("constant", "add", beta, n=sys.n, objective=additive_loss(sys, beta))


def score_residual_diag(design: StratifiedDesign, data: Dataset, beta0: np.ndarray, baseline) -> np.ndarray:
    """Centered score process ``Z_n(s)`` under known truth, shape (B, p).

    ``Z_n(s) = (1/n) sum_i int (X_i - Xbar^s(t)) Y_i^s(t) dM_i^s(t)`` with
    ``dM = dN - Y^s (alpha0(t) + X beta0(s)) dt``: event sum minus the exact
    compensator integral over the piecewise-constant risk sets.
    """
    beta0 = np.asarray(beta0, dtype=float)
    p, B, n = design.p, design.B, design.n
    Z = np.zeros((B, p))
    for s, rows in enumerate(design.strata):
        if rows.m == 0:
            continue
        if rows.n_events:
            Z[s] += (rows.X[rows.event_rows] - event_means(rows)).sum(axis=0)
        cp = rows.change_points()
        lo, hi = cp[:-1], cp[1:]
        M = ((rows.start[None, :] <= lo[:, None]) & (rows.stop[None, :] >= hi[:, None])).astype(float)
        S0 = M.sum(axis=1)
        keep = S0 > 0
        M, lo, hi, S0 = M[keep], lo[keep], hi[keep], S0[keep]
        S1 = M @ rows.X
        xbar = S1 / S0[:, None]
        dLam = cumulative_hazard(baseline, hi) - cumulative_hazard(baseline, lo)
        lin = rows.X @ beta0[:, s]
        # sum_i Y_i (X_i - xbar)(dLam + X_i beta0 dt) on each piece
        base_part = dLam[:, None] * (S1 - S0[:, None] * xbar)
        lin_part = (hi - lo)[:, None] * (M @ (rows.X * lin[:, None]) - xbar * (M @ lin)[:, None])
        Z[s] -= (base_part + lin_part).sum(axis=0)
    return Z / n
