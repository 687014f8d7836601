"""Stratified Cox partial likelihood for event-specific multiplicative rates.

Losses are the negative log partial likelihood scaled by ``1/n``.  Tied event
times share the full risk set (Breslow).  Every ``S^(0)`` evaluation is
max-shifted so the exponentials never overflow.
"""

from __future__ import annotations

import warnings

import numpy as np

from .dataset import Dataset, RiskRows, StratifiedDesign
from .results import (
    ConvergenceError,
    FitResult,
    MonotoneLikelihoodError,
    UnidentifiableStratumError,
)

DIVERGENCE_BOUND = 1e3


def rows_terms(rows: RiskRows, b: np.ndarray, order: int = 0):
    """Unscaled negative log partial likelihood of ``rows`` at ``b``.

    Returns ``(loss, grad, hess)`` where the derivatives are ``None`` when not
    requested by ``order``.
    """
    p = rows.X.shape[1]
    if rows.n_events == 0:
        return 0.0, np.zeros(p) if order >= 1 else None, np.zeros((p, p)) if order >= 2 else None
    X = rows.X
    eta = X @ b
    shift = eta.max()
    w = np.exp(eta - shift)
    cols = [w[:, None]]
    if order >= 1:
        cols.append(w[:, None] * X)
    if order >= 2:
        cols.append(w[:, None] * (X[:, :, None] * X[:, None, :]).reshape(len(X), -1))
    S = rows.risk_sums(np.hstack(cols))
    ev = rows.event_rows
    # the event's own row is always at risk
    S0 = np.maximum(S[:, 0], w[ev])
    # risk sets far below the global maximum underflow under one shared shift;
    # redo those events with their own shift
    low = S0 < 1e-250
    S0[low] = 1.0
    logS0 = np.log(S0) + shift
    for k in np.flatnonzero(low):
        t = rows.event_times[k]
        at = np.flatnonzero((rows.start < t) & (t <= rows.stop))
        m = eta[at].max()
        wl = np.exp(eta[at] - m)
        vals = [wl[:, None]]
        if order >= 1:
            vals.append(wl[:, None] * X[at])
        if order >= 2:
            vals.append(wl[:, None] * (X[at, :, None] * X[at, None, :]).reshape(len(at), -1))
        local = np.hstack(vals).sum(axis=0)
        logS0[k] = np.log(local[0]) + m
        S[k] = local / local[0]
    loss = -float(np.sum(eta[ev] - logS0))
    grad = hess = None
    if order >= 1:
        E = S[:, 1:1 + p] / S0[:, None]
        grad = -(X[ev] - E).sum(axis=0)
    if order >= 2:
        S2 = S[:, 1 + p:].reshape(-1, p, p) / S0[:, None, None]
        hess = (S2 - E[:, :, None] * E[:, None, :]).sum(axis=0)
        hess = 0.5 * (hess + hess.T)
    return loss, grad, hess


def neg_partial_loglik(design: StratifiedDesign, data: Dataset | None, beta: np.ndarray) -> float:
    beta = np.asarray(beta, dtype=float)
    return sum(rows_terms(r, beta[:, s])[0] for s, r in enumerate(design.strata)) / design.n


def gradient_and_hessian(design: StratifiedDesign, data: Dataset | None, beta: np.ndarray):
    """Gradient (p x B) and the B diagonal Hessian blocks of the scaled loss."""
    beta = np.asarray(beta, dtype=float)
    grad = np.zeros_like(beta)
    blocks = []
    for s, r in enumerate(design.strata):
        _, g, H = rows_terms(r, beta[:, s], order=2)
        grad[:, s] = g / design.n
        blocks.append(H / design.n)
    return grad, blocks


def loss_grad(design: StratifiedDesign, beta: np.ndarray):
    """Scaled loss and gradient (p x B) in one pass."""
    grad = np.zeros_like(beta)
    loss = 0.0
    for s, r in enumerate(design.strata):
        l, g, _ = rows_terms(r, beta[:, s], order=1)
        loss += l
        grad[:, s] = g
    return loss / design.n, grad / design.n


def _is_singular(H: np.ndarray) -> bool:
    if not H.size:
        return False
    w = np.linalg.eigvalsh(H)
    return bool(w[-1] <= 0 or w[0] < 1e-12 * w[-1])


def _ray_diverges(fun, x, g, H, val) -> bool:
    """Does the loss keep decreasing along the Newton ray out to the bound?

    Under separation the gradient decays exponentially, so it drops below any
    tolerance long before the iterates reach ``DIVERGENCE_BOUND``.  Doubling
    steps along the Newton direction reach the bound in a few evaluations;
    at a genuine minimizer the loss rises almost immediately.
    """
    d = -np.linalg.lstsq(H, g, rcond=1e-12)[0] if H.size else np.zeros_like(x)
    if not np.any(d):
        return False
    slack = 1e-12 * max(abs(val), 1.0)
    t = 1.0
    for _ in range(80):
        xn = x + t * d
        if np.max(np.abs(xn)) > DIVERGENCE_BOUND:
            return True
        v = fun(xn, 0)[0]
        if not np.isfinite(v) or v > val + slack:
            return False
        t *= 2.0
    return True


def newton_minimize(fun, x0, tol=1e-8, max_iter=100, stratum=None):
    """Damped Newton with step halving on a smooth convex ``fun(x, order)``.

    Returns ``(x, n_iter, history, flat)``; ``flat`` is set when a singular
    Hessian forced a least-squares step.
    """
    x = np.array(x0, dtype=float)
    val, g, H = fun(x, 2)
    history = [val]
    flat = False
    rel = np.inf

    def finish(it):
        if _ray_diverges(fun, x, g, H, val):
            raise MonotoneLikelihoodError(stratum)
        return x, it, history, flat or _is_singular(H)

    for it in range(max_iter):
        singular = _is_singular(H)
        if np.max(np.abs(g), initial=0.0) < tol and (it == 0 or rel < 1e-10):
            return finish(it)
        if singular:
            flat = True
            d = -np.linalg.lstsq(H, g, rcond=1e-12)[0]
        else:
            d = -np.linalg.solve(H, g)
        if -0.5 * float(g @ d) < 1e-13 * max(abs(val), 1.0):
            # decrease below the rounding level of the loss: judge the full
            # step by the gradient instead of the noisy objective
            vn, gn, Hn = fun(x + d, 2)
            if not np.max(np.abs(gn)) < np.max(np.abs(g)):
                if np.max(np.abs(g)) < np.sqrt(tol):
                    return finish(it)
                raise ConvergenceError("Newton stalled at rounding level", float(np.max(np.abs(g))))
            x, val, g, H = x + d, vn, gn, Hn
            rel = 0.0
            history.append(val)
            continue
        t = 1.0
        for _ in range(60):
            xn = x + t * d
            vn = fun(xn, 0)[0]
            if np.isfinite(vn) and vn <= val:
                break
            t *= 0.5
        else:
            if np.max(np.abs(g)) < np.sqrt(tol):
                return finish(it)
            raise ConvergenceError("Newton line search failed", float(np.max(np.abs(g))))
        if np.max(np.abs(xn)) > DIVERGENCE_BOUND:
            raise MonotoneLikelihoodError(stratum)
        rel = abs(val - vn) / max(abs(val), 1e-300)
        x = xn
        val, g, H = fun(x, 2)
        history.append(val)
    if np.max(np.abs(g)) < tol:
        return finish(max_iter)
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations", float(np.max(np.abs(g))))


def _rows_fun(rows_list, n):
    def fun(b, order):
        loss = 0.0
        p = b.size
        g = np.zeros(p)
        H = np.zeros((p, p))
        for r in rows_list:
            l, gr, hr = rows_terms(r, b, order)
            loss += l
            if order >= 1:
                g += gr
            if order >= 2:
                H += hr
        return loss / n, g / n, H / n
    return fun


def fit_unconstrained_mult(design: StratifiedDesign, data: Dataset | None = None, tol=1e-8, max_iter=100) -> FitResult:
    counts = design.events_per_stratum()
    empty = [s for s in range(design.B) if counts[s] == 0]
    if empty:
        raise UnidentifiableStratumError(empty, "no events")
    beta = np.zeros((design.p, design.B))
    total_iter = 0
    notes = []
    for s, rows in enumerate(design.strata):
        b, it, _, flat = newton_minimize(_rows_fun([rows], design.n), beta[:, s], tol, max_iter, stratum=s)
        beta[:, s] = b
        total_iter += it
        if flat:
            notes.append(f"flat direction in stratum {s + 1} (singular Hessian)")
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return FitResult("unconstrained", "mult", beta, n=design.n, n_iter=total_iter,
                     objective=neg_partial_loglik(design, data, beta), warnings=notes)


def fit_constant_mult(design: StratifiedDesign, data: Dataset | None = None, tol=1e-8, max_iter=100,
                      baseline: str = "pooled") -> FitResult:
    """Common-coefficient fit broadcast to all B columns.

    ``baseline="pooled"`` uses the unstratified risk set ``Y_j(t)`` with all
    retained events (a single baseline); ``baseline="stratified"`` keeps one
    baseline per event stratum and shares beta across strata, which is the
    fully-fused limit of the total-variation fit.
    """
    if baseline == "pooled":
        rows_list = [design.pooled]
    elif baseline == "stratified":
        rows_list = list(design.strata)
    else:
        raise ValueError(f"unknown baseline {baseline!r}")
    if sum(r.n_events for r in rows_list) == 0:
        raise UnidentifiableStratumError(range(design.B), "no events")
    b, it, hist, flat = newton_minimize(_rows_fun(rows_list, design.n), np.zeros(design.p), tol, max_iter)
    notes = ["flat direction (singular Hessian)"] if flat else []
    beta = np.repeat(b[:, None], design.B, axis=1)
    kind = "constant" if baseline == "pooled" else "common"
    return FitResult(kind, "mult", beta, n=design.n, n_iter=it, objective=hist[-1], history=hist,
                     warnings=notes)
