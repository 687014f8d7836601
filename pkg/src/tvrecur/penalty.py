"""Covariate-specific total-variation penalty across event strata.

Both penalized criteria are solved in increment coordinates
``gamma^j(1) = beta^j(1)``, ``gamma^j(s) = beta^j(s) - beta^j(s-1)``, where the
penalty becomes a weighted l1 norm on ``gamma^j(s), s >= 2`` with the first
column left free.  The additive criterion is quadratic and solved by cyclic
coordinate descent; the multiplicative one by monotone accelerated proximal
gradient.  Both finish with an active-set Newton step once the sparsity
pattern has settled, and every returned fit carries a KKT certificate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .additive import AdditiveSystem, additive_gradient, additive_loss, assemble_additive, fit_constant_additive
from .dataset import Dataset, StratifiedDesign, build_design
from .multiplicative import DIVERGENCE_BOUND, fit_constant_mult, gradient_and_hessian, loss_grad, neg_partial_loglik
from .results import ConvergenceError, EstimationError, FitResult, KKTReport, MonotoneLikelihoodError

UNPENALIZED_TOL = 1e-8


def tv(row) -> float:
    row = np.asarray(row, dtype=float)
    return float(np.abs(np.diff(row)).sum())


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def reparam_to_increments(beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    gamma = beta.copy()
    gamma[:, 1:] = np.diff(beta, axis=1)
    return gamma


def reparam_from_increments(gamma: np.ndarray) -> np.ndarray:
    return np.cumsum(np.asarray(gamma, dtype=float), axis=1)


def detect_nonconstant(fit, fuse_tol: float = 1e-8) -> np.ndarray:
    beta = fit.beta if isinstance(fit, FitResult) else np.asarray(fit)
    return np.array([tv(row) > fuse_tol for row in beta])


@dataclass
class PenaltyConfig:
    lam: float
    weights: np.ndarray | None = None
    fuse_tol: float = 1e-8

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
                raise ValueError("weights must be finite and nonnegative")
        if not self.fuse_tol > 0:
            raise ValueError("fuse_tol must be positive")

    def pen_matrix(self, p: int, B: int, n: int) -> np.ndarray:
        """Per-coordinate l1 weights (lambda/n * w) in gamma coordinates, (p, B)."""
        w = np.ones((p, B - 1)) if self.weights is None else self.weights
        if w.shape != (p, B - 1):
            raise ValueError(f"weights must have shape {(p, B - 1)}")
        pen = np.zeros((p, B))
        pen[:, 1:] = self.lam / n * w
        return pen


def increment_map(p: int, B: int) -> np.ndarray:
    """Matrix T with vec(beta) = T vec(gamma), row-major (covariate, stratum)."""
    return np.kron(np.eye(p), np.triu(np.ones((B, B))).T)


def block_matrix(blocks) -> np.ndarray:
    """vec(beta) Hessian from per-stratum (p x p) blocks, row-major ordering."""
    B = len(blocks)
    p = blocks[0].shape[0]
    Q = np.zeros((p * B, p * B))
    for s, Hs in enumerate(blocks):
        idx = np.arange(p) * B + s
        Q[np.ix_(idx, idx)] = Hs
    return Q


def grad_to_increments(grad_beta: np.ndarray) -> np.ndarray:
    return np.cumsum(grad_beta[:, ::-1], axis=1)[:, ::-1]


def kkt_report(grad_gamma: np.ndarray, gamma: np.ndarray, pen: np.ndarray, lam_over_n: float) -> KKTReport:
    penalized = np.zeros(gamma.shape, dtype=bool)
    penalized[:, 1:] = True
    g, x = grad_gamma[penalized], gamma[penalized]
    pk = pen[penalized]
    nz = x != 0
    res = np.where(nz, np.abs(g + pk * np.sign(x)), np.maximum(np.abs(g) - pk, 0.0))
    unpen = np.abs(grad_gamma[:, 0])
    return KKTReport(
        float(res.max(initial=0.0)),
        float(unpen.max(initial=0.0)),
        1e-6 * max(1.0, lam_over_n),
        UNPENALIZED_TOL,
    )


# ---------------------------------------------------------------------------
# additive: coordinate descent on a quadratic


def _quad_obj(A, b, pen, x):
    return float(x @ A @ x - 2 * b @ x + pen @ np.abs(x))


def _quad_polish(A, b, pen, free, x):
    """Exact minimizer on the current sign face, or None if signs change."""
    S = (x != 0) | free
    if not S.any():
        return None
    sigma = np.sign(x)
    rhs = b[S] - 0.5 * pen[S] * sigma[S]
    z = np.linalg.lstsq(A[np.ix_(S, S)], rhs, rcond=1e-13)[0]
    fixed = ~free[S]
    if np.any(np.sign(z[fixed]) != sigma[S][fixed]):
        return None
    out = np.zeros_like(x)
    out[S] = z
    return out


def _cd_quadratic(A, b, pen, free, x0, lam_over_n, max_sweeps=100_000, polish_every=10):
    """Minimize x'Ax - 2b'x + sum pen|x| by cyclic coordinate descent.

    ``free`` marks unpenalized coordinates.  Returns ``(x, sweeps, history)``.
    """
    x = x0.copy()
    r = b - A @ x
    diag = np.diag(A).copy()
    obj = _quad_obj(A, b, pen, x)
    history = [obj]
    p_tol = 1e-6 * max(1.0, lam_over_n)

    def report(xv, rv):
        g = -2 * rv
        nz = xv != 0
        res = np.where(nz, np.abs(g + pen * np.sign(xv)), np.maximum(np.abs(g) - pen, 0.0))
        return float(res[~free].max(initial=0.0)), float(np.abs(g[free]).max(initial=0.0))

    for sweep in range(1, max_sweeps + 1):
        for k in range(x.size):
            akk = diag[k]
            if akk <= 0:
                # zero curvature: the coordinate is only driven by its penalty
                if x[k] != 0:
                    r += A[:, k] * x[k]
                    x[k] = 0.0
                continue
            z = r[k] + akk * x[k]
            new = np.sign(z) * max(abs(z) - 0.5 * pen[k], 0.0) / akk
            delta = new - x[k]
            if delta != 0.0:
                r -= A[:, k] * delta
                x[k] = new
        if sweep % polish_every == 0:
            xp = _quad_polish(A, b, pen, free, x)
            if xp is not None:
                op = _quad_obj(A, b, pen, xp)
                if op <= _quad_obj(A, b, pen, x) + 1e-15 * abs(op):
                    x = xp
                    r = b - A @ x
        obj = _quad_obj(A, b, pen, x)
        history.append(obj)
        rp, ru = report(x, r)
        if rp <= p_tol and ru <= UNPENALIZED_TOL:
            return x, sweep, history
    raise ConvergenceError(f"coordinate descent did not converge in {max_sweeps} sweeps", max(rp, ru))


def fit_tv_additive(sys: AdditiveSystem, cfg: PenaltyConfig, warm: np.ndarray | None = None,
                    max_sweeps: int = 100_000) -> FitResult:
    p, B, n = sys.p, sys.B, sys.n
    T = increment_map(p, B)
    Q = block_matrix(list(sys.H))
    A = T.T @ Q @ T
    A = 0.5 * (A + A.T)
    bvec = T.T @ sys.h.T.reshape(-1)
    pen = cfg.pen_matrix(p, B, n).reshape(-1)
    free = np.zeros((p, B), dtype=bool)
    free[:, 0] = True
    free = free.reshape(-1)
    if np.linalg.matrix_rank(A[np.ix_(free, free)]) < p:
        raise EstimationError("pooled additive system is singular")
    x0 = np.zeros(p * B) if warm is None else reparam_to_increments(warm).reshape(-1)
    x, sweeps, hist = _cd_quadratic(A, bvec, pen, free, x0, cfg.lam / n, max_sweeps)
    gamma = x.reshape(p, B)
    beta = reparam_from_increments(gamma)
    ggrad = grad_to_increments(additive_gradient(sys, beta))
    kkt = kkt_report(ggrad, gamma, pen.reshape(p, B), cfg.lam / n)
    obj = additive_loss(sys, beta) + float((pen.reshape(p, B) * np.abs(gamma)).sum())
    kind = "tv" if cfg.weights is None else "tv2"
    return FitResult(kind, "add", beta, lam=cfg.lam, n=n, n_iter=sweeps, objective=obj, kkt=kkt,
                     weights=cfg.weights, history=hist)


# ---------------------------------------------------------------------------
# multiplicative: accelerated proximal gradient


class _MultProblem:
    def __init__(self, design: StratifiedDesign, pen: np.ndarray):
        self.design = design
        self.pen = pen
        self.p, self.B = design.p, design.B
        self.T = increment_map(self.p, self.B)

    def f(self, gamma):
        return neg_partial_loglik(self.design, None, reparam_from_increments(gamma))

    def f_grad(self, gamma):
        val, g = loss_grad(self.design, reparam_from_increments(gamma))
        return val, grad_to_increments(g)

    def F(self, gamma):
        return self.f(gamma) + float((self.pen * np.abs(gamma)).sum())

    def hess_gamma(self, gamma):
        _, blocks = gradient_and_hessian(self.design, None, reparam_from_increments(gamma))
        H = self.T.T @ block_matrix(blocks) @ self.T
        return 0.5 * (H + H.T)


def _mult_polish(prob: _MultProblem, x: np.ndarray, max_iter: int = 50):
    """Active-set Newton on the current sign face.

    A step that would flip the sign of a penalized coordinate is cut at the
    first zero crossing and that coordinate leaves the active set.  Every
    accepted step decreases the penalized objective.

    Returns the polished point and the largest coordinate of the last full
    Newton target ``x + d``; a huge value flags a direction along which the
    objective keeps decreasing without a finite minimizer.
    """
    pen = prob.pen.reshape(-1)
    free = np.zeros((prob.p, prob.B), dtype=bool)
    free[:, 0] = True
    free = free.reshape(-1)
    xv = x.reshape(-1).copy()
    sigma = np.sign(xv)

    def phi(v):
        return prob.f(v.reshape(prob.p, prob.B)) + float(pen @ np.abs(v))

    val = phi(xv)
    reach = float(np.max(np.abs(xv)))
    for _ in range(max_iter):
        S = (xv != 0) | free
        lin = np.where(free, 0.0, pen * sigma)
        _, g = prob.f_grad(xv.reshape(prob.p, prob.B))
        g = g.reshape(-1) + lin
        if np.max(np.abs(g[S])) < 1e-12:
            break
        H = prob.hess_gamma(xv.reshape(prob.p, prob.B))[np.ix_(S, S)]
        d = np.zeros_like(xv)
        d[S] = -np.linalg.lstsq(H, g[S], rcond=1e-13)[0]
        reach = float(np.max(np.abs(xv + d)))
        pk = S & ~free
        cross = pk & (np.sign(xv + d) != sigma)
        t = 1.0
        hit = None
        if cross.any():
            ratios = -xv[cross] / d[cross]
            k = int(np.argmin(ratios))
            t = float(ratios[k])
            hit = np.flatnonzero(cross)[k]
        if -0.5 * float(g[S] @ d[S]) < 1e-13 * max(abs(val), 1.0):
            # the predicted decrease is below the rounding level of phi, so
            # objective comparisons are noise; accept if the gradient shrinks
            xn = xv + t * d
            if hit is not None:
                xn[hit] = 0.0
            gn = prob.f_grad(xn.reshape(prob.p, prob.B))[1].reshape(-1) + lin
            Sn = (xn != 0) | free
            if np.max(np.abs(gn[Sn & S])) >= np.max(np.abs(g[S])):
                break
            vn = phi(xn)
            tiny = True
        else:
            tiny = False
            for _ in range(40):
                xn = xv + t * d
                if hit is not None:
                    xn[hit] = 0.0
                vn = phi(xn)
                if vn <= val:
                    break
                t *= 0.5
                hit = None
            else:
                break
        done = not tiny and val - vn <= 1e-15 * max(abs(val), 1.0) and hit is None
        if np.any(np.sign(xn[pk]) * sigma[pk] < 0):
            break
        xv, val = xn, vn
        if done:
            break
    return xv.reshape(prob.p, prob.B), reach


def fit_tv_mult(design: StratifiedDesign, data: Dataset | None, cfg: PenaltyConfig,
                warm: np.ndarray | None = None, max_iter: int = 20_000, polish_every: int = 10) -> FitResult:
    p, B, n = design.p, design.B, design.n
    if design.events_per_stratum().sum() == 0:
        raise EstimationError("no events")
    pen = cfg.pen_matrix(p, B, n)
    prob = _MultProblem(design, pen)
    lam_n = cfg.lam / n
    x = np.zeros((p, B)) if warm is None else reparam_to_increments(warm)
    Fx = prob.F(x)
    L = np.linalg.eigvalsh(prob.hess_gamma(x))[-1]
    t = 1.0 / max(L, 1e-12)
    y, theta = x.copy(), 1.0
    history = [Fx]
    support = x != 0
    stable = 0
    kkt = kkt_report(prob.f_grad(x)[1], x, pen, lam_n)
    it = 0
    while not kkt.ok:
        it += 1
        if it > max_iter:
            raise ConvergenceError(f"proximal gradient did not converge in {max_iter} iterations",
                                   max(kkt.penalized, kkt.unpenalized))
        fy, gy = prob.f_grad(y)
        while True:
            xn = y - t * gy
            xn[:, 1:] = soft_threshold(xn[:, 1:], t * pen[:, 1:])
            d = xn - y
            fn = prob.f(xn)
            if fn <= fy + float((gy * d).sum()) + float((d * d).sum()) / (2 * t) + 1e-15 * abs(fy):
                break
            t *= 0.5
        Fn = fn + float((pen * np.abs(xn)).sum())
        if Fn > Fx:
            if theta == 1.0:
                # a plain proximal step from x failed to descend: x is optimal
                # up to rounding, so the certificate decides
                kkt = kkt_report(prob.f_grad(x)[1], x, pen, lam_n)
                if kkt.ok:
                    break
                xp, _ = _mult_polish(prob, x)
                kp = kkt_report(prob.f_grad(xp)[1], xp, pen, lam_n)
                if kp.ok and prob.F(xp) <= Fx + 1e-14 * max(abs(Fx), 1.0):
                    x, Fx, kkt = xp, prob.F(xp), kp
                    break
                raise ConvergenceError("proximal gradient stalled", max(kkt.penalized, kkt.unpenalized))
            # restart momentum from the last accepted point
            y, theta = x.copy(), 1.0
            continue
        theta_n = 0.5 * (1 + np.sqrt(1 + 4 * theta * theta))
        y = xn + ((theta - 1) / theta_n) * (xn - x)
        rel = abs(Fx - Fn) / max(abs(Fx), 1.0)
        x, Fx, theta = xn, Fn, theta_n
        history.append(Fx)
        new_support = x != 0
        stable = stable + 1 if np.array_equal(new_support, support) else 0
        support = new_support

        if it % polish_every == 0:
            xp, reach = _mult_polish(prob, x)
            Fp = prob.F(xp)
            if Fp <= Fx + 1e-14 * max(abs(Fx), 1.0):
                x, Fx = xp, Fp
                y, theta = x.copy(), 1.0
                history.append(Fx)
            kkt = kkt_report(prob.f_grad(x)[1], x, pen, lam_n)
            if kkt.ok:
                break
            if reach > DIVERGENCE_BOUND and stable >= polish_every:
                raise MonotoneLikelihoodError(None, "the penalized problem")
        elif rel < 1e-9:
            kkt = kkt_report(prob.f_grad(x)[1], x, pen, lam_n)
            if kkt.ok:
                break
    beta = reparam_from_increments(x)
    kind = "tv" if cfg.weights is None else "tv2"
    return FitResult(kind, "mult", beta, lam=cfg.lam, n=n, n_iter=it, objective=Fx, kkt=kkt,
                     weights=cfg.weights, history=history)


# ---------------------------------------------------------------------------
# model-generic helpers


def prepare(model: str, data: Dataset):
    """Design (mult) or assembled system (add) for ``data``."""
    design = build_design(data)
    if model == "mult":
        return design
    if model == "add":
        return assemble_additive(design, data)
    raise ValueError(f"unknown model {model!r}")


def fit_tv(model: str, target, cfg: PenaltyConfig, warm=None) -> FitResult:
    if model == "mult":
        return fit_tv_mult(target, None, cfg, warm=warm)
    return fit_tv_additive(target, cfg, warm=warm)


def heldout_loss(model: str, target, beta: np.ndarray) -> float:
    if model == "mult":
        return neg_partial_loglik(target, None, beta)
    return additive_loss(target, beta)


def fused_fit(model: str, target) -> FitResult:
    """Solution of the TV problem for every lambda >= lambda_max."""
    if model == "mult":
        return fit_constant_mult(target, baseline="stratified")
    return fit_constant_additive(target)


def lambda_max(model: str, target, weights: np.ndarray | None = None) -> float:
    """Smallest lambda (raw, before division by n) fusing every row.

    At the fused solution the unpenalized gradient vanishes, so fusion holds
    iff every increment gradient is dominated by its penalty weight.
    """
    beta = fused_fit(model, target).beta
    if model == "mult":
        g = gradient_and_hessian(target, None, beta)[0]
        n = target.n
    else:
        g = additive_gradient(target, beta)
        n = target.n
    gg = np.abs(grad_to_increments(g)[:, 1:])
    w = np.ones_like(gg) if weights is None else weights
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(gg > 0, gg / w, 0.0)
    return float(n * ratio.max(initial=0.0))


def reweighting_weights(beta: np.ndarray, epsilon: float | None = None) -> np.ndarray:
    """Two-step weights ``1 / (|delta beta^j(s)| + eps)``."""
    if epsilon is None:
        spread = float(np.max(np.ptp(beta, axis=1))) if beta.size else 0.0
        epsilon = 1e-4 * (spread if spread > 0 else 1.0)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return 1.0 / (np.abs(np.diff(beta, axis=1)) + epsilon)


def reweighted_two_step(fit1: FitResult, refit, epsilon: float | None = None) -> FitResult:
    """Refit at the same lambda with weights from the first-step increments.

    ``refit(cfg, warm)`` runs the penalized solver of the right model.
    """
    w = reweighting_weights(fit1.beta, epsilon)
    fit2 = refit(PenaltyConfig(fit1.lam, weights=w), fit1.beta)
    fit2.kind = "tv2"
    return fit2


def default_grid(lmax: float, n_grid: int = 50, ratio: float = 1e-3) -> np.ndarray:
    if lmax <= 0:
        return np.array([0.0])
    return np.geomspace(lmax, lmax * ratio, n_grid)


def _path(model, target, grid, weights=None):
    """Warm-started fits from the largest lambda down.

    The path stops at the first lambda whose fit fails (typically the
    estimate running off to infinity as the penalty vanishes); the returned
    list is then shorter than ``grid``.  A failure at the first lambda is
    raised.
    """
    fits = []
    warm = None
    for lam in sorted(grid, reverse=True):
        try:
            fit = fit_tv(model, target, PenaltyConfig(lam, weights), warm=warm)
        except EstimationError:
            if not fits:
                raise
            break
        fits.append(fit)
        warm = fit.beta
    return fits


@dataclass
class LambdaSelection:
    lam: float
    grid: np.ndarray
    cv_score: np.ndarray
    path: list
    folds_used: int


def _fold_ok(model, target, B) -> bool:
    if model == "mult":
        return bool(np.all(target.events_per_stratum() > 0))
    return not bool(np.any(target.empty))


def select_lambda(model: str, data: Dataset, grid=None, folds: int = 5, seed: int = 0,
                  n_grid: int = 50, ratio: float = 1e-3) -> LambdaSelection:
    """K-fold cross-validation of lambda by subjects, scored on held-out risk sets."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    full = prepare(model, data)
    if grid is None:
        grid = default_grid(lambda_max(model, full), n_grid, ratio)
    grid = np.sort(np.asarray(grid, dtype=float))[::-1]
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if grid.size == 1:
        path = _path(model, full, grid)
        return LambdaSelection(float(grid[0]), grid, np.array([np.nan]), path, 0)

    rng = np.random.default_rng(seed)
    assign = rng.permutation(np.arange(data.n) % folds)
    scores = []
    for k in range(folds):
        test_idx = np.flatnonzero(assign == k)
        train_idx = np.flatnonzero(assign != k)
        test = prepare(model, data.subset(test_idx))
        if not _fold_ok(model, test, data.B):
            warnings.warn(f"fold {k + 1} skipped: held-out data has an empty stratum", RuntimeWarning, stacklevel=2)
            continue
        train = prepare(model, data.subset(train_idx))
        try:
            fits = _path(model, train, grid)
        except EstimationError as exc:
            warnings.warn(f"fold {k + 1} skipped: {exc}", RuntimeWarning, stacklevel=2)
            continue
        row = np.full(grid.size, np.inf)
        row[:len(fits)] = [heldout_loss(model, test, f.beta) for f in fits]
        scores.append(row)
    if not scores:
        raise EstimationError("every cross-validation fold was skipped")
    cv = np.mean(scores, axis=0)
    path = _path(model, full, grid)
    # lambdas below the last successful full-data fit cannot be selected
    cv[len(path):] = np.inf
    best = int(np.argmin(cv))
    return LambdaSelection(float(grid[best]), grid, cv, path, len(scores))
