"""l1-penalised GLM estimation via penalised IRLS with coordinate descent.

The solver maximises the average-log-likelihood objective

    PL(beta) = (1/n) sum_i {y_i x_i'beta - b(x_i'beta)} - lam * sum_j w_j |beta_j|

at unit working dispersion (the gaussian dispersion enters inference
only, never the solve).  Gaussian problems are solved directly by
cyclic coordinate descent on the gram matrix; logistic and poisson
problems wrap the same descent in an iteratively-reweighted
least-squares outer loop with step halving.

Numerical strategy: columns are rescaled to unit root-mean-square and
the penalty weights are rescaled by the same factors, so the solved
objective is *identical* to the unstandardised one (scaling is pure
conditioning, not a different estimator).  Coordinates with infinite
penalty weight are frozen at zero; weight-zero coordinates (an
unpenalised intercept) are always active.  Convergence is certified by
the Karush-Kuhn-Tucker residual in original coordinates, never by
coefficient change alone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .families import (
    Dataset,
    FamilyKind,
    FamilySpec,
    link_inverse,
    score,
    unit_deviance,
    validate_for_family,
    variance_weight,
)

# Relative slack used when screening zero coordinates for KKT
# violations; keeps exact-boundary coordinates (lam == lambda_max) from
# churning in and out of the active set without affecting the
# certificate, which is checked at config.tol scale.
_SCREEN_SLACK = 1e-12


def soft_threshold(z: float, gamma: float):
    """sign(z) * max(|z| - gamma, 0); gamma must be nonnegative."""
    if np.any(np.asarray(gamma) < 0):
        raise ValueError("threshold must be nonnegative")
    return np.sign(z) * np.maximum(np.abs(z) - gamma, 0.0)


@dataclass
class LassoFit:
    """A solved l1-penalised fit with its optimality certificate.

    ``subgradient`` is the recovered subdifferential vector: the sign of
    every nonzero coefficient, and S_j / (lam * w_j) for penalised zero
    coefficients.  ``kkt_violation`` is the sup-norm residual of the
    stationarity condition in original coordinates at unit dispersion.
    ``objective_trace`` records the accepted penalised objective after
    each reweighting step (non-gaussian fits only).
    """

    beta: np.ndarray
    lam: float
    subgradient: np.ndarray
    n_iter: int
    converged: bool
    kkt_violation: float
    penalty_weights: np.ndarray = None  # effective w_j used by the solve
    n_outer: int = 1
    objective_trace: Optional[list] = None

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.beta))

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.beta)


@dataclass
class PenaltyConfig:
    """Tuning-grid, weighting and solver-control parameters.

    ``lambda_grid`` may be omitted, in which case grids are built from
    lambda_max with ``n_lambda`` log-spaced points down to
    ``lambda_min_ratio * lambda_max``.  Cross-validation fold fits use
    the looser ``cv_tol`` (they only feed the deviance curve); the
    final fit is always certified at ``tol``.
    """

    lambda_grid: Optional[np.ndarray] = None
    per_coefficient_weights: Optional[np.ndarray] = None
    n_folds: int = 5
    tol: float = 1e-7
    max_outer_iter: int = 50
    max_inner_iter: int = 10_000
    n_lambda: int = 100
    lambda_min_ratio: float = 1e-3
    cv_tol: float = 1e-4

    def __post_init__(self) -> None:
        if self.lambda_grid is not None:
            grid = np.asarray(self.lambda_grid, dtype=float)
            if grid.ndim != 1 or grid.size == 0:
                raise ValueError("lambda_grid must be a nonempty 1-d array")
            if np.any(grid < 0):
                raise ValueError("lambda_grid entries must be nonnegative")
            if grid.size > 1 and np.any(np.diff(grid) >= 0):
                raise ValueError("lambda_grid must be strictly descending")
            self.lambda_grid = grid
        if self.per_coefficient_weights is not None:
            w = np.asarray(self.per_coefficient_weights, dtype=float)
            if np.any(np.isnan(w)) or np.any(w < 0):
                raise ValueError("penalty weights must be nonnegative (inf allowed)")
            self.per_coefficient_weights = w
        if self.n_folds < 2:
            raise ValueError("n_folds must be at least 2")
        if self.tol <= 0:
            raise ValueError("tol must be positive")

    def weights_for(self, p: int) -> np.ndarray:
        if self.per_coefficient_weights is None:
            return np.ones(p)
        w = self.per_coefficient_weights
        if w.shape != (p,):
            raise ValueError(f"penalty weights have shape {w.shape}, expected ({p},)")
        return w


def adaptive_weights(beta_init: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Per-coefficient penalty weights |beta_init_j|^(-gamma).

    Zero initial coefficients map to +inf, which freezes the
    coefficient at zero in any subsequent fit.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    beta_init = np.abs(np.asarray(beta_init, dtype=float))
    with np.errstate(divide="ignore"):
        return beta_init**-gamma


# --------------------------------------------------------------------
# Prepared problem: scaling, penalty bookkeeping, gram cache
# --------------------------------------------------------------------


class _Problem:
    """Dataset + family + penalty weights, rescaled for descent.

    Holds the unit-RMS column scales ``s``, the scaled design ``Xs``,
    the scaled penalty weights ``ws = w / s`` and masks for frozen
    (w = inf) and unpenalised (w = 0) coordinates.  Gaussian problems
    additionally cache the gram matrix for covariance-mode updates.
    """

    def __init__(self, data: Dataset, family: FamilySpec, weights: np.ndarray,
                 config: PenaltyConfig):
        validate_for_family(data, family)
        self.data = data
        self.family = family
        self.config = config
        self.w = np.asarray(weights, dtype=float)
        if self.w.shape != (data.p,):
            raise ValueError(
                f"penalty weights have shape {self.w.shape}, expected ({data.p},)"
            )
        rms = np.sqrt(np.mean(data.X**2, axis=0))
        self.degenerate = rms == 0.0  # all-zero columns can never move
        self.s = np.where(self.degenerate, 1.0, rms)
        self.Xs = data.X / self.s
        self.frozen = np.isinf(self.w) | self.degenerate
        if np.all(self.frozen):
            raise ValueError("every coordinate is frozen (all weights infinite)")
        with np.errstate(invalid="ignore"):
            self.ws = self.w / self.s
        self.unpenalised = (self.w == 0.0) & ~self.frozen
        self.is_gaussian = family.kind is FamilyKind.GAUSSIAN
        if self.is_gaussian:
            n = data.n
            self.G = self.Xs.T @ self.Xs / n
            self.c = self.Xs.T @ data.y / n
            self.diag = np.diag(self.G).copy()

    # -- objective helpers (scaled coordinates) ----------------------

    def beta_from_scaled(self, beta_s: np.ndarray) -> np.ndarray:
        return beta_s / self.s

    def beta_to_scaled(self, beta: np.ndarray) -> np.ndarray:
        return np.asarray(beta, dtype=float) * self.s

    def penalised_objective(self, beta_s: np.ndarray, lam: float) -> float:
        eta = self.Xs @ beta_s
        return _avg_ll_from_eta(self.family.kind, self.data.y, eta) - lam * float(
            np.sum(self.ws[~self.frozen] * np.abs(beta_s[~self.frozen]))
        )


def _avg_ll_from_eta(kind: FamilyKind, y: np.ndarray, eta: np.ndarray) -> float:
    if kind is FamilyKind.GAUSSIAN:
        b = 0.5 * eta**2
    elif kind is FamilyKind.LOGISTIC:
        b = np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))
    else:
        with np.errstate(over="ignore"):
            b = np.exp(eta)
    return float(np.mean(y * eta - b))


# --------------------------------------------------------------------
# Coordinate descent cores
# --------------------------------------------------------------------


def _polish_active(beta_s: np.ndarray, sub: np.ndarray, rhs: np.ndarray,
                   polish_idx: np.ndarray, unpen: np.ndarray) -> Optional[np.ndarray]:
    """Exact solve of the penalised problem restricted to the current
    nonzero set at its current signs.

    Coordinate descent identifies the active set and signs quickly but
    converges slowly on ill-conditioned active blocks; once the
    configuration is right, the restricted stationarity system is
    linear and one small solve lands on the optimum to machine
    precision.  A coordinate whose solved sign flips is not yet truly
    active: it is dropped to zero and the reduced system re-solved (the
    caller's KKT guard vets the result either way).  Returns None when
    the block is singular or signs never settle.
    """
    keep = np.arange(polish_idx.size)
    for _ in range(4):
        try:
            x = np.linalg.solve(sub[np.ix_(keep, keep)], rhs[keep])
        except np.linalg.LinAlgError:
            return None
        pen = ~unpen[polish_idx[keep]]
        flips = pen & (np.sign(x) != np.sign(beta_s[polish_idx[keep]]))
        if not np.any(flips):
            cand = np.zeros_like(beta_s)
            cand[polish_idx[keep]] = x
            return cand
        keep = keep[~flips]
        if keep.size == 0:
            return None
    return None


def _cd_gram(prob: _Problem, lam: float, beta_s: np.ndarray, tol_resid: float,
             max_passes: int) -> tuple[np.ndarray, int, bool]:
    """Cyclic coordinate descent on the gaussian gram system.

    Maintains the full scaled gradient g = c - G beta incrementally so
    KKT screening over inactive coordinates is free each pass; an
    active-set polish solve finishes each round.  Returns (beta_s,
    passes_used, certified) where certification is the
    original-coordinate KKT residual at tol_resid.
    """
    G, c, d, s = prob.G, prob.c, prob.diag, prob.s
    frozen, unpen = prob.frozen, prob.unpenalised
    thr = np.where(frozen, np.inf, lam * prob.ws)
    thr_fin = np.where(np.isfinite(thr), thr, 0.0)
    beta_s = beta_s.copy()
    beta_s[frozen] = 0.0
    g = c - G @ beta_s
    active = (beta_s != 0.0) | unpen
    passes = 0
    sweep_target = 1e-4 * max(1.0, lam)
    while passes < max_passes:
        # Screen every coordinate with the current exact gradient.
        viol = ~active & ~frozen & (np.abs(g) > thr * (1.0 + _SCREEN_SLACK))
        active |= viol
        resid = _kkt_resid_scaled(g, beta_s, thr, s, frozen, unpen)
        if resid <= tol_resid and not np.any(viol):
            return beta_s, passes, True
        idx = np.flatnonzero(active)
        # A handful of sweeps settles the support and signs; the polish
        # solve below does the precision work.  Scalar soft-threshold
        # arithmetic is inlined: this is the innermost loop.
        for _ in range(5):
            if passes >= max_passes:
                break
            passes += 1
            delta_max = 0.0
            for j in idx:
                rho = g[j] + d[j] * beta_s[j]
                if unpen[j]:
                    bj = rho / d[j]
                else:
                    az = (rho if rho >= 0.0 else -rho) - thr[j]
                    if az <= 0.0:
                        bj = 0.0
                    elif rho >= 0.0:
                        bj = az / d[j]
                    else:
                        bj = -az / d[j]
                delta = bj - beta_s[j]
                if delta != 0.0:
                    g -= G[j] * delta  # symmetric: row j == column j
                    beta_s[j] = bj
                    if abs(delta) > delta_max:
                        delta_max = abs(delta)
            if delta_max < sweep_target:
                break
        polish_idx = np.flatnonzero((beta_s != 0.0) | unpen)
        if polish_idx.size:
            sub = G[np.ix_(polish_idx, polish_idx)]
            rhs = c[polish_idx] - thr_fin[polish_idx] * np.sign(beta_s[polish_idx])
            cand = _polish_active(beta_s, sub, rhs, polish_idx, unpen)
            if cand is not None:
                g_cand = c - G @ cand
                g_cur = c - G @ beta_s
                if _kkt_resid_scaled(g_cand, cand, thr, s, frozen, unpen) <= \
                        _kkt_resid_scaled(g_cur, beta_s, thr, s, frozen, unpen):
                    beta_s, g = cand, g_cand
        # Refresh the gradient before certifying: incremental updates
        # drift at the 1e-14 level over many sweeps.
        g = c - G @ beta_s
        active = (beta_s != 0.0) | unpen
        sweep_target = max(sweep_target / 10.0, 1e-16)
    resid = _kkt_resid_scaled(g, beta_s, thr, s, frozen, unpen)
    return beta_s, passes, resid <= tol_resid


def _cd_weighted(prob: _Problem, z: np.ndarray, v: np.ndarray, lam: float,
                 beta_s: np.ndarray, tol_resid: float,
                 max_passes: int) -> tuple[np.ndarray, int, bool]:
    """Coordinate descent for the weighted quadratic IRLS subproblem.

    Solves min (1/2n) sum v_i (z_i - x_i'beta)^2 + lam sum w_j |beta_j|
    in residual-update form; used by the logistic/poisson outer loop.
    """
    Xs, n, s = prob.Xs, prob.data.n, prob.s
    frozen, unpen = prob.frozen, prob.unpenalised
    thr = np.where(frozen, np.inf, lam * prob.ws)
    thr_fin = np.where(np.isfinite(thr), thr, 0.0)
    beta_s = beta_s.copy()
    beta_s[frozen] = 0.0
    vz = v * z
    vr = v * (z - Xs @ beta_s)
    active = (beta_s != 0.0) | unpen
    passes = 0
    sweep_target = 1e-4 * max(1.0, lam)
    while passes < max_passes:
        g = Xs.T @ vr / n
        viol = ~active & ~frozen & (np.abs(g) > thr * (1.0 + _SCREEN_SLACK))
        active |= viol
        resid = _kkt_resid_scaled(g, beta_s, thr, s, frozen, unpen)
        if resid <= tol_resid and not np.any(viol):
            return beta_s, passes, True
        idx = np.flatnonzero(active)
        # Weighted columns and curvatures only for the active block;
        # Fortran order keeps the per-coordinate dot products on
        # contiguous memory.
        Xa = np.asfortranarray(Xs[:, idx])
        VXa = np.asfortranarray(Xa * v[:, None])
        da = np.einsum("ij,ij->j", Xa, VXa) / n
        da = np.where(da <= 0, 1.0, da)
        ba = beta_s[idx]
        thr_a = thr[idx]
        unpen_a = unpen[idx]
        # A handful of sweeps settles the support and signs; the polish
        # solve below does the precision work.  Scalar soft-threshold
        # arithmetic is inlined: this is the innermost loop.
        for _ in range(5):
            if passes >= max_passes:
                break
            passes += 1
            delta_max = 0.0
            for a in range(idx.size):
                rho = np.dot(Xa[:, a], vr) / n + da[a] * ba[a]
                if unpen_a[a]:
                    bj = rho / da[a]
                else:
                    az = (rho if rho >= 0.0 else -rho) - thr_a[a]
                    if az <= 0.0:
                        bj = 0.0
                    elif rho >= 0.0:
                        bj = az / da[a]
                    else:
                        bj = -az / da[a]
                delta = bj - ba[a]
                if delta != 0.0:
                    vr -= VXa[:, a] * delta
                    ba[a] = bj
                    if abs(delta) > delta_max:
                        delta_max = abs(delta)
            if delta_max < sweep_target:
                break
        beta_s[idx] = ba
        nz = (beta_s != 0.0) | unpen
        polish_pos = np.flatnonzero(nz[idx])
        if polish_pos.size:
            polish_idx = idx[polish_pos]
            sub = Xa[:, polish_pos].T @ VXa[:, polish_pos] / n
            rhs = Xa[:, polish_pos].T @ vz / n \
                - thr_fin[polish_idx] * np.sign(beta_s[polish_idx])
            cand = _polish_active(beta_s, 0.5 * (sub + sub.T), rhs, polish_idx, unpen)
            if cand is not None:
                vr_cand = v * (z - Xs @ cand)
                g_cand = Xs.T @ vr_cand / n
                g_cur = Xs.T @ vr / n
                if _kkt_resid_scaled(g_cand, cand, thr, s, frozen, unpen) <= \
                        _kkt_resid_scaled(g_cur, beta_s, thr, s, frozen, unpen):
                    beta_s, vr = cand, vr_cand
        active = (beta_s != 0.0) | unpen
        sweep_target = max(sweep_target / 10.0, 1e-16)
    g = Xs.T @ vr / n
    resid = _kkt_resid_scaled(g, beta_s, thr, s, frozen, unpen)
    return beta_s, passes, resid <= tol_resid


def _kkt_resid_scaled(g: np.ndarray, beta_s: np.ndarray, thr: np.ndarray,
                      s: np.ndarray, frozen: np.ndarray,
                      unpen: np.ndarray) -> float:
    """Original-coordinate KKT residual from a scaled gradient.

    Active penalised coordinates contribute |S_j - lam w_j sign|;
    unpenalised ones |S_j|; penalised zeros contribute their dual
    excess max(|S_j| - lam w_j, 0).  The scaled residual times s_j is
    the original-coordinate quantity.
    """
    nonzero = beta_s != 0.0
    r = np.zeros_like(g)
    pen_active = nonzero & ~unpen & ~frozen
    r[pen_active] = np.abs(g[pen_active] - thr[pen_active] * np.sign(beta_s[pen_active]))
    r[unpen] = np.abs(g[unpen])
    pen_zero = ~nonzero & ~unpen & ~frozen
    r[pen_zero] = np.maximum(np.abs(g[pen_zero]) - thr[pen_zero], 0.0)
    if not np.any(~frozen):
        return 0.0
    return float(np.max(r[~frozen] * s[~frozen]))


# --------------------------------------------------------------------
# Single-lambda solve and path
# --------------------------------------------------------------------


def _solve(prob: _Problem, lam: float,
           beta_s0: np.ndarray) -> tuple[np.ndarray, int, int, bool, Optional[list]]:
    """Solve at one lambda from a scaled warm start.

    Returns (beta_s, total_passes, outer_iterations, converged,
    objective_trace).
    """
    cfg = prob.config
    tol_resid = cfg.tol * max(1.0, lam)
    if prob.is_gaussian:
        beta_s, passes, ok = _cd_gram(prob, lam, beta_s0, tol_resid, cfg.max_inner_iter)
        return beta_s, passes, 1, ok, None
    y = prob.data.y
    beta_s = beta_s0.copy()
    beta_s[prob.frozen] = 0.0
    passes_total = 0
    pl_old = prob.penalised_objective(beta_s, lam)
    trace = [pl_old]
    converged = False
    outer = 0
    best_resid = np.inf
    since_improved = 0
    for outer in range(1, cfg.max_outer_iter + 1):
        eta = prob.Xs @ beta_s
        mu = link_inverse(prob.family, eta)
        v = variance_weight(prob.family, mu)
        z = eta + (y - mu) / v
        budget = max(cfg.max_inner_iter - passes_total, 1)
        # Inner certificate half the outer target: the working KKT must
        # not be the binding error term when the true score is checked.
        cand, passes, _ = _cd_weighted(prob, z, v, lam, beta_s, 0.5 * tol_resid, budget)
        passes_total += passes
        pl_new = prob.penalised_objective(cand, lam)
        halvings = 0
        while (not np.isfinite(pl_new) or pl_new < pl_old - 1e-10 * (1.0 + abs(pl_old))) and halvings < 12:
            cand = 0.5 * (beta_s + cand)
            pl_new = prob.penalised_objective(cand, lam)
            halvings += 1
        beta_s = cand
        pl_old = pl_new
        trace.append(pl_new)
        # True-score certificate in original coordinates.
        mu_new = link_inverse(prob.family, prob.Xs @ beta_s)
        g_true = prob.Xs.T @ (y - mu_new) / prob.data.n
        thr = np.where(prob.frozen, np.inf, lam * prob.ws)
        resid = _kkt_resid_scaled(g_true, beta_s, thr, prob.s, prob.frozen, prob.unpenalised)
        if resid <= tol_resid:
            converged = True
            break
        if passes_total >= cfg.max_inner_iter:
            break
        # Stall detection: healthy IRLS contracts every step; when the
        # residual stops halving the fit is in separation territory and
        # further iterations only burn time.
        if resid <= 0.5 * best_resid:
            best_resid, since_improved = resid, 0
        else:
            since_improved += 1
            if since_improved >= 4:
                break
    return beta_s, passes_total, outer, converged, trace


def _finalise(prob: _Problem, lam: float, beta_s: np.ndarray, passes: int,
              outer: int, converged: bool, trace: Optional[list] = None) -> LassoFit:
    """Back-transform and attach the optimality certificate.

    The certificate is recomputed from the true score at the returned
    coefficients, independent of any quantity the descent maintained.
    """
    beta = prob.beta_from_scaled(beta_s)
    beta[prob.frozen] = 0.0
    S = score(prob.family, prob.data, beta, 1.0)
    w, frozen, unpen = prob.w, prob.frozen, prob.unpenalised
    kappa = np.zeros(prob.data.p)
    nonzero = beta != 0.0
    kappa[nonzero & ~frozen] = np.sign(beta[nonzero & ~frozen])
    pen_zero = ~nonzero & ~unpen & ~frozen
    if lam > 0:
        kappa[pen_zero] = S[pen_zero] / (lam * w[pen_zero])
    resid = S - lam * np.where(frozen | unpen, 0.0, w) * kappa
    resid[frozen] = 0.0
    kkt = float(np.max(np.abs(resid))) if resid.size else 0.0
    dual_ok = True
    if lam > 0 and np.any(pen_zero):
        dual_ok = bool(np.max(np.abs(kappa[pen_zero])) <= 1.0 + prob.config.tol)
    fit = LassoFit(
        beta=beta,
        lam=lam,
        subgradient=kappa,
        n_iter=passes,
        converged=bool(converged and dual_ok and kkt <= prob.config.tol * max(1.0, lam)),
        kkt_violation=kkt,
        penalty_weights=w.copy(),
        n_outer=outer,
        objective_trace=trace,
    )
    if not fit.converged:
        warnings.warn(
            f"lasso solve at lambda={lam:.3g} did not certify optimality "
            f"(kkt violation {kkt:.3g} after {passes} passes, {outer} outer iterations)",
            RuntimeWarning,
            stacklevel=3,
        )
    return fit


def fit_lasso(data: Dataset, family: FamilySpec, lam: float,
              config: Optional[PenaltyConfig] = None,
              warm_start: Optional[np.ndarray] = None) -> LassoFit:
    """Solve the l1-penalised GLM at one penalty level.

    Parameters
    ----------
    lam : float
        Nonnegative penalty level.  At 0 the solve targets the
        unpenalised maximum likelihood estimate.
    warm_start : array, optional
        Initial coefficients in original coordinates.

    Returns
    -------
    LassoFit
        With ``converged`` true only when the KKT residual certificate
        holds at ``config.tol * max(1, lam)``.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    config = config or PenaltyConfig()
    prob = _Problem(data, family, config.weights_for(data.p), config)
    beta_s0 = np.zeros(data.p) if warm_start is None else prob.beta_to_scaled(warm_start)
    beta_s, passes, outer, ok, trace = _solve(prob, lam, beta_s0)
    return _finalise(prob, lam, beta_s, passes, outer, ok, trace)


def lasso_path(data: Dataset, family: FamilySpec, grid: Sequence[float],
               config: Optional[PenaltyConfig] = None) -> list[LassoFit]:
    """Fit a descending grid of penalty levels with warm starts."""
    config = config or PenaltyConfig()
    grid = np.asarray(grid, dtype=float)
    prob = _Problem(data, family, config.weights_for(data.p), config)
    fits: list[LassoFit] = []
    beta_s = np.zeros(data.p)
    for lam in grid:
        beta_s, passes, outer, ok, trace = _solve(prob, float(lam), beta_s)
        fits.append(_finalise(prob, float(lam), beta_s, passes, outer, ok, trace))
    return fits


def newton_mle(data: Dataset, family: FamilySpec, max_iter: int = 50,
               tol: float = 1e-10) -> LassoFit:
    """Unpenalised maximum likelihood by Newton-Raphson with step halving.

    Returns the estimate wrapped as a lambda = 0 LassoFit so downstream
    bias-correction and combination treat it uniformly.  Non-convergence
    (separation, diverging coefficients, singular information) is
    reported through ``converged`` rather than raised.
    """
    validate_for_family(data, family)
    X, y, n, p = data.X, data.y, data.n, data.p
    beta = np.zeros(p)
    ll_old = _avg_ll_from_eta(family.kind, y, X @ beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        mu = link_inverse(family, eta)
        g = X.T @ (y - mu) / n
        if float(np.max(np.abs(g), initial=0.0)) <= tol:
            converged = True
            break
        v = variance_weight(family, mu)
        H = (X * v[:, None]).T @ X / n
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        cand = beta + step
        ll_new = _avg_ll_from_eta(family.kind, y, X @ cand)
        halvings = 0
        while (not np.isfinite(ll_new) or ll_new < ll_old - 1e-12) and halvings < 30:
            step *= 0.5
            cand = beta + step
            ll_new = _avg_ll_from_eta(family.kind, y, X @ cand)
            halvings += 1
        if not np.isfinite(ll_new):
            break
        beta = cand
        ll_old = ll_new
        if not np.all(np.isfinite(beta)) or float(np.max(np.abs(beta))) > 1e8:
            break
    S = score(family, data, beta, 1.0) if np.all(np.isfinite(beta)) else np.full(p, np.inf)
    kkt = float(np.max(np.abs(S), initial=0.0))
    return LassoFit(
        beta=beta,
        lam=0.0,
        subgradient=np.zeros(p),
        n_iter=it,
        converged=bool(converged and kkt <= 1e-6),
        kkt_violation=kkt,
        penalty_weights=np.zeros(p),
        n_outer=it,
    )


# --------------------------------------------------------------------
# Grid anchoring and cross-validation
# --------------------------------------------------------------------


def _null_beta(data: Dataset, family: FamilySpec, weights: np.ndarray) -> np.ndarray:
    """Coefficients of the fully-shrunk model: zeros, except that
    weight-zero (unpenalised) coordinates are fitted by a restricted
    Newton solve."""
    beta = np.zeros(data.p)
    free = np.flatnonzero(weights == 0.0)
    if free.size:
        sub = Dataset(y=data.y, X=data.X[:, free])
        fit = newton_mle(sub, family)
        beta[free] = fit.beta
    return beta


def lambda_max(data: Dataset, family: FamilySpec,
               weights: Optional[np.ndarray] = None) -> float:
    """Smallest penalty at which the fully-shrunk solution satisfies KKT.

    Computed as max_j |S_j(beta_null)| / w_j over penalised
    coordinates; infinite-weight coordinates are excluded (frozen at
    zero they impose no constraint), and weight-zero coordinates define
    the null model rather than entering the max.
    """
    validate_for_family(data, family)
    w = np.ones(data.p) if weights is None else np.asarray(weights, dtype=float)
    if np.all(np.isinf(w)):
        raise ValueError("all penalty weights are infinite")
    beta0 = _null_beta(data, family, w)
    S = score(family, data, beta0, 1.0)
    mask = np.isfinite(w) & (w > 0)
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(S[mask]) / w[mask]))


def default_grid(lmax: float, config: Optional[PenaltyConfig] = None) -> np.ndarray:
    """Log-spaced descending grid from lambda_max."""
    config = config or PenaltyConfig()
    if config.lambda_grid is not None:
        return config.lambda_grid
    if lmax <= 0:
        return np.zeros(1)
    return np.geomspace(lmax, lmax * config.lambda_min_ratio, config.n_lambda)


class CvPoint(NamedTuple):
    lam: float
    mean_deviance: float
    sd_deviance: float


class CvResult(NamedTuple):
    lambda_star: float
    curve: list[CvPoint]


def _fold_indices(n: int, n_folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    sizes = np.full(n_folds, n // n_folds)
    sizes[: n % n_folds] += 1
    out, start = [], 0
    for size in sizes:
        out.append(np.sort(perm[start : start + size]))
        start += size
    return out


def cv_tune(data: Dataset, family: FamilySpec,
            config: Optional[PenaltyConfig] = None, seed: int = 0) -> CvResult:
    """Select the penalty level by multi-fold cross-validated deviance.

    Folds form a seeded random partition; the winner is the pure
    minimiser of mean out-of-fold deviance (ties resolve to the larger
    penalty, which comes first on the descending grid).  A (fold,
    lambda) cell whose fit fails or does not certify is excluded with a
    warning; a lambda with no surviving folds is excluded entirely.
    """
    config = config or PenaltyConfig()
    if data.n < 2 * config.n_folds:
        raise ValueError(
            f"need at least {2 * config.n_folds} rows for {config.n_folds}-fold CV"
        )
    weights = config.weights_for(data.p)
    grid = config.lambda_grid
    if grid is None:
        grid = default_grid(lambda_max(data, family, weights), config)
    folds = _fold_indices(data.n, config.n_folds, seed)
    # Fold fits feed the deviance curve only: certify them at the
    # looser cv_tol and keep the full tolerance for the final fit.
    fold_config = replace(config, tol=config.cv_tol, lambda_grid=grid)
    dev = np.full((config.n_folds, grid.size), np.nan)
    for f, val_idx in enumerate(folds):
        train_mask = np.ones(data.n, dtype=bool)
        train_mask[val_idx] = False
        train = Dataset(y=data.y[train_mask], X=data.X[train_mask],
                        column_names=data.column_names)
        X_val, y_val = data.X[val_idx], data.y[val_idx]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                fits = lasso_path(train, family, grid, fold_config)
        except (ValueError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"fold {f} failed entirely: {exc}", RuntimeWarning, stacklevel=2)
            continue
        excluded = []
        for k, fit in enumerate(fits):
            if not fit.converged:
                excluded.append(grid[k])
                continue
            mu = link_inverse(family, X_val @ fit.beta)
            d = float(np.mean(unit_deviance(family, y_val, mu)))
            if np.isfinite(d):
                dev[f, k] = d
            else:
                excluded.append(grid[k])
        if excluded:
            warnings.warn(
                f"fold {f}: {len(excluded)} of {grid.size} grid points excluded "
                f"(non-converged or non-finite deviance), e.g. lambda={excluded[0]:.3g}",
                RuntimeWarning,
                stacklevel=2,
            )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_dev = np.nanmean(dev, axis=0)
        sd_dev = np.nanstd(dev, axis=0, ddof=1)
    if np.all(np.isnan(mean_dev)):
        raise RuntimeError("cross-validation failed at every lambda")
    best = int(np.nanargmin(mean_dev))
    curve = [CvPoint(float(l), float(m), float(s))
             for l, m, s in zip(grid, mean_dev, sd_dev)]
    return CvResult(float(grid[best]), curve)


def kkt_residual(fit: LassoFit, data: Dataset, family: FamilySpec,
                 phi: float = 1.0) -> float:
    """Recompute ||S(beta) - lam * w . kappa||_inf for a fit.

    With unit penalty weights this is exactly the stationarity residual
    of the solved problem; it certifies the solve when it is at or
    below the configured tolerance.  ``phi`` should match the working
    dispersion of the solve (1 unless deliberately rescaled).
    """
    S = score(family, data, fit.beta, phi)
    w = fit.penalty_weights if fit.penalty_weights is not None else np.ones(data.p)
    scale = np.where(np.isfinite(w), w, 0.0)
    resid = S - fit.lam * scale * fit.subgradient
    resid[np.isinf(w)] = 0.0
    return float(np.max(np.abs(resid), initial=0.0))
