"""One-step bias correction and Wald inference for penalised GLM fits.

A solved lasso fit is corrected by a single Newton step on the
unpenalised likelihood, giving an asymptotically normal estimator whose
confidence density is carried around as the pair (center, precision
with precision = n times the inverse covariance).  That pair — a
BatchSummary — is the unit of exchange between per-batch workers and
the combiners, and has a stable JSON wire format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import norm

from .families import Dataset, FamilySpec, neg_hessian, score
from .lasso import LassoFit

# Ridge escalation ladder: start, multiplier, cap.
_RIDGE_START = 1e-8
_RIDGE_FACTOR = 10.0
_RIDGE_CAP = 1e-2


@dataclass(frozen=True)
class BatchSummary:
    """Debiased estimate plus precision for one data batch.

    ``precision`` stores n times the inverse covariance of the batch
    estimator, so combiners can pool batches by simple addition.
    """

    beta_c: np.ndarray
    precision: np.ndarray
    n: int
    phi_hat: float
    lam: float
    ridge_tau: float = 0.0
    kkt_violation: float = 0.0
    converged: bool = True

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta_c, dtype=float)
        prec = np.asarray(self.precision, dtype=float)
        if prec.shape != (beta.size, beta.size):
            raise ValueError(
                f"precision has shape {prec.shape}, expected ({beta.size}, {beta.size})"
            )
        scale = max(1.0, float(np.max(np.abs(prec))))
        if float(np.max(np.abs(prec - prec.T))) > 1e-10 * scale:
            raise ValueError("precision matrix is not symmetric")
        if self.n < 1:
            raise ValueError("batch size must be at least 1")
        if self.phi_hat <= 0:
            raise ValueError("phi_hat must be positive")
        object.__setattr__(self, "beta_c", beta)
        object.__setattr__(self, "precision", 0.5 * (prec + prec.T))

    @property
    def p(self) -> int:
        return self.beta_c.size


@dataclass(frozen=True)
class ConfidenceDensity:
    """Normal confidence density up to proportionality.

    Represents h(b) proportional to exp(-0.5 (b - center)' precision
    (b - center)); the log normaliser is never materialised.
    """

    center: np.ndarray
    precision: np.ndarray
    log_normalizer_omitted: bool = True

    def log_density(self, beta0: np.ndarray) -> float:
        """Unnormalised log density at beta0."""
        d = np.asarray(beta0, dtype=float) - self.center
        return -0.5 * float(d @ self.precision @ d)


def _factor_with_ridge(M: np.ndarray, tau: float, auto: bool):
    """Cholesky-factor M + tau*I, escalating tau when allowed.

    Returns (factorisation, M_ridged, tau_used).  Escalation multiplies
    by 10 from 1e-8 until the factorisation succeeds, capped at 1e-2.
    A factorisation whose pivots span more than the float-precision
    range counts as singular: exact collinearity often survives the
    Cholesky with a rounding-level pivot.
    """
    p = M.shape[0]
    eye = np.eye(p)
    tau_used = float(tau)
    while True:
        try:
            Mr = M + tau_used * eye if tau_used > 0 else M
            factor = cho_factor(Mr, lower=True)
            diag = np.abs(np.diag(factor[0]))
            if np.min(diag) <= 1e-7 * np.max(diag):
                raise LinAlgError("effectively singular")
            return factor, Mr, tau_used
        except LinAlgError:
            if not auto:
                raise LinAlgError(
                    "information matrix is singular at ridge_tau="
                    f"{tau_used:g}; rerun with a positive ridge_tau or "
                    "enable automatic ridge escalation"
                ) from None
            nxt = _RIDGE_START if tau_used == 0.0 else tau_used * _RIDGE_FACTOR
            if nxt > _RIDGE_CAP:
                raise LinAlgError(
                    f"information matrix is singular even at ridge_tau={_RIDGE_CAP:g}"
                ) from None
            tau_used = nxt


def debias(fit: LassoFit, data: Dataset, family: FamilySpec, phi: float,
           ridge_tau: float = 0.0, auto_ridge: bool = False,
           force: bool = False) -> BatchSummary:
    """One-step Newton update of a penalised fit on the unpenalised likelihood.

    Computes beta_c = beta + M^{-1} S(beta) with M the (optionally
    ridged) negative average-score Jacobian at dispersion ``phi``, and
    stores precision = n * M.  The correction term itself is invariant
    to ``phi``; the dispersion only scales the precision.

    Raises when the fit did not converge (unless ``force``) and when M
    is singular at ridge_tau = 0 without ``auto_ridge``.
    """
    if phi <= 0:
        raise ValueError("phi must be positive")
    if ridge_tau < 0:
        raise ValueError("ridge_tau must be nonnegative")
    if not fit.converged and not force:
        raise ValueError(
            "refusing to debias a non-converged fit (pass force=True to override)"
        )
    M = neg_hessian(family, data, fit.beta, phi)
    factor, Mr, tau_used = _factor_with_ridge(M, ridge_tau, auto_ridge)
    S = score(family, data, fit.beta, phi)
    beta_c = fit.beta + cho_solve(factor, S)
    return BatchSummary(
        beta_c=beta_c,
        precision=data.n * Mr,
        n=data.n,
        phi_hat=float(phi),
        lam=fit.lam,
        ridge_tau=tau_used,
        kkt_violation=fit.kkt_violation,
        converged=fit.converged,
    )


def debias_subgradient_route(fit: LassoFit, data: Dataset, family: FamilySpec,
                             phi: float, ridge_tau: float = 0.0) -> np.ndarray:
    """Cross-check route: beta + M^{-1} (lam * w . kappa) / phi.

    Exactly equals the score route when the KKT condition holds; kept
    as a diagnostic only (the score route is robust to small KKT
    violations).  The kappa identity holds at the solve's unit working
    dispersion, hence the division by phi.
    """
    M = neg_hessian(family, data, fit.beta, phi)
    factor, _, _ = _factor_with_ridge(M, ridge_tau, auto=False)
    w = fit.penalty_weights if fit.penalty_weights is not None else np.ones(data.p)
    scale = np.where(np.isfinite(w), w, 0.0)
    return fit.beta + cho_solve(factor, fit.lam * scale * fit.subgradient / phi)


def covariance(summary: BatchSummary) -> np.ndarray:
    """Per-observation covariance (precision / n)^{-1}.

    The variance of the batch estimator is this matrix divided by n.
    Raises on a singular precision.
    """
    factor = cho_factor(np.asarray(summary.precision, dtype=float), lower=True)
    cov = summary.n * cho_solve(factor, np.eye(summary.p))
    return 0.5 * (cov + cov.T)


def confidence_density(summary: BatchSummary) -> ConfidenceDensity:
    """The batch confidence density: centered at the debiased estimate
    with the summary's own precision object."""
    return ConfidenceDensity(center=summary.beta_c, precision=summary.precision)


@dataclass(frozen=True)
class WaldRow:
    coefficient: str
    estimate: float
    std_error: float
    ci_lo: float
    ci_hi: float
    p_value: float
    degenerate: bool = False


def wald_inference(obj: Union[BatchSummary, "CombinedFitLike"], level: float = 0.95,
                   names: Optional[Sequence[str]] = None) -> list[WaldRow]:
    """Per-coefficient Wald intervals and two-sided normal p-values.

    Accepts a BatchSummary (standard errors from the batch precision)
    or any combined fit exposing ``beta`` and ``covariance`` (standard
    errors straight from the covariance diagonal).  A zero standard
    error with a nonzero estimate yields p = 0 and a degenerate,
    zero-width interval, flagged as such; NaN variances (coefficients a
    combiner provides no inference for) propagate as NaN rows.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if hasattr(obj, "beta_c"):
        est = np.asarray(obj.beta_c, dtype=float)
        var = np.diag(covariance(obj)) / obj.n
    elif hasattr(obj, "covariance"):
        est = np.asarray(obj.beta, dtype=float)
        var = np.diag(np.asarray(obj.covariance, dtype=float)).copy()
    else:
        raise TypeError("expected a BatchSummary or a combined fit")
    p = est.size
    if names is None:
        names = [f"x{j}" for j in range(p)]
    elif len(names) != p:
        raise ValueError(f"{len(names)} names for {p} coefficients")
    z = float(norm.ppf(1.0 - (1.0 - level) / 2.0))
    rows = []
    with np.errstate(invalid="ignore"):
        se = np.sqrt(var)
    for j in range(p):
        sj, ej = float(se[j]), float(est[j])
        if np.isnan(sj):
            rows.append(WaldRow(names[j], ej, math.nan, math.nan, math.nan,
                                math.nan, degenerate=False))
        elif sj == 0.0:
            rows.append(WaldRow(names[j], ej, 0.0, ej, ej,
                                0.0 if ej != 0.0 else 1.0, degenerate=True))
        else:
            pj = 2.0 * float(norm.sf(abs(ej) / sj))
            rows.append(WaldRow(names[j], ej, sj, ej - z * sj, ej + z * sj, pj))
    return rows


# --------------------------------------------------------------------
# Wire format: the unit of exchange between workers and the combiner
# --------------------------------------------------------------------


def summary_to_dict(summary: BatchSummary) -> dict:
    """Self-describing JSON-ready record; the precision is stored as
    its lower triangle in row-major order."""
    p = summary.p
    tril = summary.precision[np.tril_indices(p)]
    return {
        "p": p,
        "n": summary.n,
        "phi_hat": summary.phi_hat,
        "lambda": summary.lam,
        "ridge_tau": summary.ridge_tau,
        "beta_c": summary.beta_c.tolist(),
        "precision": tril.tolist(),
        "kkt_violation": summary.kkt_violation,
        "converged": summary.converged,
    }


def summary_from_dict(record: dict) -> BatchSummary:
    try:
        p = int(record["p"])
        beta_c = np.asarray(record["beta_c"], dtype=float)
        tril = np.asarray(record["precision"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed batch summary record: {exc}") from exc
    if beta_c.shape != (p,):
        raise ValueError(f"beta_c has length {beta_c.size}, expected {p}")
    expected = p * (p + 1) // 2
    if tril.shape != (expected,):
        raise ValueError(
            f"precision triangle has length {tril.size}, expected {expected}"
        )
    prec = np.zeros((p, p))
    prec[np.tril_indices(p)] = tril
    prec = prec + np.tril(prec, -1).T
    return BatchSummary(
        beta_c=beta_c,
        precision=prec,
        n=int(record["n"]),
        phi_hat=float(record["phi_hat"]),
        lam=float(record["lambda"]),
        ridge_tau=float(record.get("ridge_tau", 0.0)),
        kkt_violation=float(record.get("kkt_violation", 0.0)),
        converged=bool(record.get("converged", True)),
    )


def save_summary(summary: BatchSummary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary_to_dict(summary), fh, sort_keys=True)
        fh.write("\n")


def load_summary(path) -> BatchSummary:
    with open(path, encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"cannot parse batch summary {path}: {exc}") from exc
    return summary_from_dict(record)
