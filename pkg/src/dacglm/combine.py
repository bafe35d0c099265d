"""Combining per-batch estimates: precision pooling, meta, majority vote.

The divide-and-combine estimator pools batch summaries by adding their
precisions and precision-weighted centers, then performing a single
solve — no per-batch inversion.  The classical meta estimator is the
same pooling applied to unpenalised (lambda = 0) summaries, and the two
code paths are deliberately identical so the reduction is bitwise the
same.  Majority voting restricts to coefficients selected in more than
``omega`` batch fits and pools information only on that block; it
provides point estimates without inference off the block.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .inference import BatchSummary, covariance as batch_covariance

if TYPE_CHECKING:  # annotation-only: avoids a runtime import cycle
    from .lasso import LassoFit

_RIDGE_START = 1e-8
_RIDGE_FACTOR = 10.0
_RIDGE_CAP = 1e-2


@dataclass
class CombinedFit:
    """A combined estimate with its covariance and provenance.

    ``covariance`` is the covariance of the combined estimator itself
    (for precision pooling, the inverse pooled precision).  Voting
    fills it only on the voted block, NaN elsewhere.  The pooled
    precision is retained so the covariance provenance can be audited.
    """

    beta: np.ndarray
    covariance: np.ndarray
    N: int
    K: int
    combiner: str
    per_batch_diagnostics: list = field(default_factory=list)
    pooled_precision: Optional[np.ndarray] = None
    ridge_tau: float = 0.0
    omega: Optional[int] = None
    vote_set: Optional[np.ndarray] = None
    votes: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (beta.size, beta.size):
            raise ValueError(
                f"covariance has shape {cov.shape}, expected ({beta.size}, {beta.size})"
            )
        finite = np.isfinite(cov) & np.isfinite(cov.T)
        if np.any(finite):
            scale = max(1.0, float(np.max(np.abs(cov[finite]))))
            if np.any(np.abs(np.where(finite, cov - cov.T, 0.0)) > 1e-8 * scale):
                raise ValueError("covariance is not symmetric")
        self.beta = beta
        self.covariance = cov

    @property
    def p(self) -> int:
        return self.beta.size


def random_partition(n_total: int, K: int, seed: int) -> list[np.ndarray]:
    """Seeded random partition of range(n_total) into K near-equal batches.

    Batch sizes differ by at most one; remainder rows go to the
    lowest-index batches.  Returns sorted index arrays forming a
    disjoint cover.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > n_total:
        raise ValueError(f"cannot split {n_total} rows into {K} batches")
    perm = np.random.default_rng(seed).permutation(n_total)
    sizes = np.full(K, n_total // K)
    sizes[: n_total % K] += 1
    out, start = [], 0
    for size in sizes:
        out.append(np.sort(perm[start : start + size]))
        start += size
    return out


def _filter_batches(summaries: Sequence[Optional[BatchSummary]],
                    allow_partial: bool) -> tuple[list[BatchSummary], list[int]]:
    """Drop failed (None) batches under the allow_partial policy."""
    failed = [k for k, s in enumerate(summaries) if s is None]
    if failed and not allow_partial:
        raise ValueError(
            f"batch(es) {failed} failed; rerun with allow_partial to combine survivors"
        )
    kept = [s for s in summaries if s is not None]
    if not kept:
        raise ValueError("no surviving batches to combine")
    if failed:
        warnings.warn(
            f"combining {len(kept)} of {len(summaries)} batches; "
            f"failed: {failed}",
            RuntimeWarning,
            stacklevel=3,
        )
    return kept, failed


def _solve_pooled(pooled: np.ndarray, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """One solve for the combined estimate plus the pooled inverse.

    Escalates a recorded ridge when the pooled precision is singular,
    mirroring the per-batch fallback.
    """
    p = pooled.shape[0]
    tau = 0.0
    while True:
        try:
            factor = cho_factor(pooled + tau * np.eye(p) if tau else pooled, lower=True)
            diag = np.abs(np.diag(factor[0]))
            if np.min(diag) <= 1e-7 * np.max(diag):
                raise LinAlgError("effectively singular")
            break
        except LinAlgError:
            tau = _RIDGE_START if tau == 0.0 else tau * _RIDGE_FACTOR
            if tau > _RIDGE_CAP:
                raise LinAlgError(
                    "pooled precision is singular even after ridge escalation"
                ) from None
    beta = cho_solve(factor, vec)
    cov = cho_solve(factor, np.eye(p))
    return beta, 0.5 * (cov + cov.T), tau


def _diagnostics(summaries: Sequence[BatchSummary], failed: list[int]) -> list[dict]:
    rows = [
        {
            "batch": k,
            "n": s.n,
            "lambda": s.lam,
            "phi_hat": s.phi_hat,
            "ridge_tau": s.ridge_tau,
            "kkt_violation": s.kkt_violation,
            "converged": s.converged,
        }
        for k, s in enumerate(summaries)
    ]
    for k in failed:
        rows.append({"batch": k, "failed": True})
    return rows


def _pooled_combine(summaries: Sequence[Optional[BatchSummary]], label: str,
                    allow_partial: bool) -> CombinedFit:
    kept, failed = _filter_batches(summaries, allow_partial)
    p = kept[0].p
    for s in kept[1:]:
        if s.p != p:
            raise ValueError(f"summaries disagree on dimension: {s.p} vs {p}")
    if len(kept) == 1:
        # Exact single-batch collapse: no solve is performed.
        s = kept[0]
        return CombinedFit(
            beta=s.beta_c.copy(),
            covariance=batch_covariance(s) / s.n,
            N=s.n,
            K=1,
            combiner=label,
            per_batch_diagnostics=_diagnostics(kept, failed),
            pooled_precision=s.precision.copy(),
            ridge_tau=0.0,
        )
    pooled = np.zeros((p, p))
    vec = np.zeros(p)
    for s in kept:  # ascending batch index: reduction order is fixed
        pooled += s.precision
        vec += s.precision @ s.beta_c
    beta, cov, tau = _solve_pooled(pooled, vec)
    return CombinedFit(
        beta=beta,
        covariance=cov,
        N=int(sum(s.n for s in kept)),
        K=len(kept),
        combiner=label,
        per_batch_diagnostics=_diagnostics(kept, failed),
        pooled_precision=pooled,
        ridge_tau=tau,
    )


def combine_dac(summaries: Sequence[Optional[BatchSummary]],
                allow_partial: bool = False) -> CombinedFit:
    """Precision-weighted combination of debiased batch estimates.

    beta = (sum_k P_k)^{-1} (sum_k P_k beta_c_k) with P_k the stored
    batch precisions; covariance = (sum_k P_k)^{-1}.  Accumulation runs
    in ascending batch index and only the final solve touches a matrix
    factorisation.
    """
    return _pooled_combine(summaries, "dac", allow_partial)


def combine_meta(summaries: Sequence[Optional[BatchSummary]],
                 allow_partial: bool = False) -> CombinedFit:
    """Classical inverse-variance meta combination of per-batch MLEs.

    Identical pooling to :func:`combine_dac` — by construction the two
    agree bitwise on the same summaries — but requires lambda = 0
    summaries and labels the output accordingly.  Failed batches (None
    entries, e.g. separation in a logistic MLE) raise unless
    ``allow_partial``, in which case survivors are combined with a
    warning and N recomputed.
    """
    for k, s in enumerate(summaries):
        if s is not None and s.lam != 0.0:
            raise ValueError(
                f"meta combination requires lambda=0 summaries; batch {k} has "
                f"lambda={s.lam:g}"
            )
    return _pooled_combine(summaries, "meta", allow_partial)


@dataclass(frozen=True)
class VotingConfig:
    """Majority-vote threshold; a coefficient is kept when selected in
    strictly more than ``omega`` batch fits."""

    omega: int

    def __post_init__(self) -> None:
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")


def vote_set(fits: Sequence["LassoFit"], omega: int) -> np.ndarray:
    """Indices selected in more than omega of the batch fits."""
    votes = np.sum([f.beta != 0.0 for f in fits], axis=0)
    return np.flatnonzero(votes > omega)


def combine_voting(fits: Sequence["LassoFit"], hessians: Sequence[np.ndarray],
                   n_ks: Sequence[int], config: VotingConfig) -> CombinedFit:
    """Majority-voting combination of sparse batch fits.

    ``hessians`` are the per-batch negative score Jacobians evaluated
    at each batch's own fit (positive-definite information weights).
    The estimate is information-weighted on the voted block and exactly
    zero elsewhere; covariance is reported only on the voted block
    (off-block coefficients carry no inference), as the inverse pooled
    block information.
    """
    K = len(fits)
    if K == 0:
        raise ValueError("no fits to combine")
    if not (len(hessians) == len(n_ks) == K):
        raise ValueError("fits, hessians and n_ks must have equal length")
    if config.omega >= K:
        raise ValueError(f"omega={config.omega} must be smaller than K={K}")
    p = fits[0].beta.size
    votes = np.sum([f.beta != 0.0 for f in fits], axis=0)
    selected = np.flatnonzero(votes > config.omega)
    beta = np.zeros(p)
    cov = np.full((p, p), np.nan)
    diagnostics = [
        {"batch": k, "n": int(n_ks[k]), "lambda": fits[k].lam,
         "n_nonzero": fits[k].n_nonzero, "converged": fits[k].converged}
        for k in range(K)
    ]
    if selected.size == 0:
        warnings.warn(
            "empty vote set: no coefficient selected in more than "
            f"{config.omega} batches; returning the zero vector",
            RuntimeWarning,
            stacklevel=2,
        )
        return CombinedFit(
            beta=beta, covariance=cov, N=int(sum(n_ks)), K=K,
            combiner="voting", per_batch_diagnostics=diagnostics,
            omega=config.omega, vote_set=selected, votes=votes,
        )
    block = np.ix_(selected, selected)
    pooled = np.zeros((selected.size, selected.size))
    vec = np.zeros(selected.size)
    for k in range(K):
        H = np.asarray(hessians[k], dtype=float)
        if H.shape != (p, p):
            raise ValueError(f"hessian {k} has shape {H.shape}, expected ({p}, {p})")
        W = n_ks[k] * H[block]
        pooled += W
        vec += W @ fits[k].beta[selected]
    beta_block, cov_block, _ = _solve_pooled(pooled, vec)
    beta[selected] = beta_block
    cov[block] = cov_block
    return CombinedFit(
        beta=beta, covariance=cov, N=int(sum(n_ks)), K=K,
        combiner="voting", per_batch_diagnostics=diagnostics,
        pooled_precision=None, omega=config.omega,
        vote_set=selected, votes=votes,
    )
