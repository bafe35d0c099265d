"""Monte Carlo studies comparing full-data and divide-and-combine fits.

Each replicate draws a fresh compound-symmetric design, sparse
coefficient vector and response, then runs every requested method on
the identical data: full-data GLM, full-data lasso with and without
post-fit inference, and the three distributed methods (majority voting,
classical meta-analysis, precision-weighted combination).  Metrics
follow the usual selection/inference scheme: sensitivity, specificity,
per-set mean squared error and absolute bias, and — for the methods
that provide inference — coverage and mean reported standard error.

Replicates are independent and seeded by (seed, replicate), so results
are identical for any worker count; aggregation is fixed in replicate
order.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .combine import VotingConfig, combine_dac, combine_meta, combine_voting, random_partition
from .engine import child_seed
from .families import (
    Dataset,
    FamilyKind,
    FamilySpec,
    dispersion_estimate,
    neg_hessian,
)
from .inference import BatchSummary, WaldRow, debias, wald_inference
from .lasso import LassoFit, PenaltyConfig, cv_tune, fit_lasso, newton_mle

ALL_METHODS = ("GLM", "LASSO", "LASSOINF", "VOTING", "META", "MODAC")
INFERENCE_METHODS = frozenset({"GLM", "LASSOINF", "META", "MODAC"})
DISTRIBUTED_METHODS = frozenset({"VOTING", "META", "MODAC"})

# Nonzero coefficient magnitudes used when the config does not set one.
DEFAULT_SIGNALS = {
    FamilyKind.GAUSSIAN: 0.3,
    FamilyKind.LOGISTIC: 0.3,
    FamilyKind.POISSON: 0.1,
}


@dataclass
class SimConfig:
    """One study configuration.

    ``signal`` of None resolves to the family default (0.3 gaussian,
    0.3 logistic, 0.1 poisson).  ``omega`` of None resolves to K // 2.
    ``fix_signal_positions`` freezes the signal support across
    replicates instead of redrawing it.
    """

    family: FamilySpec
    N: int = 2000
    p: int = 50
    K: int = 4
    s0: int = 10
    signal: Optional[float] = None
    rho: float = 0.8
    n_reps: int = 200
    seed: int = 0
    methods: tuple = ALL_METHODS
    level: float = 0.95
    omega: Optional[int] = None
    omega_sweep: bool = False
    fix_signal_positions: bool = False
    phi: float = 1.0
    workers: int = 1
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)

    def __post_init__(self) -> None:
        if self.s0 > self.p:
            raise ValueError("s0 cannot exceed p")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")
        if self.N < 2 * self.K:
            raise ValueError("N too small for K batches")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; valid: {list(ALL_METHODS)}")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must be in (0, 1)")

    @property
    def signal_value(self) -> float:
        return DEFAULT_SIGNALS[self.family.kind] if self.signal is None else self.signal

    @property
    def omega_value(self) -> int:
        return self.K // 2 if self.omega is None else self.omega

    def to_dict(self) -> dict:
        return {
            "family": self.family.kind.value,
            "N": self.N, "p": self.p, "K": self.K, "s0": self.s0,
            "signal": self.signal_value, "rho": self.rho,
            "n_reps": self.n_reps, "seed": self.seed,
            "methods": list(self.methods), "level": self.level,
            "omega": self.omega_value, "omega_sweep": self.omega_sweep,
            "fix_signal_positions": self.fix_signal_positions,
            "phi": self.phi, "workers": self.workers,
        }


@dataclass
class MetricsRow:
    """Selection and inference metrics for one method (one replicate,
    or averaged over replicates)."""

    method: str
    sensitivity: float = np.nan
    specificity: float = np.nan
    mse_signal: float = np.nan
    mse_null: float = np.nan
    abs_bias_signal: float = np.nan
    abs_bias_null: float = np.nan
    coverage_signal: Optional[float] = None
    coverage_null: Optional[float] = None
    asymp_se_signal: Optional[float] = None
    asymp_se_null: Optional[float] = None
    wall_time_s: float = 0.0


# --------------------------------------------------------------------
# Data generation
# --------------------------------------------------------------------


def gen_design(n: int, p: int, rho: float, seed: int) -> np.ndarray:
    """Rows i.i.d. normal with unit variances and constant correlation rho.

    Built as x = sqrt(rho) z0 1 + sqrt(1-rho) z with independent
    standard normal z0 (shared within a row) and z.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must be in [0, 1)")
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((n, 1))
    z = rng.standard_normal((n, p))
    return np.sqrt(rho) * z0 + np.sqrt(1.0 - rho) * z


def gen_coefficients(p: int, s0: int, signal: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """s0 uniformly drawn positions set to ``signal``, the rest exactly 0."""
    if s0 > p:
        raise ValueError("s0 cannot exceed p")
    rng = np.random.default_rng(seed)
    positions = np.sort(rng.choice(p, size=s0, replace=False))
    beta0 = np.zeros(p)
    beta0[positions] = signal
    return beta0, positions


def gen_response(X: np.ndarray, beta0: np.ndarray, family: FamilySpec,
                 phi: float, seed: int) -> np.ndarray:
    """Draw the response given the linear predictor X beta0."""
    rng = np.random.default_rng(seed)
    eta = X @ beta0
    if family.kind is FamilyKind.GAUSSIAN:
        return eta + np.sqrt(phi) * rng.standard_normal(X.shape[0])
    if family.kind is FamilyKind.LOGISTIC:
        return (rng.random(X.shape[0]) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    with np.errstate(over="ignore"):
        mu = np.exp(eta)
    if not np.all(np.isfinite(mu)) or np.any(mu > 1e15):
        bad = int(np.argmax(np.where(np.isfinite(mu), mu, np.inf)))
        raise ValueError(
            f"poisson mean overflow at row {bad}: eta = {eta[bad]:.3f}"
        )
    return rng.poisson(mu).astype(float)


# --------------------------------------------------------------------
# Metric evaluation
# --------------------------------------------------------------------


def evaluate(method: str, estimate: np.ndarray,
             wald_rows: Optional[Sequence[WaldRow]], beta0: np.ndarray,
             signal_set: np.ndarray) -> MetricsRow:
    """Score one method's estimate against the truth.

    Inference methods select a coefficient when its confidence interval
    excludes zero; sparse methods (LASSO, VOTING) by a nonzero
    estimate.  Coverage and mean reported standard error are filled
    only for inference methods.
    """
    p = beta0.size
    estimate = np.asarray(estimate, dtype=float)
    if estimate.shape != (p,):
        raise ValueError(f"estimate has shape {estimate.shape}, expected ({p},)")
    is_signal = np.zeros(p, dtype=bool)
    is_signal[signal_set] = True
    inference = method in INFERENCE_METHODS
    if inference:
        if wald_rows is None or len(wald_rows) != p:
            raise ValueError(f"method {method} requires a full inference table")
        lo = np.array([r.ci_lo for r in wald_rows])
        hi = np.array([r.ci_hi for r in wald_rows])
        se = np.array([r.std_error for r in wald_rows])
        selected = (lo > 0.0) | (hi < 0.0)
        covered = (lo <= beta0) & (beta0 <= hi)
    else:
        selected = estimate != 0.0
    err = estimate - beta0

    def _mean(values: np.ndarray, mask: np.ndarray) -> float:
        return float(np.mean(values[mask])) if np.any(mask) else np.nan

    row = MetricsRow(
        method=method,
        sensitivity=_mean(selected.astype(float), is_signal),
        specificity=_mean((~selected).astype(float), ~is_signal),
        mse_signal=_mean(err**2, is_signal),
        mse_null=_mean(err**2, ~is_signal),
        abs_bias_signal=_mean(np.abs(err), is_signal),
        abs_bias_null=_mean(np.abs(err), ~is_signal),
    )
    if inference:
        row.coverage_signal = _mean(covered.astype(float), is_signal)
        row.coverage_null = _mean(covered.astype(float), ~is_signal)
        row.asymp_se_signal = _mean(se, is_signal)
        row.asymp_se_null = _mean(se, ~is_signal)
    return row


# --------------------------------------------------------------------
# Per-replicate execution
# --------------------------------------------------------------------


def _mle_summary(data: Dataset, family: FamilySpec) -> tuple[BatchSummary, LassoFit]:
    """Unpenalised fit wrapped in the common summary container."""
    fit = newton_mle(data, family)
    if not fit.converged:
        raise RuntimeError("maximum likelihood fit did not converge")
    phi = dispersion_estimate(family, data, fit)
    return debias(fit, data, family, phi, auto_ridge=True), fit


def _lasso_summary(data: Dataset, family: FamilySpec, penalty: PenaltyConfig,
                   seed: int) -> tuple[BatchSummary, LassoFit]:
    lam, _ = cv_tune(data, family, penalty, seed)
    fit = fit_lasso(data, family, lam, penalty)
    if not fit.converged:
        raise RuntimeError(f"lasso fit did not converge at lambda={lam:.4g}")
    phi = dispersion_estimate(family, data, fit)
    return debias(fit, data, family, phi, auto_ridge=True), fit


def run_replicate(config: SimConfig, rep: int) -> list[dict]:
    """Run all requested methods on one replicate's data.

    Returns one record per method (and one per omega for a voting
    sweep), each carrying the metric fields or a failure marker.
    """
    beta_seed = child_seed(config.seed, "beta") if config.fix_signal_positions \
        else child_seed(config.seed, "rep", rep, "beta")
    X = gen_design(config.N, config.p, config.rho, child_seed(config.seed, "rep", rep, "x"))
    beta0, signal_set = gen_coefficients(config.p, config.s0, config.signal_value, beta_seed)
    y = gen_response(X, beta0, config.family, config.phi,
                     child_seed(config.seed, "rep", rep, "y"))
    data = Dataset(y=y, X=X)
    records: list[dict] = []

    def record(method: str, estimate, wald_rows, seconds: float, **extra) -> None:
        row = evaluate(method, estimate, wald_rows, beta0, signal_set)
        row.wall_time_s = seconds
        rec = {"rep": rep, "failed": False, **asdict(row),
               "signal_set": signal_set.tolist(), **extra}
        records.append(rec)

    def record_failure(method: str, error: str) -> None:
        records.append({"rep": rep, "method": method, "failed": True, "error": error})

    # Full-data methods share the dataset; the lasso fit is shared
    # between LASSO and LASSOINF with per-stage time accounting.
    if "GLM" in config.methods:
        t0 = time.perf_counter()
        try:
            summary, _ = _mle_summary(data, config.family)
            rows = wald_inference(summary, config.level)
            record("GLM", summary.beta_c, rows, time.perf_counter() - t0)
        except Exception as exc:
            record_failure("GLM", str(exc))
    if "LASSO" in config.methods or "LASSOINF" in config.methods:
        t0 = time.perf_counter()
        try:
            lam, _ = cv_tune(data, config.family, config.penalty,
                             child_seed(config.seed, "rep", rep, "cv"))
            full_fit = fit_lasso(data, config.family, lam, config.penalty)
            if not full_fit.converged:
                raise RuntimeError("full-data lasso did not converge")
            t_fit = time.perf_counter() - t0
            if "LASSO" in config.methods:
                record("LASSO", full_fit.beta, None, t_fit, lam=lam)
            if "LASSOINF" in config.methods:
                t1 = time.perf_counter()
                phi = dispersion_estimate(config.family, data, full_fit)
                summary = debias(full_fit, data, config.family, phi, auto_ridge=True)
                rows = wald_inference(summary, config.level)
                record("LASSOINF", summary.beta_c, rows,
                       t_fit + time.perf_counter() - t1, lam=lam)
        except Exception as exc:
            if "LASSO" in config.methods:
                record_failure("LASSO", str(exc))
            if "LASSOINF" in config.methods:
                record_failure("LASSOINF", str(exc))

    if not (DISTRIBUTED_METHODS & set(config.methods)):
        return records
    parts = random_partition(config.N, config.K,
                             child_seed(config.seed, "rep", rep, "partition"))
    batches = [Dataset(y=y[idx], X=X[idx]) for idx in parts]

    if "MODAC" in config.methods or "VOTING" in config.methods:
        summaries, fits, hessians = [], [], []
        t_fit_k, t_deb_k, t_hess_k = [], [], []
        lasso_error = None
        for k, batch in enumerate(batches):
            t0 = time.perf_counter()
            try:
                lam, _ = cv_tune(batch, config.family, config.penalty,
                                 child_seed(config.seed, "rep", rep, "batch", k))
                fit = fit_lasso(batch, config.family, lam, config.penalty)
                if not fit.converged:
                    raise RuntimeError(f"batch {k} lasso did not converge")
            except Exception as exc:
                lasso_error = f"batch {k}: {exc}"
                break
            t_fit_k.append(time.perf_counter() - t0)
            fits.append(fit)
            if "MODAC" in config.methods:
                t1 = time.perf_counter()
                try:
                    phi = dispersion_estimate(config.family, batch, fit)
                    summaries.append(debias(fit, batch, config.family, phi,
                                            auto_ridge=True))
                except Exception as exc:
                    lasso_error = f"batch {k}: {exc}"
                    break
                t_deb_k.append(time.perf_counter() - t1)
            if "VOTING" in config.methods:
                t1 = time.perf_counter()
                hessians.append(neg_hessian(config.family, batch, fit.beta, 1.0))
                t_hess_k.append(time.perf_counter() - t1)
        if "MODAC" in config.methods:
            if lasso_error is not None:
                record_failure("MODAC", lasso_error)
            else:
                t0 = time.perf_counter()
                try:
                    combined = combine_dac(summaries)
                    rows = wald_inference(combined, config.level)
                    t_comb = time.perf_counter() - t0
                    seconds = max(f + d for f, d in zip(t_fit_k, t_deb_k)) + t_comb
                    record("MODAC", combined.beta, rows, seconds)
                except Exception as exc:
                    record_failure("MODAC", str(exc))
        if "VOTING" in config.methods:
            if lasso_error is not None:
                record_failure("VOTING", lasso_error)
            else:
                omegas = range(config.K) if config.omega_sweep else [config.omega_value]
                n_ks = [b.n for b in batches]
                for omega in omegas:
                    label = f"VOTING(omega={omega})" if config.omega_sweep else "VOTING"
                    t0 = time.perf_counter()
                    try:
                        with warnings.catch_warnings():
                            warnings.simplefilter("ignore", RuntimeWarning)
                            combined = combine_voting(fits, hessians, n_ks,
                                                      VotingConfig(omega=omega))
                        t_comb = time.perf_counter() - t0
                        seconds = max(f + h for f, h in zip(t_fit_k, t_hess_k)) + t_comb
                        record(label, combined.beta, None, seconds, omega=omega)
                    except Exception as exc:
                        record_failure(label, str(exc))

    if "META" in config.methods:
        meta_summaries: list[Optional[BatchSummary]] = []
        t_k = []
        for batch in batches:
            t0 = time.perf_counter()
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    summary, _ = _mle_summary(batch, config.family)
                meta_summaries.append(summary)
            except Exception:
                meta_summaries.append(None)
            t_k.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        try:
            combined = combine_meta(meta_summaries, allow_partial=False)
            rows = wald_inference(combined, config.level)
            seconds = max(t_k) + time.perf_counter() - t0
            record("META", combined.beta, rows, seconds)
        except Exception as exc:
            record_failure("META", str(exc))
    return records


def _replicate_star(args) -> list[dict]:
    return run_replicate(*args)


# --------------------------------------------------------------------
# Study driver and output artifacts
# --------------------------------------------------------------------


@dataclass
class StudyResult:
    config: SimConfig
    summary: list[dict]
    raw: list[dict]


_METRIC_FIELDS = (
    "sensitivity", "specificity", "mse_signal", "mse_null",
    "abs_bias_signal", "abs_bias_null", "coverage_signal", "coverage_null",
    "asymp_se_signal", "asymp_se_null", "wall_time_s",
)


def run_study(config: SimConfig) -> StudyResult:
    """Run every replicate and average the per-method metrics.

    Replicates may execute in a worker pool; each draws its own seeded
    data, so the output is identical for any worker count.  A method
    failure in a replicate is recorded as a failed row and excluded
    from that method's averages.
    """
    args = [(config, r) for r in range(config.n_reps)]
    if config.workers > 1 and config.n_reps > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, config.n_reps)) as pool:
            per_rep = list(pool.map(_replicate_star, args))
    else:
        per_rep = [run_replicate(config, r) for r in range(config.n_reps)]
    raw = [rec for recs in per_rep for rec in recs]

    methods_seen: list[str] = []
    for rec in raw:
        if rec["method"] not in methods_seen:
            methods_seen.append(rec["method"])
    summary = []
    for method in methods_seen:
        rows = [r for r in raw if r["method"] == method]
        ok = [r for r in rows if not r["failed"]]
        entry: dict = {
            "method": method,
            "n_reps": len(rows),
            "n_failed": len(rows) - len(ok),
        }
        for fld in _METRIC_FIELDS:
            values = [
                r[fld] for r in ok
                if r.get(fld) is not None and not np.isnan(r[fld])
            ]
            entry[fld] = float(np.mean(values)) if values else None
        summary.append(entry)
    return StudyResult(config=config, summary=summary, raw=raw)


def write_study_outputs(result: StudyResult, out_dir) -> dict[str, Path]:
    """Write study_summary.csv, study_raw.jsonl and the plot-ready
    long-format study_long.csv (config echoed into every artifact)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config.to_dict()
    paths = {}

    summary_path = out_dir / "study_summary.csv"
    fields = ["method", "n_reps", "n_failed", *_METRIC_FIELDS]
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in result.summary:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields})
    paths["summary"] = summary_path

    raw_path = out_dir / "study_raw.jsonl"
    with open(raw_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": cfg}, sort_keys=True) + "\n")
        for rec in result.raw:
            fh.write(json.dumps(rec, sort_keys=True, default=float) + "\n")
    paths["raw"] = raw_path

    long_path = out_dir / "study_long.csv"
    cfg_cols = ["family", "N", "p", "K", "s0", "signal", "rho", "level", "seed"]
    n_k = cfg["N"] // cfg["K"]
    with open(long_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cfg_cols + ["n_k", "p_over_nk", "rep", "method", "metric", "value"])
        base = [cfg[c] for c in cfg_cols]
        for rec in result.raw:
            if rec["failed"]:
                writer.writerow(base + [n_k, cfg["p"] / n_k, rec["rep"],
                                        rec["method"], "failed", 1.0])
                continue
            for fld in _METRIC_FIELDS:
                value = rec.get(fld)
                if value is None or (isinstance(value, float) and np.isnan(value)):
                    continue
                writer.writerow(base + [n_k, cfg["p"] / n_k, rec["rep"],
                                        rec["method"], fld, value])
    paths["long"] = long_path

    config_path = out_dir / "study_config.json"
    with open(config_path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["config"] = config_path
    return paths
