"""End-to-end pipeline: ingest, partition, fit batches in parallel, reduce.

Every batch runs cv-tune -> fit -> debias in its own worker with a seed
derived from (pipeline seed, batch index), so results are invariant to
worker count and scheduling; the reduction consumes batch results in
ascending index order.  Sharded inputs are loaded inside the workers —
the parent never materialises more than the shards currently being
processed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .combine import (
    CombinedFit,
    VotingConfig,
    combine_dac,
    combine_meta,
    combine_voting,
    random_partition,
)
from .families import (
    Dataset,
    FamilySpec,
    dispersion_estimate,
    neg_hessian,
    validate_for_family,
)
from .inference import BatchSummary, debias, save_summary
from .lasso import PenaltyConfig, cv_tune, fit_lasso, lasso_path, default_grid, lambda_max, newton_mle

INTERCEPT_NAME = "(intercept)"


def child_seed(seed: int, *keys) -> int:
    """Stable 63-bit child seed from a root seed and a key path.

    Hash-derived so batch/replicate streams do not depend on worker
    assignment or execution order.
    """
    material = repr((int(seed),) + tuple(keys)).encode()
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big") >> 1


# --------------------------------------------------------------------
# CSV ingestion and shard manifests
# --------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Response column name plus an optional explicit feature list.

    Without an explicit list, every non-response column is a feature.
    """

    response: str
    features: Optional[tuple[str, ...]] = None


def load_csv(path, schema: CsvSchema, family: Optional[FamilySpec] = None) -> Dataset:
    """Read a headered CSV into a Dataset.

    Rows with unparseable or non-finite cells are rejected with the
    file line number and column name; when a family is given, the
    response column is validated against it.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if schema.response not in header:
            raise ValueError(f"{path}: missing response column {schema.response!r}")
        feature_names = list(schema.features) if schema.features is not None else [
            h for h in header if h != schema.response
        ]
        for name in feature_names:
            if name not in header:
                raise ValueError(f"{path}: missing feature column {name!r}")
        y_idx = header.index(schema.response)
        f_idx = [header.index(name) for name in feature_names]
        y_rows: list[float] = []
        x_rows: list[list[float]] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            parsed = []
            for col, name in zip([y_idx] + f_idx, [schema.response] + feature_names):
                try:
                    value = float(row[col])
                except (ValueError, IndexError):
                    cell = row[col] if col < len(row) else "<missing>"
                    raise ValueError(
                        f"{path}: line {line_no}, column {name!r}: "
                        f"cannot parse {cell!r} as a number"
                    ) from None
                if not math.isfinite(value):
                    raise ValueError(
                        f"{path}: line {line_no}, column {name!r}: non-finite value"
                    )
                parsed.append(value)
            y_rows.append(parsed[0])
            x_rows.append(parsed[1:])
    if not y_rows:
        raise ValueError(f"{path}: no data rows")
    data = Dataset(
        y=np.asarray(y_rows), X=np.asarray(x_rows), column_names=feature_names
    )
    if family is not None:
        validate_for_family(data, family)
    return data


def with_intercept(data: Dataset) -> Dataset:
    """Prepend an all-ones column (left unpenalised by the solver)."""
    names = list(data.column_names) if data.column_names is not None else [
        f"x{j}" for j in range(data.p)
    ]
    return Dataset(
        y=data.y,
        X=np.column_stack([np.ones(data.n), data.X]),
        column_names=[INTERCEPT_NAME] + names,
    )


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass(frozen=True)
class ShardInfo:
    path: str
    row_count: int
    checksum: str = ""


@dataclass(frozen=True)
class ShardManifest:
    shards: tuple[ShardInfo, ...]
    schema: CsvSchema

    def __post_init__(self) -> None:
        if not self.shards:
            raise ValueError("manifest lists no shards")
        for s in self.shards:
            if s.row_count <= 0:
                raise ValueError(f"shard {s.path} has nonpositive row count")


def save_manifest(manifest: ShardManifest, path) -> None:
    record = {
        "schema": {
            "response": manifest.schema.response,
            "features": list(manifest.schema.features) if manifest.schema.features else None,
        },
        "shards": [
            {"path": s.path, "row_count": s.row_count, "checksum": s.checksum}
            for s in manifest.shards
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> ShardManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    try:
        schema = CsvSchema(
            response=record["schema"]["response"],
            features=tuple(record["schema"]["features"]) if record["schema"].get("features") else None,
        )
        shards = tuple(
            ShardInfo(
                path=str(path.parent / s["path"]),
                row_count=int(s["row_count"]),
                checksum=s.get("checksum", ""),
            )
            for s in record["shards"]
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed manifest: {exc}") from exc
    return ShardManifest(shards=shards, schema=schema)


def partition_csv(path, schema: CsvSchema, K: int, seed: int, out_dir) -> Path:
    """Shard a CSV into K near-equal random pieces plus a manifest.

    The same seeded partition as the in-memory pipeline, so sharded and
    single-file runs agree batch-for-batch.
    """
    path, out_dir = Path(path), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if schema.response not in [h.strip() for h in header]:
        raise ValueError(f"{path}: missing response column {schema.response!r}")
    if len(rows) < K:
        raise ValueError(f"cannot split {len(rows)} rows into {K} shards")
    parts = random_partition(len(rows), K, child_seed(seed, "partition"))
    infos = []
    for k, idx in enumerate(parts):
        shard_name = f"shard_{k:03d}.csv"
        shard_path = out_dir / shard_name
        with open(shard_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in idx:
                writer.writerow(rows[i])
        infos.append(ShardInfo(path=shard_name, row_count=len(idx),
                               checksum=_sha256(shard_path)))
    manifest = ShardManifest(shards=tuple(infos), schema=schema)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path


# --------------------------------------------------------------------
# Pipeline configuration and batch workers
# --------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Everything run_pipeline needs besides the input data."""

    family: FamilySpec
    K: int = 1
    combiner: str = "dac"  # dac | meta | voting
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    seed: int = 0
    workers: int = 1
    allow_partial: bool = False
    common_phi: bool = False
    lambda_mode: str = "cv"  # cv | fixed | rate
    lambda_value: float = 0.0
    omega: int = 0
    intercept: bool = False
    ridge_tau: float = 0.0
    auto_ridge: bool = True
    shared_lambda: bool = False
    level: float = 0.95

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.combiner not in ("dac", "meta", "voting"):
            raise ValueError(f"unknown combiner {self.combiner!r}")
        if self.lambda_mode not in ("cv", "fixed", "rate"):
            raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")
        if self.lambda_mode == "fixed" and self.lambda_value < 0:
            raise ValueError("fixed lambda must be nonnegative")


@dataclass
class BatchTask:
    index: int
    family: FamilySpec
    penalty: PenaltyConfig
    lambda_mode: str
    lambda_value: float
    seed: int
    ridge_tau: float
    auto_ridge: bool
    estimator: str  # "lasso" | "mle"
    want_hessian: bool
    intercept: bool
    y: Optional[np.ndarray] = None
    X: Optional[np.ndarray] = None
    column_names: Optional[list] = None
    shard: Optional[ShardInfo] = None
    schema: Optional[CsvSchema] = None


@dataclass
class BatchResult:
    index: int
    n: int = 0
    summary: Optional[BatchSummary] = None
    beta: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None
    lambda_used: float = 0.0
    fit_seconds: float = 0.0
    error: Optional[str] = None


def _effective_penalty(task: BatchTask, data: Dataset) -> PenaltyConfig:
    """Penalty with the intercept column (column 0) left unpenalised.

    A user-supplied weight vector may predate the added intercept
    column, in which case a zero weight is prepended.
    """
    base_w = task.penalty.per_coefficient_weights
    if task.intercept:
        if base_w is not None and base_w.size == data.p - 1:
            weights = np.concatenate([[0.0], base_w])
        else:
            weights = task.penalty.weights_for(data.p).copy()
            weights[0] = 0.0
    else:
        weights = task.penalty.weights_for(data.p)
    return replace(task.penalty, per_coefficient_weights=weights)


def _load_task_data(task: BatchTask) -> Dataset:
    if task.shard is not None:
        if task.shard.checksum:
            actual = _sha256(task.shard.path)
            if actual != task.shard.checksum:
                raise ValueError(
                    f"shard {task.shard.path}: checksum mismatch "
                    f"(manifest {task.shard.checksum[:12]}…, file {actual[:12]}…)"
                )
        data = load_csv(task.shard.path, task.schema, task.family)
        return with_intercept(data) if task.intercept else data
    return Dataset(y=task.y, X=task.X, column_names=task.column_names)


def run_batch(task: BatchTask) -> BatchResult:
    """Fit one batch: tune, solve, estimate dispersion, bias-correct.

    Never raises: failures come back in ``error`` with the shard
    identity when there is one, so the reducer can apply the
    allow_partial policy.
    """
    t0 = time.perf_counter()
    try:
        data = _load_task_data(task)
        penalty = _effective_penalty(task, data)
        weights = penalty.per_coefficient_weights
        if task.estimator == "mle":
            fit = newton_mle(data, task.family)
            lam_used = 0.0
            if not fit.converged:
                return BatchResult(
                    index=task.index, n=data.n,
                    fit_seconds=time.perf_counter() - t0,
                    error="maximum likelihood fit did not converge",
                )
        else:
            if task.lambda_mode == "cv":
                lam_used, _ = cv_tune(data, task.family, penalty, task.seed)
            elif task.lambda_mode == "rate":
                lam_used = math.sqrt(math.log(data.p) / data.n)
            else:
                lam_used = task.lambda_value
            fit = fit_lasso(data, task.family, lam_used, penalty)
            if not fit.converged:
                # Retry once along a warm-started path down to the target.
                lmax = lambda_max(data, task.family, weights)
                if lmax > lam_used:
                    grid = default_grid(lmax, penalty)
                    grid = np.append(grid[grid > lam_used], lam_used)
                    fit = lasso_path(data, task.family, grid, penalty)[-1]
            if not fit.converged:
                return BatchResult(
                    index=task.index, n=data.n,
                    fit_seconds=time.perf_counter() - t0,
                    error=f"lasso fit did not converge at lambda={lam_used:.4g}",
                )
        phi = dispersion_estimate(task.family, data, fit)
        if phi <= 0:
            return BatchResult(
                index=task.index, n=data.n,
                fit_seconds=time.perf_counter() - t0,
                error="degenerate dispersion estimate (zero deviance)",
            )
        summary = debias(fit, data, task.family, phi,
                         ridge_tau=task.ridge_tau, auto_ridge=task.auto_ridge)
        hessian = (
            neg_hessian(task.family, data, fit.beta, 1.0) if task.want_hessian else None
        )
        return BatchResult(
            index=task.index,
            n=data.n,
            summary=summary,
            beta=fit.beta,
            hessian=hessian,
            lambda_used=lam_used,
            fit_seconds=time.perf_counter() - t0,
        )
    except Exception as exc:  # surfaced to the reducer, never fatal here
        where = f" (shard {task.shard.path})" if task.shard is not None else ""
        return BatchResult(
            index=task.index,
            fit_seconds=time.perf_counter() - t0,
            error=f"{type(exc).__name__}: {exc}{where}",
        )


def _map_tasks(fn, tasks: list, workers: int) -> list:
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def _tune_batch(task: BatchTask) -> Optional[float]:
    """Cross-validate one batch's penalty level (shared-lambda phase)."""
    try:
        data = _load_task_data(task)
        penalty = _effective_penalty(task, data)
        return float(cv_tune(data, task.family, penalty, task.seed).lambda_star)
    except Exception:
        return None


@dataclass
class PipelineRun:
    """A combined fit plus the per-batch artifacts that produced it."""

    combined: CombinedFit
    summaries: list
    batch_results: list
    column_names: Optional[list]
    failed: list
    timings: dict


def _make_tasks(config: PipelineConfig, dataset: Optional[Dataset],
                manifest: Optional[ShardManifest]) -> tuple[list[BatchTask], Optional[list]]:
    estimator = "mle" if config.combiner == "meta" else "lasso"
    lambda_mode = "fixed" if config.combiner == "meta" else config.lambda_mode
    want_hessian = config.combiner == "voting"
    common = dict(
        family=config.family,
        penalty=config.penalty,
        lambda_mode=lambda_mode,
        lambda_value=0.0 if config.combiner == "meta" else config.lambda_value,
        ridge_tau=config.ridge_tau,
        auto_ridge=config.auto_ridge,
        estimator=estimator,
        want_hessian=want_hessian,
        intercept=config.intercept,
    )
    if manifest is not None:
        tasks = [
            BatchTask(index=k, seed=child_seed(config.seed, "batch", k),
                      shard=shard, schema=manifest.schema, **common)
            for k, shard in enumerate(manifest.shards)
        ]
        return tasks, None
    data = with_intercept(dataset) if config.intercept else dataset
    names = list(data.column_names) if data.column_names is not None else None
    parts = random_partition(data.n, config.K, child_seed(config.seed, "partition"))
    tasks = [
        BatchTask(index=k, seed=child_seed(config.seed, "batch", k),
                  y=data.y[idx], X=data.X[idx], column_names=names, **common)
        for k, idx in enumerate(parts)
    ]
    return tasks, names


def run_pipeline(config: PipelineConfig, *, dataset: Optional[Dataset] = None,
                 csv_path=None, schema: Optional[CsvSchema] = None,
                 manifest_path=None) -> PipelineRun:
    """Partition (or discover shards), fit every batch, reduce.

    Exactly one input source must be given: an in-memory dataset, a
    single CSV (with schema), or a shard manifest.  Identical
    (config, seed, input) produces identical output regardless of
    ``config.workers``.

    A dataset or CSV is partitioned here with the seeded random
    partition; pre-sharded manifest input is taken as given, so the
    caller is responsible for the shards being a random split (the
    combination theory assumes one) — shards written by
    :func:`partition_csv` satisfy this.
    """
    sources = sum(x is not None for x in (dataset, csv_path, manifest_path))
    if sources != 1:
        raise ValueError("provide exactly one of dataset, csv_path, manifest_path")
    manifest = None
    if manifest_path is not None:
        manifest = load_manifest(manifest_path)
    elif csv_path is not None:
        if schema is None:
            raise ValueError("csv_path requires a schema")
        dataset = load_csv(csv_path, schema, config.family)
    else:
        validate_for_family(dataset, config.family)

    tasks, names = _make_tasks(config, dataset, manifest)
    if manifest is not None and names is None:
        feats = manifest.schema.features
        names = list(feats) if feats is not None else None
        if names is not None and config.intercept:
            names = [INTERCEPT_NAME] + names

    t_start = time.perf_counter()
    if config.shared_lambda and config.combiner != "meta" and config.lambda_mode == "cv":
        tuned = _map_tasks(_tune_batch, tasks, config.workers)
        lams = [lam for lam in tuned if lam is not None]
        if not lams:
            raise RuntimeError("shared-lambda tuning failed on every batch")
        shared = float(np.mean(lams))
        tasks = [replace(t, lambda_mode="fixed", lambda_value=shared) for t in tasks]
    results = _map_tasks(run_batch, tasks, config.workers)
    results.sort(key=lambda r: r.index)

    failed = [(r.index, r.error) for r in results if r.error is not None]
    if failed and not config.allow_partial:
        detail = "; ".join(f"batch {i}: {msg}" for i, msg in failed)
        raise RuntimeError(f"batch failure(s): {detail}")

    summaries = [r.summary for r in results]
    if config.common_phi:
        summaries = _substitute_common_phi(summaries)

    t_combine = time.perf_counter()
    if config.combiner == "voting":
        ok = [r for r in results if r.error is None]
        if not ok:
            raise RuntimeError("every batch failed; nothing to combine")
        if failed:
            warnings.warn(
                f"voting over {len(ok)} of {len(results)} batches; "
                f"failed: {[i for i, _ in failed]}",
                RuntimeWarning,
                stacklevel=2,
            )
        from .lasso import LassoFit  # local: only the container is needed

        fits = [
            LassoFit(beta=r.beta, lam=r.lambda_used, subgradient=np.zeros_like(r.beta),
                     n_iter=0, converged=True, kkt_violation=0.0)
            for r in ok
        ]
        combined = combine_voting(fits, [r.hessian for r in ok], [r.n for r in ok],
                                  VotingConfig(omega=config.omega))
    elif config.combiner == "meta":
        combined = combine_meta(summaries, allow_partial=config.allow_partial)
    else:
        combined = combine_dac(summaries, allow_partial=config.allow_partial)
    t_end = time.perf_counter()

    timings = {
        "max_batch_seconds": max((r.fit_seconds for r in results), default=0.0),
        "combine_seconds": t_end - t_combine,
        "wall_seconds": t_end - t_start,
    }
    return PipelineRun(
        combined=combined,
        summaries=[s for s in summaries if s is not None],
        batch_results=results,
        column_names=names,
        failed=failed,
        timings=timings,
    )


def _substitute_common_phi(summaries: list) -> list:
    """Replace per-batch dispersions with the pooled value.

    Precisions scale by phi_k / phi_bar, which is exact when no ridge
    was applied (the ridge, if any, rescales with them).
    """
    kept = [s for s in summaries if s is not None]
    if not kept:
        return summaries
    total_n = sum(s.n for s in kept)
    phi_bar = sum(s.n * s.phi_hat for s in kept) / total_n
    out = []
    for s in summaries:
        if s is None:
            out.append(None)
            continue
        out.append(BatchSummary(
            beta_c=s.beta_c,
            precision=s.precision * (s.phi_hat / phi_bar),
            n=s.n,
            phi_hat=phi_bar,
            lam=s.lam,
            ridge_tau=s.ridge_tau,
            kkt_violation=s.kkt_violation,
            converged=s.converged,
        ))
    return out


# --------------------------------------------------------------------
# Condition diagnostics
# --------------------------------------------------------------------


def diagnose_conditions(batches: Union[Dataset, Sequence[Dataset]]) -> list[dict]:
    """Per-batch design-conditioning report.

    Reports the extreme singular values of n^{-1/2} X, the p/n ratio
    (warning above 0.5), the theoretical tuning rate sqrt(log p / n),
    and a rank-deficiency flag.
    """
    if isinstance(batches, Dataset):
        batches = [batches]
    report = []
    for k, data in enumerate(batches):
        sv = np.linalg.svd(data.X / math.sqrt(data.n), compute_uv=False)
        sigma_min = float(sv[-1]) if sv.size else 0.0
        sigma_max = float(sv[0]) if sv.size else 0.0
        ratio = data.p / data.n
        entry = {
            "batch": k,
            "n": data.n,
            "p": data.p,
            "p_over_n": ratio,
            "sigma_min": sigma_min,
            "sigma_max": sigma_max,
            "lambda_rate": math.sqrt(math.log(data.p) / data.n) if data.p > 1 else 0.0,
            "p_over_n_warning": ratio > 0.5,
            "rank_deficient": bool(sigma_min <= 1e-12 * max(1.0, sigma_max)),
        }
        if entry["p_over_n_warning"]:
            warnings.warn(
                f"batch {k}: p/n = {ratio:.3f} exceeds 0.5; "
                "inference may be unreliable at this batch size",
                RuntimeWarning,
                stacklevel=2,
            )
        report.append(entry)
    return report


def emit_summaries(run: PipelineRun, out_dir) -> list[Path]:
    """Write each batch summary to batch_<k>.json for later combining."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in run.batch_results:
        if r.summary is None:
            continue
        path = out_dir / f"batch_{r.index:03d}.json"
        save_summary(r.summary, path)
        paths.append(path)
    return paths
