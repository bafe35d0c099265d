"""Command-line interface.

Subcommands: ``fit`` (estimate on a CSV), ``combine`` (reduce saved
batch summaries), ``partition`` (shard a CSV with a manifest),
``simulate`` (Monte Carlo study), ``diagnose`` (design conditioning
report) and ``report`` (figures from study outputs).

Exit codes: 0 success, 1 failure, 2 partial combine.  Errors are
emitted as machine-readable JSON on stderr.  Option precedence is
flags > config file > built-in defaults, and the effective
configuration is echoed into every output artifact.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .combine import combine_dac, combine_meta
from .engine import (
    CsvSchema,
    PipelineConfig,
    diagnose_conditions,
    emit_summaries,
    load_csv,
    load_manifest,
    partition_csv,
    run_pipeline,
    with_intercept,
)
from .families import Dataset, FamilySpec
from .inference import load_summary, wald_inference
from .lasso import PenaltyConfig, cv_tune, fit_lasso
from .report import render_report
from .simulate import ALL_METHODS, SimConfig, run_study, write_study_outputs

_EXIT_OK = 0
_EXIT_ERROR = 1
_EXIT_PARTIAL = 2

_FIT_DEFAULTS = {
    "method": "modac",
    "family": "gaussian",
    "k": 1,
    "seed": 0,
    "workers": 1,
    "level": 0.95,
    "omega": None,
    "lam": None,
    "cv": True,
    "intercept": True,
    "allow_partial": False,
    "common_phi": False,
    "shared_lambda": False,
    "features": None,
    "out": ".",
    "json": False,
    "emit_summaries": None,
}


def _json_safe(value):
    """None for NaN/inf so artifacts stay valid JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _emit_error(exc: BaseException) -> int:
    record = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return _EXIT_ERROR


def _load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        record = json.load(fh)
    if not isinstance(record, dict):
        raise ValueError(f"{path}: config file must hold a JSON object")
    return record


def _effective(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults."""
    config = _load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = [k for k in config if k not in defaults]
    if unknown:
        raise ValueError(f"unknown config file keys: {unknown}")
    effective = dict(defaults)
    effective.update(config)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            effective[key] = value
    return effective


def _schema_from(effective: dict, response: str) -> CsvSchema:
    features = effective.get("features")
    if isinstance(features, str):
        features = tuple(f.strip() for f in features.split(",") if f.strip())
    elif features is not None:
        features = tuple(features)
    return CsvSchema(response=response, features=features)


def _combined_record(combined, names, level, extra_diagnostics=None) -> dict:
    rows = wald_inference(combined, level, names=names)
    record = {
        "beta": [float(b) for b in combined.beta],
        "se": [_json_safe(r.std_error) for r in rows],
        "ci": [[_json_safe(r.ci_lo), _json_safe(r.ci_hi)] for r in rows],
        "p_value": [_json_safe(r.p_value) for r in rows],
        "coefficients": [r.coefficient for r in rows],
        "N": combined.N,
        "K": combined.K,
        "combiner": combined.combiner,
        "diagnostics": {
            "per_batch": combined.per_batch_diagnostics,
            "ridge_tau": combined.ridge_tau,
        },
    }
    if combined.omega is not None:
        record["diagnostics"]["omega"] = combined.omega
        record["diagnostics"]["votes"] = (
            combined.votes.tolist() if combined.votes is not None else None
        )
        record["diagnostics"]["vote_set"] = (
            combined.vote_set.tolist() if combined.vote_set is not None else None
        )
    if extra_diagnostics:
        record["diagnostics"].update(extra_diagnostics)
    return record


def _write_fit_outputs(record: dict, out_dir, to_stdout: bool) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result_path = out_dir / "fit_result.json"
    with open(result_path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")
    table_path = out_dir / "coefficients.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("coefficient,estimate,std_error,ci_lo,ci_hi,p_value\n")
        for i, name in enumerate(record["coefficients"]):
            se = record["se"][i]
            lo, hi = record["ci"][i]
            pv = record["p_value"][i]
            cells = [name, repr(record["beta"][i])] + [
                "" if v is None else repr(v) for v in (se, lo, hi, pv)
            ]
            fh.write(",".join(cells) + "\n")
    if to_stdout:
        print(json.dumps(record, sort_keys=True))


def cmd_fit(args: argparse.Namespace) -> int:
    eff = _effective(args, _FIT_DEFAULTS)
    if eff["lam"] is not None and args.cv:
        raise ValueError("--lambda and --cv are mutually exclusive")
    is_manifest = str(args.data).endswith(".json")
    if not is_manifest and not args.response:
        raise ValueError("--response is required for CSV input")
    family = FamilySpec.from_name(eff["family"])
    schema = _schema_from(eff, args.response) if not is_manifest else None
    method = eff["method"]
    eff_echo = {**eff, "response": args.response, "data": str(args.data)}

    if method == "lasso":
        if is_manifest:
            raise ValueError("method 'lasso' fits the full data: pass a CSV")
        data = load_csv(args.data, schema, family)
        if eff["intercept"]:
            data = with_intercept(data)
        penalty = PenaltyConfig()
        if eff["intercept"]:
            w = penalty.weights_for(data.p).copy()
            w[0] = 0.0
            penalty = PenaltyConfig(per_coefficient_weights=w)
        lam = eff["lam"]
        if lam is None:
            lam, _ = cv_tune(data, family, penalty, eff["seed"])
        fit = fit_lasso(data, family, float(lam), penalty)
        names = list(data.column_names)
        record = {
            "beta": [float(b) for b in fit.beta],
            "se": [None] * data.p,
            "ci": [[None, None]] * data.p,
            "p_value": [None] * data.p,
            "coefficients": names,
            "N": data.n,
            "K": 1,
            "combiner": "lasso",
            "diagnostics": {
                "lambda": float(lam),
                "kkt_violation": fit.kkt_violation,
                "converged": fit.converged,
                "n_nonzero": fit.n_nonzero,
            },
            "config": eff_echo,
        }
        _write_fit_outputs(record, eff["out"], eff["json"])
        return _EXIT_OK

    combiner = {"modac": "dac", "meta": "meta", "voting": "voting",
                "lassoinf": "dac", "glm": "meta"}[method]
    K = eff["k"] if method in ("modac", "meta", "voting") else 1
    config = PipelineConfig(
        family=family,
        K=K,
        combiner=combiner,
        seed=eff["seed"],
        workers=eff["workers"],
        allow_partial=eff["allow_partial"],
        common_phi=eff["common_phi"],
        lambda_mode="cv" if eff["lam"] is None else "fixed",
        lambda_value=0.0 if eff["lam"] is None else float(eff["lam"]),
        omega=eff["omega"] if eff["omega"] is not None else max(K // 2, 0),
        intercept=eff["intercept"],
        shared_lambda=eff["shared_lambda"],
        level=eff["level"],
    )
    if is_manifest:  # pre-sharded input: the manifest carries the schema
        run = run_pipeline(config, manifest_path=args.data)
    else:
        run = run_pipeline(config, csv_path=args.data, schema=schema)
    extra = {"failed_batches": [{"batch": i, "error": e} for i, e in run.failed]}
    record = _combined_record(run.combined, run.column_names, eff["level"], extra)
    record["config"] = eff_echo
    _write_fit_outputs(record, eff["out"], eff["json"])
    # wall-clock measurements live outside the deterministic artifact
    timings_path = Path(eff["out"]) / "timings.json"
    with open(timings_path, "w", encoding="utf-8") as fh:
        json.dump(run.timings, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if eff["emit_summaries"]:
        emit_summaries(run, eff["emit_summaries"])
    return _EXIT_PARTIAL if run.failed else _EXIT_OK


_COMBINE_DEFAULTS = {
    "combiner": "dac",
    "level": 0.95,
    "allow_partial": False,
    "out": ".",
    "json": False,
}


def cmd_combine(args: argparse.Namespace) -> int:
    eff = _effective(args, _COMBINE_DEFAULTS)
    summaries = []
    for path in args.summaries:
        try:
            summaries.append(load_summary(path))
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot load summary {path}: {exc}") from exc
    dims = {s.p for s in summaries}
    if len(dims) > 1:
        detail = ", ".join(f"{p}: p={s.p}" for p, s in zip(args.summaries, summaries))
        raise ValueError(f"summaries disagree on dimension ({detail})")
    if eff["combiner"] == "meta":
        combined = combine_meta(summaries, allow_partial=eff["allow_partial"])
    else:
        combined = combine_dac(summaries, allow_partial=eff["allow_partial"])
    record = _combined_record(combined, None, eff["level"])
    record["config"] = {**eff, "summaries": [str(p) for p in args.summaries]}
    _write_fit_outputs(record, eff["out"], eff["json"])
    return _EXIT_OK


_PARTITION_DEFAULTS = {"k": 2, "seed": 0, "features": None, "out_dir": "shards"}


def cmd_partition(args: argparse.Namespace) -> int:
    eff = _effective(args, _PARTITION_DEFAULTS)
    schema = _schema_from(eff, args.response)
    manifest_path = partition_csv(args.data, schema, eff["k"], eff["seed"], eff["out_dir"])
    print(manifest_path)
    return _EXIT_OK


_PRESETS = {
    "desk": dict(N=2000, p=50, K=4, s0=10, rho=0.8, n_reps=200),
    "table1-gaussian": dict(family="gaussian", N=10_000, p=300, K=20, s0=10,
                            rho=0.8, n_reps=500),
    "table1-logistic": dict(family="logistic", N=10_000, p=300, K=20, s0=10,
                            rho=0.8, n_reps=500),
    "table1-poisson": dict(family="poisson", N=10_000, p=300, K=20, s0=10,
                           rho=0.8, n_reps=500),
}

_SIMULATE_DEFAULTS = {
    "preset": None,
    "family": "gaussian",
    "n": 2000,
    "p": 50,
    "k": 4,
    "s0": 10,
    "signal": None,
    "rho": 0.8,
    "n_reps": 200,
    "seed": 0,
    "methods": ",".join(ALL_METHODS),
    "level": 0.95,
    "omega": None,
    "omega_sweep": False,
    "fix_signal_positions": False,
    "workers": 1,
    "out_dir": "study",
    "figures": False,
}


def cmd_simulate(args: argparse.Namespace) -> int:
    eff = _effective(args, _SIMULATE_DEFAULTS)
    if eff["preset"]:
        preset = _PRESETS[eff["preset"]]
        for key, value in preset.items():
            flag = {"N": "n", "K": "k"}.get(key, key)
            if getattr(args, flag, None) is None:
                eff[flag] = value
    methods = eff["methods"]
    if isinstance(methods, str):
        methods = tuple(m.strip().upper() for m in methods.split(",") if m.strip())
    config = SimConfig(
        family=FamilySpec.from_name(eff["family"]),
        N=eff["n"], p=eff["p"], K=eff["k"], s0=eff["s0"],
        signal=eff["signal"], rho=eff["rho"], n_reps=eff["n_reps"],
        seed=eff["seed"], methods=methods, level=eff["level"],
        omega=eff["omega"], omega_sweep=eff["omega_sweep"],
        fix_signal_positions=eff["fix_signal_positions"],
        workers=eff["workers"],
    )
    result = run_study(config)
    paths = write_study_outputs(result, eff["out_dir"])
    if eff["figures"]:
        figure_paths = render_report([paths["long"]], Path(eff["out_dir"]) / "figures",
                                     level=eff["level"])
        paths.update(figure_paths)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return _EXIT_OK


_DIAGNOSE_DEFAULTS = {"k": 1, "seed": 0, "features": None, "json": False}


def cmd_diagnose(args: argparse.Namespace) -> int:
    eff = _effective(args, _DIAGNOSE_DEFAULTS)
    path = Path(args.data)
    if path.suffix == ".json":
        manifest = load_manifest(path)
        batches = [load_csv(s.path, manifest.schema) for s in manifest.shards]
    else:
        if not args.response:
            raise ValueError("--response is required for CSV input")
        schema = _schema_from(eff, args.response)
        data = load_csv(path, schema)
        if eff["k"] > 1:
            from .combine import random_partition
            from .engine import child_seed

            parts = random_partition(data.n, eff["k"], child_seed(eff["seed"], "partition"))
            batches = [Dataset(y=data.y[i], X=data.X[i]) for i in parts]
        else:
            batches = [data]
    report = diagnose_conditions(batches)
    if eff["json"]:
        print(json.dumps(report, sort_keys=True))
    else:
        header = ("batch", "n", "p", "p/n", "sigma_min", "sigma_max",
                  "lambda_rate", "warn", "rank_deficient")
        print("  ".join(f"{h:>12}" for h in header))
        for row in report:
            print("  ".join([
                f"{row['batch']:>12}", f"{row['n']:>12}", f"{row['p']:>12}",
                f"{row['p_over_n']:>12.4f}", f"{row['sigma_min']:>12.4f}",
                f"{row['sigma_max']:>12.4f}", f"{row['lambda_rate']:>12.4f}",
                f"{str(row['p_over_n_warning']):>12}",
                f"{str(row['rank_deficient']):>12}",
            ]))
    return _EXIT_OK


_REPORT_DEFAULTS = {"out_dir": "report", "level": None}


def cmd_report(args: argparse.Namespace) -> int:
    eff = _effective(args, _REPORT_DEFAULTS)
    inputs = []
    for given in args.studies:
        given = Path(given)
        if given.is_dir():
            candidate = given / "study_long.csv"
            if not candidate.exists():
                raise ValueError(f"{given}: no study_long.csv in directory")
            inputs.append(candidate)
        else:
            inputs.append(given)
    outputs = render_report(inputs, eff["out_dir"], level=eff["level"])
    for name, path in sorted(outputs.items()):
        print(f"{name}: {path}")
    return _EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dacglm",
        description="Divide-and-combine estimation and inference for "
                    "lasso-regularised generalised linear models.",
    )
    parser.add_argument("--version", action="version", version=f"dacglm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit one dataset and write estimates")
    fit.add_argument("data", help="input CSV with a header row, or a shard "
                                  "manifest JSON")
    fit.add_argument("--response", help="response column name (CSV input)")
    fit.add_argument("--features", help="comma-separated feature columns "
                                        "(default: all other columns)")
    fit.add_argument("--family", choices=["gaussian", "logistic", "poisson"],
                     help="GLM family (default gaussian)")
    fit.add_argument("--method",
                     choices=["modac", "meta", "voting", "lassoinf", "glm", "lasso"],
                     help="estimator (default modac)")
    fit.add_argument("--k", type=int, help="number of batches (default 1)")
    fit.add_argument("--seed", type=int, help="random seed (default 0)")
    fit.add_argument("--workers", type=int, help="parallel workers (default 1)")
    fit.add_argument("--level", type=float, help="confidence level (default 0.95)")
    fit.add_argument("--omega", type=int, help="voting threshold (default K//2)")
    lam_group = fit.add_mutually_exclusive_group()
    lam_group.add_argument("--lambda", dest="lam", type=float,
                           help="fixed penalty level (skips tuning)")
    lam_group.add_argument("--cv", action="store_true", default=False,
                           help="tune the penalty by cross-validation (default)")
    fit.add_argument("--intercept", action=argparse.BooleanOptionalAction,
                     help="include an unpenalised intercept column (default on)")
    fit.add_argument("--allow-partial", dest="allow_partial",
                     action=argparse.BooleanOptionalAction,
                     help="combine surviving batches when some fail (exit 2)")
    fit.add_argument("--common-phi", dest="common_phi",
                     action=argparse.BooleanOptionalAction,
                     help="pool the dispersion estimate across batches")
    fit.add_argument("--shared-lambda", dest="shared_lambda",
                     action=argparse.BooleanOptionalAction,
                     help="average cross-validated penalties across batches")
    fit.add_argument("--emit-summaries", dest="emit_summaries", metavar="DIR",
                     help="write per-batch summary JSON files to DIR")
    fit.add_argument("--out", help="output directory (default .)")
    fit.add_argument("--json", action=argparse.BooleanOptionalAction,
                     help="print the result JSON to stdout")
    fit.add_argument("--config", help="JSON config file (flags override it)")
    fit.set_defaults(func=cmd_fit)

    combine = sub.add_parser("combine", help="combine saved batch summaries")
    combine.add_argument("summaries", nargs="+", help="batch summary JSON files")
    combine.add_argument("--combiner", choices=["dac", "meta"],
                         help="pooling rule (default dac)")
    combine.add_argument("--level", type=float, help="confidence level (default 0.95)")
    combine.add_argument("--allow-partial", dest="allow_partial",
                         action=argparse.BooleanOptionalAction,
                         help="tolerate failed batches")
    combine.add_argument("--out", help="output directory (default .)")
    combine.add_argument("--json", action=argparse.BooleanOptionalAction,
                         help="print the result JSON to stdout")
    combine.add_argument("--config", help="JSON config file (flags override it)")
    combine.set_defaults(func=cmd_combine)

    partition = sub.add_parser("partition", help="shard a CSV with a manifest")
    partition.add_argument("data", help="input CSV with a header row")
    partition.add_argument("--response", required=True, help="response column name")
    partition.add_argument("--features", help="comma-separated feature columns")
    partition.add_argument("--k", type=int, help="number of shards (default 2)")
    partition.add_argument("--seed", type=int, help="random seed (default 0)")
    partition.add_argument("--out-dir", dest="out_dir",
                           help="shard directory (default shards)")
    partition.add_argument("--config", help="JSON config file (flags override it)")
    partition.set_defaults(func=cmd_partition)

    simulate = sub.add_parser("simulate", help="run a Monte Carlo study")
    simulate.add_argument("--preset", choices=sorted(_PRESETS),
                          help="named study configuration")
    simulate.add_argument("--family", choices=["gaussian", "logistic", "poisson"],
                          help="GLM family (default gaussian)")
    simulate.add_argument("--n", type=int, help="total sample size N (default 2000)")
    simulate.add_argument("--p", type=int, help="number of covariates (default 50)")
    simulate.add_argument("--k", type=int, help="number of batches (default 4)")
    simulate.add_argument("--s0", type=int, help="number of signals (default 10)")
    simulate.add_argument("--signal", type=float,
                          help="signal magnitude (default per family)")
    simulate.add_argument("--rho", type=float, help="design correlation (default 0.8)")
    simulate.add_argument("--n-reps", dest="n_reps", type=int,
                          help="replicates (default 200)")
    simulate.add_argument("--seed", type=int, help="random seed (default 0)")
    simulate.add_argument("--methods", help="comma-separated subset of "
                          f"{','.join(ALL_METHODS)}")
    simulate.add_argument("--level", type=float, help="confidence level (default 0.95)")
    simulate.add_argument("--omega", type=int, help="voting threshold (default K//2)")
    simulate.add_argument("--omega-sweep", dest="omega_sweep",
                          action=argparse.BooleanOptionalAction,
                          help="report voting at every omega in 0..K-1")
    simulate.add_argument("--fix-signal-positions", dest="fix_signal_positions",
                          action=argparse.BooleanOptionalAction,
                          help="freeze signal positions across replicates")
    simulate.add_argument("--workers", type=int, help="parallel workers (default 1)")
    simulate.add_argument("--out-dir", dest="out_dir",
                          help="study output directory (default study)")
    simulate.add_argument("--figures", action=argparse.BooleanOptionalAction,
                          help="also render figures into OUT_DIR/figures")
    simulate.add_argument("--config", help="JSON config file (flags override it)")
    simulate.set_defaults(func=cmd_simulate)

    diagnose = sub.add_parser("diagnose", help="design conditioning report")
    diagnose.add_argument("data", help="input CSV or shard manifest JSON")
    diagnose.add_argument("--response", help="response column name (CSV input)")
    diagnose.add_argument("--features", help="comma-separated feature columns")
    diagnose.add_argument("--k", type=int, help="partition CSV input into K batches")
    diagnose.add_argument("--seed", type=int, help="partition seed (default 0)")
    diagnose.add_argument("--json", action=argparse.BooleanOptionalAction,
                          help="emit the report as JSON")
    diagnose.add_argument("--config", help="JSON config file (flags override it)")
    diagnose.set_defaults(func=cmd_diagnose)

    report = sub.add_parser("report", help="render figures from study outputs")
    report.add_argument("studies", nargs="+",
                        help="study directories or study_long.csv files")
    report.add_argument("--out-dir", dest="out_dir",
                        help="figure directory (default report)")
    report.add_argument("--level", type=float,
                        help="nominal level line for coverage figures")
    report.add_argument("--config", help="JSON config file (flags override it)")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        return _emit_error(exc)


if __name__ == "__main__":
    sys.exit(main())
