"""Figure rendering for study outputs.

Consumes one or more plot-ready long-format study CSVs (as written by
the simulation driver) and renders the standard comparison figures to
files, alongside a delimited aggregate table.  Multiple studies that
vary the batch size, total size or correlation combine naturally: the
x-axis picks the quantity that actually varies.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_METHOD_STYLE = {
    "GLM": dict(color="tab:gray", marker="o", linestyle="--"),
    "LASSO": dict(color="tab:brown", marker="v", linestyle=":"),
    "LASSOINF": dict(color="tab:green", marker="s", linestyle="-."),
    "VOTING": dict(color="tab:purple", marker="D", linestyle=":"),
    "META": dict(color="tab:orange", marker="^", linestyle="--"),
    "MODAC": dict(color="tab:blue", marker="o", linestyle="-"),
}


def _style(method: str) -> dict:
    base = method.split("(")[0]
    return _METHOD_STYLE.get(base, dict(marker="x", linestyle="-"))


def load_long_rows(paths: Iterable) -> list[dict]:
    """Read long-format study CSVs into typed records."""
    rows: list[dict] = []
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                try:
                    rows.append({
                        "family": rec["family"],
                        "N": int(rec["N"]),
                        "p": int(rec["p"]),
                        "K": int(rec["K"]),
                        "rho": float(rec["rho"]),
                        "level": float(rec["level"]),
                        "n_k": int(rec["n_k"]),
                        "p_over_nk": float(rec["p_over_nk"]),
                        "rep": int(rec["rep"]),
                        "method": rec["method"],
                        "metric": rec["metric"],
                        "value": float(rec["value"]),
                    })
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}: malformed long-format row: {exc}") from exc
    if not rows:
        raise ValueError("no rows found in the given study files")
    return rows


def _pick_axis(rows: Sequence[dict]) -> str:
    """The config quantity that varies across studies (x-axis)."""
    for key in ("p_over_nk", "N", "rho", "K"):
        if len({r[key] for r in rows}) > 1:
            return key
    return "p_over_nk"


def _collect(rows: Sequence[dict], metric: str, axis: str) -> dict:
    """method -> sorted list of (x, median, q25, q75)."""
    cells = defaultdict(list)
    for r in rows:
        if r["metric"] == metric:
            cells[(r["method"], r[axis])].append(r["value"])
    series: dict[str, list] = defaultdict(list)
    for (method, x), values in cells.items():
        arr = np.asarray(values)
        series[method].append((x, float(np.median(arr)),
                               float(np.percentile(arr, 25)),
                               float(np.percentile(arr, 75))))
    return {m: sorted(pts) for m, pts in series.items()}


_AXIS_LABEL = {
    "p_over_nk": "p / n_k",
    "N": "total sample size N",
    "rho": "design correlation rho",
    "K": "number of batches K",
}


def _line_figure(series: dict, ylabel: str, xlabel: str, out_path: Path,
                 hline: float | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for method, pts in sorted(series.items()):
        xs = [p[0] for p in pts]
        med = [p[1] for p in pts]
        lo = [p[2] for p in pts]
        hi = [p[3] for p in pts]
        style = _style(method)
        if len(xs) == 1:
            ax.errorbar(xs, med, yerr=[[med[0] - lo[0]], [hi[0] - med[0]]],
                        label=method, capsize=4, **style)
        else:
            ax.plot(xs, med, label=method, **style)
            ax.fill_between(xs, lo, hi, alpha=0.15, color=style.get("color"))
    if hline is not None:
        ax.axhline(hline, color="black", linewidth=0.8, linestyle=":")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_report(long_csv_paths: Iterable, out_dir, level: float | None = None) -> dict:
    """Render the comparison figures plus a delimited aggregate table.

    Produces coverage_signal.png, mse_ratio_signal.png and
    wall_time.png (those with data), and report_summary.csv with
    median/quartile aggregates per (study cell, method, metric).
    """
    rows = load_long_rows(long_csv_paths)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    axis = _pick_axis(rows)
    outputs: dict[str, Path] = {}

    if level is None:
        levels = {r["level"] for r in rows}
        level = levels.pop() if len(levels) == 1 else None

    coverage = _collect(rows, "coverage_signal", axis)
    if coverage:
        path = out_dir / "coverage_signal.png"
        _line_figure(coverage, "coverage of signal coefficients",
                     _AXIS_LABEL[axis], path, hline=level)
        outputs["coverage_signal"] = path

    # Mean squared error on the signal set, as per-replicate ratios to
    # the full-data GLM when GLM is present, raw otherwise.
    mse_rows = [r for r in rows if r["metric"] == "mse_signal"]
    glm_by_cell = {}
    for r in mse_rows:
        if r["method"] == "GLM":
            glm_by_cell[(r["family"], r[axis], r["rep"])] = r["value"]
    ratio_rows = []
    for r in mse_rows:
        if r["method"] == "GLM":
            continue
        base = glm_by_cell.get((r["family"], r[axis], r["rep"]))
        if base and base > 0:
            ratio_rows.append({**r, "metric": "mse_ratio", "value": r["value"] / base})
    if ratio_rows:
        series = _collect(ratio_rows, "mse_ratio", axis)
        path = out_dir / "mse_ratio_signal.png"
        _line_figure(series, "MSE(signal) relative to full-data GLM",
                     _AXIS_LABEL[axis], path, hline=1.0)
        outputs["mse_ratio_signal"] = path
    elif mse_rows:
        series = _collect(rows, "mse_signal", axis)
        path = out_dir / "mse_signal.png"
        _line_figure(series, "MSE of signal coefficients", _AXIS_LABEL[axis], path)
        outputs["mse_signal"] = path

    timing_axis = axis
    if axis == "p_over_nk" and len({r["N"] for r in rows}) > 1:
        timing_axis = "N"
    timing = _collect(rows, "wall_time_s", timing_axis)
    if timing:
        path = out_dir / "wall_time.png"
        _line_figure(timing, "wall time (s)", _AXIS_LABEL[timing_axis], path)
        outputs["wall_time"] = path

    summary_path = out_dir / "report_summary.csv"
    cells = defaultdict(list)
    for r in rows:
        key = (r["family"], r["N"], r["p"], r["K"], r["rho"], r["method"], r["metric"])
        cells[key].append(r["value"])
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["family", "N", "p", "K", "rho", "method", "metric",
                         "mean", "median", "q25", "q75", "n"])
        for key in sorted(cells, key=str):
            arr = np.asarray(cells[key])
            writer.writerow(list(key) + [
                float(np.mean(arr)), float(np.median(arr)),
                float(np.percentile(arr, 25)), float(np.percentile(arr, 75)),
                arr.size,
            ])
    outputs["summary"] = summary_path
    return outputs
