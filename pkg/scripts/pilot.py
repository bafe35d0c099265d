"""Pilot runs to calibrate the Monte Carlo acceptance configurations."""
import sys
import time
import warnings

import numpy as np

from dacglm.families import FamilySpec
from dacglm.simulate import SimConfig, run_study

warnings.simplefilter("ignore")


def summarize(tag, result):
    def fmt(v, nd=3):
        return "None" if v is None else round(v, nd)

    print(f"== {tag} ==", flush=True)
    for row in result.summary:
        print(
            f"  {row['method']:<10} fail={row['n_failed']}/{row['n_reps']}"
            f" cov_sig={fmt(row.get('coverage_signal'))}"
            f" cov_null={fmt(row.get('coverage_null'))}"
            f" sens={fmt(row.get('sensitivity'))}"
            f" se_sig={fmt(row.get('asymp_se_signal'), 4)}"
            f" t={fmt(row.get('wall_time_s'), 2)}s",
            flush=True,
        )


which = sys.argv[1] if len(sys.argv) > 1 else "all"

if which in ("all", "g"):
    t0 = time.time()
    cfg = SimConfig(family=FamilySpec.gaussian(), N=2000, p=50, K=4, s0=10,
                    rho=0.8, n_reps=40, seed=11, methods=("GLM", "MODAC"))
    summarize(f"gaussian desk 40 reps", run_study(cfg))
    print(f"elapsed {time.time()-t0:.0f}s -> est 200 reps: {(time.time()-t0)*5/60:.1f} min", flush=True)

if which in ("all", "l8"):
    t0 = time.time()
    cfg = SimConfig(family=FamilySpec.logistic(), N=2000, p=150, K=4, s0=10,
                    rho=0.8, n_reps=25, seed=12, methods=("META", "MODAC"))
    summarize("logistic p=150 n_k=500 rho=0.8, 25 reps", run_study(cfg))
    print(f"elapsed {time.time()-t0:.0f}s -> est 200 reps: {(time.time()-t0)*8/60:.1f} min", flush=True)

if which in ("all", "l0"):
    t0 = time.time()
    cfg = SimConfig(family=FamilySpec.logistic(), N=2000, p=150, K=4, s0=10,
                    rho=0.0, n_reps=25, seed=13, methods=("META", "MODAC"))
    summarize("logistic p=150 n_k=500 rho=0.0, 25 reps", run_study(cfg))
    print(f"elapsed {time.time()-t0:.0f}s", flush=True)

if which in ("all", "se"):
    for fam, name in ((FamilySpec.gaussian(), "gaussian"), (FamilySpec.poisson(), "poisson")):
        t0 = time.time()
        cfg = SimConfig(family=fam, N=500, p=10, K=1, s0=3, rho=0.0, n_reps=150,
                        seed=14, methods=("MODAC",))
        result = run_study(cfg)
        summarize(f"{name} n=500 p=10 (SE calibration pilot, 150 reps)", result)
        # SD/SE ratio needs raw estimates; approximate via per-rep records
        print(f"elapsed {time.time()-t0:.0f}s -> est 1000 reps: {(time.time()-t0)*1000/150/60:.1f} min", flush=True)
