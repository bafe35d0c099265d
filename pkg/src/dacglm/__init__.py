"""Divide-and-combine estimation and inference for lasso-regularised GLMs.

Fit l1-penalised gaussian, logistic or poisson regressions on batches
of a large dataset, bias-correct each batch estimate into an
asymptotically normal one, and pool the batches through their normal
confidence densities into a single estimator with valid Wald inference
— matching the full-data maximum likelihood fit in the limit.
"""

__version__ = "0.1.0"

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
    FamilyKind,
    FamilySpec,
    dispersion_estimate,
    link_inverse,
    neg_hessian,
    score,
    variance_weight,
)
from .engine import (
    CsvSchema,
    PipelineConfig,
    ShardManifest,
    diagnose_conditions,
    load_csv,
    partition_csv,
    run_pipeline,
)
from .inference import (
    BatchSummary,
    ConfidenceDensity,
    confidence_density,
    covariance,
    debias,
    load_summary,
    save_summary,
    wald_inference,
)
from .lasso import (
    LassoFit,
    PenaltyConfig,
    adaptive_weights,
    cv_tune,
    fit_lasso,
    kkt_residual,
    lambda_max,
    lasso_path,
    newton_mle,
    soft_threshold,
)
from .simulate import MetricsRow, SimConfig, evaluate, gen_coefficients, gen_design, gen_response, run_study

__all__ = [
    "BatchSummary",
    "CombinedFit",
    "ConfidenceDensity",
    "CsvSchema",
    "Dataset",
    "FamilyKind",
    "FamilySpec",
    "LassoFit",
    "MetricsRow",
    "PenaltyConfig",
    "PipelineConfig",
    "ShardManifest",
    "SimConfig",
    "VotingConfig",
    "adaptive_weights",
    "combine_dac",
    "combine_meta",
    "combine_voting",
    "confidence_density",
    "covariance",
    "cv_tune",
    "debias",
    "diagnose_conditions",
    "dispersion_estimate",
    "evaluate",
    "fit_lasso",
    "gen_coefficients",
    "gen_design",
    "gen_response",
    "kkt_residual",
    "lambda_max",
    "lasso_path",
    "link_inverse",
    "load_csv",
    "load_summary",
    "neg_hessian",
    "newton_mle",
    "partition_csv",
    "random_partition",
    "run_pipeline",
    "run_study",
    "save_summary",
    "score",
    "soft_threshold",
    "variance_weight",
    "wald_inference",
]
