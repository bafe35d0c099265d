"""GLM families and their estimating-equation primitives.

Three canonical-link families are supported: gaussian (identity link),
logistic (logit link) and poisson (log link).  Everything downstream —
the penalised solver, the one-step bias correction and the combiners —
is written against the small set of primitives defined here: the
inverse link, the variance weights, the score vector, the negative
Hessian (observed Fisher information scaled by 1/n) and the dispersion
estimator.

All functions are pure; they may be called from any number of workers
concurrently.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

# Logistic means are clamped to [eps, 1-eps] and poisson weights floored
# so the weight matrix stays invertible when fitted probabilities or
# means collapse toward the boundary.
LOGISTIC_MEAN_EPS = 1e-8
POISSON_WEIGHT_FLOOR = 1e-8
# Poisson means beyond this cap trigger a diagnostic warning (not an
# error): step control in the solvers is given a chance to recover.
POISSON_MEAN_CAP = 1e10


class FamilyKind(str, Enum):
    GAUSSIAN = "gaussian"
    LOGISTIC = "logistic"
    POISSON = "poisson"


@dataclass(frozen=True)
class FamilySpec:
    """A GLM family with its canonical link and dispersion policy.

    Parameters
    ----------
    kind : FamilyKind
        Which exponential family.
    fixed_dispersion : float or None
        A known dispersion value, or None when the dispersion is to be
        estimated from data.  Logistic and poisson default to a fixed
        dispersion of 1; gaussian defaults to estimated.
    """

    kind: FamilyKind
    fixed_dispersion: Optional[float] = None

    def __post_init__(self) -> None:
        if self.fixed_dispersion is not None and self.fixed_dispersion <= 0:
            raise ValueError("fixed dispersion must be positive")

    @property
    def dispersion_is_fixed(self) -> bool:
        return self.fixed_dispersion is not None

    @property
    def link_name(self) -> str:
        return {
            FamilyKind.GAUSSIAN: "identity",
            FamilyKind.LOGISTIC: "logit",
            FamilyKind.POISSON: "log",
        }[self.kind]

    @staticmethod
    def gaussian() -> "FamilySpec":
        return FamilySpec(FamilyKind.GAUSSIAN, fixed_dispersion=None)

    @staticmethod
    def logistic() -> "FamilySpec":
        return FamilySpec(FamilyKind.LOGISTIC, fixed_dispersion=1.0)

    @staticmethod
    def poisson() -> "FamilySpec":
        return FamilySpec(FamilyKind.POISSON, fixed_dispersion=1.0)

    @staticmethod
    def from_name(name: str) -> "FamilySpec":
        """Resolve a family by name with its default dispersion policy."""
        try:
            kind = FamilyKind(name.lower())
        except ValueError:
            valid = ", ".join(k.value for k in FamilyKind)
            raise ValueError(f"unknown family {name!r}; valid families: {valid}") from None
        return {
            FamilyKind.GAUSSIAN: FamilySpec.gaussian,
            FamilyKind.LOGISTIC: FamilySpec.logistic,
            FamilyKind.POISSON: FamilySpec.poisson,
        }[kind]()


@dataclass(frozen=True)
class Dataset:
    """A response vector and design matrix with optional column names.

    Shape and finiteness are validated on construction; family-specific
    response checks live in :func:`validate_for_family` because the
    family is not known to the container.
    """

    y: np.ndarray
    X: np.ndarray
    column_names: Optional[Sequence[str]] = None

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-dimensional, got shape {X.shape}")
        if y.ndim != 1:
            raise ValueError(f"y must be 1-dimensional, got shape {y.shape}")
        if y.shape[0] != X.shape[0]:
            raise ValueError(
                f"y has {y.shape[0]} rows but X has {X.shape[0]}"
            )
        if y.shape[0] == 0:
            raise ValueError("dataset is empty")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite entries")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite entries")
        if self.column_names is not None and len(self.column_names) != X.shape[1]:
            raise ValueError(
                f"{len(self.column_names)} column names for {X.shape[1]} columns"
            )
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def validate_for_family(data: Dataset, family: FamilySpec) -> None:
    """Raise ValueError when the response is invalid for the family.

    logistic requires every y in {0, 1}; poisson requires nonnegative
    integer-valued reals.  Gaussian accepts any finite response.
    """
    y = data.y
    if family.kind is FamilyKind.LOGISTIC:
        if not np.all((y == 0.0) | (y == 1.0)):
            bad = y[~((y == 0.0) | (y == 1.0))][0]
            raise ValueError(
                f"logistic response must be 0/1; found value {bad!r}"
            )
    elif family.kind is FamilyKind.POISSON:
        if np.any(y < 0) or np.any(y != np.floor(y)):
            bad = y[(y < 0) | (y != np.floor(y))][0]
            raise ValueError(
                f"poisson response must be a nonnegative integer; found {bad!r}"
            )


@dataclass(frozen=True)
class ModelState:
    """Linear predictor, mean and variance weights at a coefficient vector.

    ``weights`` is the diagonal of the variance-weight matrix, clamped
    away from zero so it is always invertible.
    """

    beta: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    weights: np.ndarray


def model_state(family: FamilySpec, data: Dataset, beta: np.ndarray) -> ModelState:
    """Evaluate eta = X beta, the mean and the variance weights at beta."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (data.p,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({data.p},)")
    eta = data.X @ beta
    mu = link_inverse(family, eta)
    return ModelState(beta=beta, eta=eta, mu=mu, weights=variance_weight(family, mu))


def link_inverse(family: FamilySpec, eta):
    """Inverse canonical link mu = g^{-1}(eta).

    gaussian: identity.  logistic: overflow-safe expit.  poisson: exp,
    with a diagnostic warning once the mean exceeds POISSON_MEAN_CAP.
    """
    eta = np.asarray(eta, dtype=float)
    if family.kind is FamilyKind.GAUSSIAN:
        mu = eta.copy()
    elif family.kind is FamilyKind.LOGISTIC:
        mu = expit(eta)
    else:
        with np.errstate(over="ignore"):
            mu = np.exp(eta)
        if np.any(mu > POISSON_MEAN_CAP):
            warnings.warn(
                f"poisson mean exceeds {POISSON_MEAN_CAP:g}; "
                "linear predictor may be diverging",
                RuntimeWarning,
                stacklevel=2,
            )
    if mu.ndim == 0:
        return float(mu)
    return mu


def variance_weight(family: FamilySpec, mu):
    """Variance function v(mu): 1, mu(1-mu) or mu, clamped away from 0."""
    mu = np.asarray(mu, dtype=float)
    if family.kind is FamilyKind.GAUSSIAN:
        w = np.ones_like(mu)
    elif family.kind is FamilyKind.LOGISTIC:
        m = np.clip(mu, LOGISTIC_MEAN_EPS, 1.0 - LOGISTIC_MEAN_EPS)
        w = m * (1.0 - m)
    else:
        w = np.maximum(mu, POISSON_WEIGHT_FLOOR)
    if w.ndim == 0:
        return float(w)
    return w


def score(family: FamilySpec, data: Dataset, beta: np.ndarray, phi: float) -> np.ndarray:
    """Average score vector (1/n) sum_i {y_i - mu_i(beta)} x_i / phi.

    Vanishes (within solver tolerance) at the unpenalised maximum
    likelihood estimate.
    """
    if phi <= 0:
        raise ValueError("phi must be positive")
    state = model_state(family, data, beta)
    return data.X.T @ (data.y - state.mu) / (data.n * phi)


def neg_hessian(family: FamilySpec, data: Dataset, beta: np.ndarray, phi: float) -> np.ndarray:
    """Negative Jacobian of the average score: (1/(n phi)) X^T P(beta) X.

    Symmetric positive semi-definite; P(beta) is the diagonal matrix of
    clamped variance weights.
    """
    if phi <= 0:
        raise ValueError("phi must be positive")
    state = model_state(family, data, beta)
    H = (data.X * state.weights[:, None]).T @ data.X / (data.n * phi)
    # Symmetrise: the BLAS product is symmetric only up to rounding.
    return 0.5 * (H + H.T)


def unit_deviance(family: FamilySpec, y, mu):
    """Per-observation unit deviance d(y, mu).

    gaussian: (y-mu)^2.  logistic and poisson use the standard binomial
    and Poisson deviances (saturated minus fitted log-likelihood, times
    two); these feed the cross-validation loss.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if family.kind is FamilyKind.GAUSSIAN:
        d = (y - mu) ** 2
    elif family.kind is FamilyKind.LOGISTIC:
        m = np.clip(mu, LOGISTIC_MEAN_EPS, 1.0 - LOGISTIC_MEAN_EPS)
        # 0*log(0) := 0 for degenerate observed proportions.
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(y > 0, y * np.log(y / m), 0.0)
            t2 = np.where(y < 1, (1 - y) * np.log((1 - y) / (1 - m)), 0.0)
        d = 2.0 * (t1 + t2)
    else:
        m = np.maximum(mu, POISSON_WEIGHT_FLOOR)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(y > 0, y * np.log(y / m), 0.0)
        d = 2.0 * (t - (y - m))
    if d.ndim == 0:
        return float(d)
    return d


def average_log_likelihood(family: FamilySpec, data: Dataset, beta: np.ndarray, phi: float) -> float:
    """(1/n) sum_i {y_i theta_i - b(theta_i)} / phi with theta = X beta.

    The exponential-family kernel whose gradient is :func:`score`; the
    c(y, phi) term is omitted since it does not depend on beta.
    """
    if phi <= 0:
        raise ValueError("phi must be positive")
    theta = data.X @ np.asarray(beta, dtype=float)
    if family.kind is FamilyKind.GAUSSIAN:
        b = 0.5 * theta**2
    elif family.kind is FamilyKind.LOGISTIC:
        # log(1 + e^t) computed without overflow for large |t|.
        b = np.maximum(theta, 0.0) + np.log1p(np.exp(-np.abs(theta)))
    else:
        with np.errstate(over="ignore"):
            b = np.exp(theta)
    return float(np.mean(data.y * theta - b) / phi)


def dispersion_estimate(family: FamilySpec, data: Dataset, fit) -> float:
    """Dispersion estimate from mean unit deviance at the fitted model.

    Under a fixed policy the fixed value is returned without any
    computation.  Otherwise phi-hat = sum_i d(y_i, mu_i) / (n - k)
    where k is the number of nonzero coefficients in the fit; a zero
    estimate (perfect fit) is returned but flagged with a warning, and
    k >= n is an error (oversaturated model).

    Parameters
    ----------
    fit : object with a ``beta`` attribute
        Typically a LassoFit; only the coefficient vector is used.
    """
    if family.dispersion_is_fixed:
        return float(family.fixed_dispersion)
    beta = np.asarray(fit.beta, dtype=float)
    n_nonzero = int(np.count_nonzero(beta))
    df = data.n - n_nonzero
    if df <= 0:
        raise ValueError(
            f"cannot estimate dispersion: {n_nonzero} nonzero coefficients "
            f"leave {df} degrees of freedom (oversaturated model)"
        )
    mu = link_inverse(family, data.X @ beta)
    phi = float(np.sum(unit_deviance(family, data.y, mu))) / df
    if phi == 0.0:
        warnings.warn(
            "zero deviance: dispersion estimate is degenerate (perfect fit)",
            RuntimeWarning,
            stacklevel=2,
        )
    return phi
