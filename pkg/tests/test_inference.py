import numpy as np
import pytest
from scipy.linalg import LinAlgError

from dacglm.families import Dataset, FamilyKind, FamilySpec, link_inverse, variance_weight
from dacglm.inference import (
    BatchSummary,
    confidence_density,
    covariance,
    debias,
    debias_subgradient_route,
    load_summary,
    save_summary,
    summary_from_dict,
    summary_to_dict,
    wald_inference,
)
from dacglm.lasso import LassoFit, PenaltyConfig, fit_lasso, lambda_max

GAUSSIAN = FamilySpec.gaussian()
LOGISTIC = FamilySpec.logistic()
POISSON = FamilySpec.poisson()


def gaussian_fit(n, p, seed, lam_frac=0.3, rho=0.0):
    rng = np.random.default_rng(seed)
    if rho > 0:
        z0 = rng.standard_normal((n, 1))
        X = np.sqrt(rho) * z0 + np.sqrt(1 - rho) * rng.standard_normal((n, p))
    else:
        X = rng.standard_normal((n, p))
    beta0 = np.zeros(p)
    beta0[: min(3, p)] = 0.5
    y = X @ beta0 + rng.standard_normal(n)
    data = Dataset(y=y, X=X)
    lam = lam_frac * lambda_max(data, GAUSSIAN)
    return data, fit_lasso(data, GAUSSIAN, lam)


def newton_step_oracle(data, family, beta, phi):
    """Dense one-step Newton update on the unpenalised likelihood."""
    mu = link_inverse(family, data.X @ beta)
    v = variance_weight(family, mu)
    H = (data.X * v[:, None]).T @ data.X / (data.n * phi)
    g = data.X.T @ (data.y - mu) / (data.n * phi)
    return beta + np.linalg.solve(H, g)


class TestDebias:
    def test_correction_vanishes_at_least_squares(self):
        data, _ = gaussian_fit(60, 5, seed=0)
        fit = fit_lasso(data, GAUSSIAN, 0.0, PenaltyConfig(tol=1e-12))
        summary = debias(fit, data, GAUSSIAN, 1.0)
        assert np.max(np.abs(summary.beta_c - fit.beta)) < 1e-10

    def test_gaussian_closed_form(self):
        data, fit = gaussian_fit(80, 6, seed=1)
        summary = debias(fit, data, GAUSSIAN, 1.0)
        X, y = data.X, data.y
        oracle = fit.beta + np.linalg.solve(X.T @ X, X.T @ (y - X @ fit.beta))
        assert np.max(np.abs(summary.beta_c - oracle)) < 1e-10

    def test_logistic_hand_built_newton_step(self):
        X = np.array([[1.0, 0.5], [1.0, -0.5], [-1.0, 0.3],
                      [0.4, 1.0], [-0.6, -1.0], [0.2, -0.1]])
        y = np.array([1.0, 1.0, 0.0, 1.0, 0.0, 0.0])
        data = Dataset(y=y, X=X)
        fit = LassoFit(beta=np.array([0.4, 0.2]), lam=0.05,
                       subgradient=np.ones(2), n_iter=1, converged=True,
                       kkt_violation=0.0)
        summary = debias(fit, data, LOGISTIC, 1.0)
        oracle = newton_step_oracle(data, LOGISTIC, fit.beta, 1.0)
        assert np.max(np.abs(summary.beta_c - oracle)) < 1e-10

    @pytest.mark.parametrize("family", [GAUSSIAN, LOGISTIC, POISSON],
                             ids=["gaussian", "logistic", "poisson"])
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_dense_newton_oracle(self, family, seed):
        rng = np.random.default_rng(500 + seed)
        n = int(rng.integers(20, 51))
        p = int(rng.integers(2, 9))
        X = rng.standard_normal((n, p))
        beta0 = rng.normal(scale=0.2, size=p)
        eta = X @ beta0
        if family.kind is FamilyKind.GAUSSIAN:
            y = eta + rng.standard_normal(n)
            phi = 1.3
        elif family.kind is FamilyKind.LOGISTIC:
            y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
            phi = 1.0
        else:
            y = rng.poisson(np.exp(eta)).astype(float)
            phi = 1.0
        data = Dataset(y=y, X=X)
        lam = 0.4 * lambda_max(data, family)
        fit = fit_lasso(data, family, lam)
        summary = debias(fit, data, family, phi)
        oracle = newton_step_oracle(data, family, fit.beta, phi)
        assert np.max(np.abs(summary.beta_c - oracle)) < 1e-9

    def test_requires_converged_fit(self):
        data, fit = gaussian_fit(40, 4, seed=2)
        bad = LassoFit(beta=fit.beta, lam=fit.lam, subgradient=fit.subgradient,
                       n_iter=1, converged=False, kkt_violation=1.0)
        with pytest.raises(ValueError, match="non-converged"):
            debias(bad, data, GAUSSIAN, 1.0)
        debias(bad, data, GAUSSIAN, 1.0, force=True)

    def test_singular_information_demands_ridge(self):
        rng = np.random.default_rng(3)
        col = rng.standard_normal(30)
        X = np.column_stack([col, col])  # exactly collinear
        y = col + 0.1 * rng.standard_normal(30)
        data = Dataset(y=y, X=X)
        fit = LassoFit(beta=np.zeros(2), lam=0.5, subgradient=np.zeros(2),
                       n_iter=1, converged=True, kkt_violation=0.0)
        with pytest.raises(LinAlgError, match="ridge"):
            debias(fit, data, GAUSSIAN, 1.0)
        summary = debias(fit, data, GAUSSIAN, 1.0, auto_ridge=True)
        assert summary.ridge_tau > 0.0

    def test_ridge_continuity(self):
        data, fit = gaussian_fit(100, 6, seed=4)
        base = debias(fit, data, GAUSSIAN, 1.0).beta_c
        diffs = []
        for tau in (1e-2, 5e-3, 2.5e-3):
            ridged = debias(fit, data, GAUSSIAN, 1.0, ridge_tau=tau).beta_c
            diffs.append(np.max(np.abs(ridged - base)))
        # deviation shrinks about linearly as tau halves
        assert diffs[1] < 0.75 * diffs[0]
        assert diffs[2] < 0.75 * diffs[1]

    def test_subgradient_route_agrees_when_kkt_holds(self):
        data, fit = gaussian_fit(120, 8, seed=5, lam_frac=0.4)
        summary = debias(fit, data, GAUSSIAN, 1.0)
        alt = debias_subgradient_route(fit, data, GAUSSIAN, 1.0)
        assert np.max(np.abs(summary.beta_c - alt)) < 1e-6

    def test_affine_equivariance_of_estimate_and_se(self):
        data, _ = gaussian_fit(90, 5, seed=6)
        fit = fit_lasso(data, GAUSSIAN, 0.0, PenaltyConfig(tol=1e-12))
        summary = debias(fit, data, GAUSSIAN, 1.0)
        rows = wald_inference(summary, 0.95)
        c = 4.0
        X2 = data.X.copy()
        X2[:, 2] *= c
        data2 = Dataset(y=data.y, X=X2)
        fit2 = fit_lasso(data2, GAUSSIAN, 0.0, PenaltyConfig(tol=1e-12))
        summary2 = debias(fit2, data2, GAUSSIAN, 1.0)
        rows2 = wald_inference(summary2, 0.95)
        assert rows2[2].estimate == pytest.approx(rows[2].estimate / c, rel=1e-10)
        assert rows2[2].std_error == pytest.approx(rows[2].std_error / c, rel=1e-10)


class TestCovariance:
    def test_scaled_identity_design(self):
        data = Dataset(y=np.zeros(2), X=np.sqrt(2.0) * np.eye(2))
        fit = LassoFit(beta=np.zeros(2), lam=0.0, subgradient=np.zeros(2),
                       n_iter=1, converged=True, kkt_violation=0.0)
        summary = debias(fit, data, GAUSSIAN, 1.0)
        np.testing.assert_allclose(covariance(summary), np.eye(2), atol=1e-12)

    def test_identity_precision(self):
        n = 7
        summary = BatchSummary(beta_c=np.zeros(3), precision=n * np.eye(3),
                               n=n, phi_hat=1.0, lam=0.1)
        np.testing.assert_allclose(covariance(summary), np.eye(3), atol=1e-12)

    def test_ridge_tau_propagates(self):
        rng = np.random.default_rng(7)
        col = rng.standard_normal(40)
        X = np.column_stack([col, col + 1e-13 * rng.standard_normal(40)])
        data = Dataset(y=col, X=X)
        fit = LassoFit(beta=np.zeros(2), lam=0.1, subgradient=np.zeros(2),
                       n_iter=1, converged=True, kkt_violation=0.0)
        summary = debias(fit, data, GAUSSIAN, 1.0, auto_ridge=True)
        assert summary.ridge_tau > 0.0
        cov = covariance(summary)
        assert np.all(np.isfinite(cov))


class TestConfidenceDensity:
    def test_log_density_ratio_is_quadratic(self):
        summary = BatchSummary(beta_c=np.array([1.0, -2.0]),
                               precision=np.diag([4.0, 9.0]), n=10,
                               phi_hat=1.0, lam=0.05)
        dens = confidence_density(summary)
        delta = 0.3
        shifted = summary.beta_c + np.array([delta, 0.0])
        ratio = dens.log_density(shifted) - dens.log_density(summary.beta_c)
        assert ratio == pytest.approx(-0.5 * delta**2 * 4.0)

    def test_precision_is_shared_object(self):
        summary = BatchSummary(beta_c=np.zeros(2), precision=np.eye(2), n=5,
                               phi_hat=1.0, lam=0.0)
        dens = confidence_density(summary)
        assert dens.precision is summary.precision

    def test_identical_inputs_identical_density(self):
        a = BatchSummary(beta_c=np.array([0.5]), precision=np.array([[2.0]]),
                         n=4, phi_hat=1.0, lam=0.1)
        b = BatchSummary(beta_c=np.array([0.5]), precision=np.array([[2.0]]),
                         n=4, phi_hat=1.0, lam=0.1)
        grid = np.linspace(-2, 2, 17)
        for x in grid:
            assert confidence_density(a).log_density([x]) == \
                confidence_density(b).log_density([x])

    def test_gaussian_density_matches_design_quadratic(self):
        data, fit = gaussian_fit(50, 3, seed=8)
        phi = 1.7
        summary = debias(fit, data, GAUSSIAN, phi)
        dens = confidence_density(summary)
        rng = np.random.default_rng(9)
        point = summary.beta_c + rng.normal(scale=0.1, size=3)
        d = point - summary.beta_c
        expected = -0.5 * d @ (data.X.T @ data.X / phi) @ d
        assert dens.log_density(point) == pytest.approx(expected, rel=1e-10)


class TestWaldInference:
    def _summary(self, estimate, var, n=1):
        prec = n * np.linalg.inv(np.atleast_2d(var))
        return BatchSummary(beta_c=np.atleast_1d(estimate), precision=prec,
                            n=n, phi_hat=1.0, lam=0.0)

    def test_standard_normal_quantile(self):
        rows = wald_inference(self._summary([0.0], [[1.0]]), 0.95)
        assert rows[0].ci_lo == pytest.approx(-1.959964, abs=1e-6)
        assert rows[0].ci_hi == pytest.approx(1.959964, abs=1e-6)
        assert rows[0].p_value == pytest.approx(1.0)

    def test_borderline_p_value(self):
        rows = wald_inference(self._summary([1.959964], [[1.0]]), 0.95)
        assert rows[0].p_value == pytest.approx(0.05, abs=1e-6)

    def test_zero_se_flagged_degenerate(self):
        class Combined:
            beta = np.array([1.0])
            covariance = np.array([[0.0]])

        rows = wald_inference(Combined(), 0.95)
        assert rows[0].degenerate
        assert rows[0].p_value == 0.0
        assert rows[0].ci_lo == rows[0].ci_hi == 1.0

    def test_level_domain(self):
        with pytest.raises(ValueError, match="level"):
            wald_inference(self._summary([0.0], [[1.0]]), 1.0)

    def test_names_attach(self):
        rows = wald_inference(self._summary([0.0], [[1.0]]), 0.9, names=["slope"])
        assert rows[0].coefficient == "slope"


class TestSerialization:
    def test_round_trip_is_exact(self):
        data, fit = gaussian_fit(60, 5, seed=10)
        summary = debias(fit, data, GAUSSIAN, 1.2345)
        restored = summary_from_dict(summary_to_dict(summary))
        assert np.array_equal(restored.beta_c, summary.beta_c)
        assert np.array_equal(restored.precision, summary.precision)
        assert restored.n == summary.n
        assert restored.phi_hat == summary.phi_hat
        assert restored.lam == summary.lam

    def test_file_round_trip(self, tmp_path):
        data, fit = gaussian_fit(40, 3, seed=11)
        summary = debias(fit, data, GAUSSIAN, 1.0)
        path = tmp_path / "summary.json"
        save_summary(summary, path)
        restored = load_summary(path)
        assert np.array_equal(restored.beta_c, summary.beta_c)
        assert np.array_equal(restored.precision, summary.precision)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="bad.json"):
            load_summary(path)

    def test_malformed_record_rejected(self):
        with pytest.raises(ValueError, match="malformed"):
            summary_from_dict({"p": 2})
        with pytest.raises(ValueError, match="triangle"):
            summary_from_dict({"p": 2, "n": 4, "phi_hat": 1.0, "lambda": 0.0,
                               "beta_c": [0.0, 0.0], "precision": [1.0]})


class TestBatchSummaryValidation:
    def test_asymmetric_precision_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            BatchSummary(beta_c=np.zeros(2),
                         precision=np.array([[1.0, 0.5], [0.0, 1.0]]),
                         n=3, phi_hat=1.0, lam=0.0)

    def test_nonpositive_phi_rejected(self):
        with pytest.raises(ValueError, match="phi"):
            BatchSummary(beta_c=np.zeros(1), precision=np.eye(1), n=3,
                         phi_hat=0.0, lam=0.0)
