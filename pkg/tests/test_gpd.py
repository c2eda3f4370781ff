import numpy as np
import pytest
from scipy import integrate

from evtail.common.exceptions import (
    FitException,
    InsufficientDataException,
    ParameterDomainException,
    SupportException,
)
from evtail.module.gpd import (
    GpdParams,
    TailModel,
    WindowStats,
    decluster_runs,
    extract_exceedances,
    extremal_index,
    fit_gpd_mle,
    fit_gpd_moments,
    gpd_cdf,
    gpd_log_pdf,
    gpd_log_pdf_grad,
    gpd_nll,
    gpd_quantile,
    gpd_sample,
    tail_probability,
    tail_quantile,
)
from evtail.module.series import ExceedanceSet

SHAPES = (-0.4, 0.0, 0.4)


class TestParams:
    def test_non_positive_scale_rejected(self):
        with pytest.raises(ParameterDomainException):
            GpdParams(0.1, 0.0)

    def test_non_finite_rejected(self):
        with pytest.raises(ParameterDomainException):
            GpdParams(float("nan"), 1.0)

    def test_upper_endpoint(self):
        assert GpdParams(-0.5, 2.0).upper_endpoint == pytest.approx(4.0)
        assert np.isinf(GpdParams(0.1, 2.0).upper_endpoint)


class TestDistribution:
    @pytest.mark.parametrize("shape", SHAPES)
    def test_quantile_inverts_cdf(self, shape):
        params = GpdParams(shape, 1.3)
        p = np.linspace(0.0, 0.999, 500)
        assert np.max(np.abs(gpd_cdf(gpd_quantile(p, params), params) - p)) <= 1e-10

    @pytest.mark.parametrize("shape", SHAPES)
    def test_density_integrates_to_one(self, shape):
        params = GpdParams(shape, 1.0)
        upper = params.upper_endpoint
        total, _ = integrate.quad(lambda z: np.exp(gpd_log_pdf(z, params)), 0.0, upper, limit=200)
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_cdf_is_one_beyond_upper_endpoint(self):
        params = GpdParams(-0.5, 1.0)
        assert gpd_cdf(2.0, params) == 1.0
        assert gpd_cdf(5.0, params) == 1.0

    def test_cdf_zero_at_origin(self):
        assert gpd_cdf(0.0, GpdParams(0.3, 2.0)) == 0.0

    def test_negative_deficit_rejected(self):
        with pytest.raises(ParameterDomainException):
            gpd_cdf(-0.1, GpdParams(0.1, 1.0))

    def test_exponential_limit(self):
        params = GpdParams(0.0, 2.0)
        z = np.array([0.5, 1.0, 4.0])
        np.testing.assert_allclose(gpd_cdf(z, params), 1 - np.exp(-z / 2.0), rtol=1e-12)
        np.testing.assert_allclose(gpd_log_pdf(z, params), -np.log(2.0) - z / 2.0, rtol=1e-12)

    def test_log_pdf_outside_support(self):
        params = GpdParams(-0.5, 1.0)
        assert gpd_log_pdf(3.0, params) == -np.inf
        with pytest.raises(SupportException):
            gpd_log_pdf(3.0, params, strict=True)

    def test_quantile_rejects_one(self):
        with pytest.raises(ParameterDomainException):
            gpd_quantile(1.0, GpdParams(0.1, 1.0))

    def test_sampler_matches_cdf(self, tail_params):
        z = np.sort(gpd_sample(200_000, tail_params, rng=3))
        n = len(z)
        cdf = gpd_cdf(z, tail_params)
        ks = max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))
        assert ks <= 0.005

    def test_nll_is_infinite_outside_support(self):
        assert gpd_nll([0.5, 3.0], GpdParams(-0.5, 1.0)) == np.inf


class TestReferenceValues:
    def test_cdf(self):
        assert gpd_cdf(1.0, GpdParams(0.5, 1.0)) == pytest.approx(5 / 9)
        assert gpd_cdf(2.0, GpdParams(0.0, 1.0)) == pytest.approx(1 - np.exp(-2.0))

    def test_log_pdf(self):
        assert gpd_log_pdf(0.0, GpdParams(0.5, 2.0)) == pytest.approx(np.log(0.5))
        assert gpd_log_pdf(3.0, GpdParams(0.0, 1.5)) == pytest.approx(-np.log(1.5) - 2.0)
        with pytest.raises(SupportException):
            gpd_log_pdf(10.0, GpdParams(-0.5, 1.0), strict=True)

    def test_quantile(self):
        assert gpd_quantile(5 / 9, GpdParams(0.5, 1.0)) == pytest.approx(1.0)
        assert gpd_quantile(1 - np.exp(-2.0), GpdParams(0.0, 1.0)) == pytest.approx(2.0)

    def test_bounded_support_samples(self):
        params = GpdParams(-0.3, 2.0)
        z = gpd_sample(100_000, params, rng=11)
        assert np.all((z >= 0) & (z < params.upper_endpoint))
        assert params.upper_endpoint == pytest.approx(20 / 3)
        assert len(gpd_sample(0, params)) == 0

    def test_exponential_tail_probability(self):
        model = TailModel(-60.0, GpdParams(0.0, 2.0), WindowStats(n=100, n_u=5))
        assert tail_probability(model, -64.0) == pytest.approx(0.05 * np.exp(-2.0))


class TestLogPdfGrad:
    @pytest.mark.parametrize("shape", (-0.3, 0.2, 0.45))
    def test_matches_finite_differences(self, shape):
        z = np.array([0.1, 0.7, 1.5])
        scale, eps = 1.2, 1e-6
        log_p, d_xi, d_beta = gpd_log_pdf_grad(z, shape, scale)
        np.testing.assert_allclose(log_p, gpd_log_pdf(z, GpdParams(shape, scale)), rtol=1e-12)

        def f(xi, beta):
            return gpd_log_pdf_grad(z, xi, beta)[0]

        num_xi = (f(shape + eps, scale) - f(shape - eps, scale)) / (2 * eps)
        num_beta = (f(shape, scale + eps) - f(shape, scale - eps)) / (2 * eps)
        np.testing.assert_allclose(d_xi, num_xi, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(d_beta, num_beta, rtol=1e-5, atol=1e-8)

    def test_exponential_limit_branch(self):
        z = np.array([0.5, 2.0])
        _, d_xi, d_beta = gpd_log_pdf_grad(z, 0.0, 1.0)
        np.testing.assert_allclose(d_xi, z**2 / 2 - z)
        np.testing.assert_allclose(d_beta, -1 + z)

    def test_finite_outside_support(self):
        log_p, d_xi, d_beta = gpd_log_pdf_grad(np.array([5.0]), -0.5, 1.0)
        assert np.all(np.isfinite(log_p)) and np.all(np.isfinite(d_xi)) and np.all(np.isfinite(d_beta))


class TestMomentFit:
    def test_exponential_like_sample(self):
        params = fit_gpd_moments(np.array([0, 0, 1, 2, 2], dtype=float))
        assert params.shape == pytest.approx(0.0, abs=1e-12)
        assert params.scale == pytest.approx(1.0)

    def test_heavy_sample(self):
        params = fit_gpd_moments(np.array([0, 0, 0, 2, 3], dtype=float))
        assert params.shape == pytest.approx(0.25)
        assert params.scale == pytest.approx(0.75)

    def test_too_few_samples(self):
        with pytest.raises(FitException):
            fit_gpd_moments(np.array([1.0, 2.0, 3.0]))

    def test_zero_variance(self):
        with pytest.raises(FitException):
            fit_gpd_moments(np.full(10, 2.0))


class TestMle:
    def test_recovers_parameters(self, tail_params):
        z = gpd_sample(100_000, tail_params, rng=11)
        fit = fit_gpd_mle(z)
        assert 0.18 <= fit.params.shape <= 0.22
        assert fit.params.scale == pytest.approx(1.0, rel=0.03)
        assert fit.sample_count == 100_000
        assert fit.nll == pytest.approx(gpd_nll(z, fit.params))

    def test_negative_shape(self):
        z = gpd_sample(50_000, GpdParams(-0.2, 1.0), rng=5)
        fit = fit_gpd_mle(z)
        assert fit.params.shape == pytest.approx(-0.2, abs=0.03)
        assert np.isfinite(gpd_nll(z, fit.params))

    def test_not_worse_than_start(self, tail_params):
        z = gpd_sample(200, tail_params, rng=1)
        fit = fit_gpd_mle(z)
        assert fit.nll <= gpd_nll(z, fit_gpd_moments(z)) + 1e-9

    def test_accepts_exceedance_set(self, tail_params):
        z = gpd_sample(500, tail_params, rng=2)
        exc = ExceedanceSet(deficits=z, source_indices=np.arange(500), threshold=-64.0)
        assert fit_gpd_mle(exc).sample_count == 500

    def test_identical_data_rejected(self):
        with pytest.raises(FitException):
            fit_gpd_mle(np.full(20, 1.5))

    def test_too_few_samples(self):
        with pytest.raises(FitException):
            fit_gpd_mle(np.array([0.1, 0.5, 0.9]))


class TestExceedances:
    def test_extract(self):
        exc = extract_exceedances(np.array([-60.0, -65.0, -70.0, -59.0]), -64.0)
        np.testing.assert_allclose(exc.deficits, [1.0, 6.0])
        np.testing.assert_array_equal(exc.source_indices, [1, 2])
        np.testing.assert_allclose(exc.values, [-65.0, -70.0])

    def test_extract_empty(self):
        assert len(extract_exceedances(np.array([-60.0, -61.0]), -70.0)) == 0

    def test_extract_rejects_non_finite_threshold(self):
        with pytest.raises(ParameterDomainException):
            extract_exceedances(np.array([-60.0]), float("nan"))

    def test_decluster_keeps_cluster_maxima(self):
        exc = ExceedanceSet(
            deficits=np.array([1.0, 3.0, 2.0, 5.0, 5.0]),
            source_indices=np.array([0, 1, 2, 20, 21]),
            threshold=0.0,
        )
        out = decluster_runs(exc, run_gap=10)
        np.testing.assert_array_equal(out.source_indices, [1, 20])
        np.testing.assert_allclose(out.deficits, [3.0, 5.0])

    def test_decluster_zero_gap_is_identity(self):
        exc = ExceedanceSet(np.array([1.0, 2.0]), np.array([3, 4]), 0.0)
        out = decluster_runs(exc, run_gap=0)
        np.testing.assert_array_equal(out.source_indices, exc.source_indices)

    def test_decluster_separated_runs_untouched(self):
        exc = ExceedanceSet(np.array([1.0, 2.0, 3.0]), np.array([0, 20, 40]), 0.0)
        assert len(decluster_runs(exc, run_gap=10)) == 3

    def test_values_reconstruct_exactly(self, rng):
        series = rng.uniform(-70.0, -60.0, 5000)
        exc = extract_exceedances(series, -64.0)
        np.testing.assert_array_equal(exc.values, series[exc.source_indices])
        np.testing.assert_array_equal(exc.values, series[series < -64.0])

    @pytest.mark.parametrize("run_gap", [1, 3, 10])
    def test_decluster_is_idempotent(self, rng, run_gap):
        series = rng.normal(-60.0, 3.0, 5000)
        once = decluster_runs(extract_exceedances(series, -63.0), run_gap)
        twice = decluster_runs(once, run_gap)
        np.testing.assert_array_equal(twice.source_indices, once.source_indices)
        np.testing.assert_array_equal(twice.deficits, once.deficits)
        assert np.all(np.diff(once.source_indices) > run_gap)

    def test_extremal_index(self):
        exc = ExceedanceSet(
            deficits=np.array([1.0, 3.0, 2.0, 5.0, 5.0, 0.5]),
            source_indices=np.array([0, 1, 2, 20, 21, 40]),
            threshold=0.0,
        )
        assert extremal_index(exc, run_gap=10) == pytest.approx(0.5)
        assert extremal_index(exc, run_gap=0) == 1.0

    def test_extremal_index_needs_exceedances(self):
        with pytest.raises(InsufficientDataException):
            extremal_index(ExceedanceSet(np.empty(0), np.empty(0, dtype=int), 0.0))


class TestTailProbability:
    def model(self, n_u=5):
        return TailModel(-64.0, GpdParams(0.2, 1.0), WindowStats(n=100, n_u=n_u))

    def test_pot_composition(self):
        model = self.model()
        expected = 0.05 * (1 - gpd_cdf(1.0, model.params))
        assert tail_probability(model, -65.0) == pytest.approx(expected)

    def test_tau_at_threshold_rejected(self):
        with pytest.raises(ParameterDomainException):
            tail_probability(self.model(), -64.0)

    def test_no_exceedances(self):
        assert tail_probability(self.model(n_u=0), -70.0) == 0.0

    def test_quantile_inverts_probability(self):
        model = self.model()
        level = tail_quantile(model, 1e-3)
        assert level < model.threshold
        assert tail_probability(model, level) == pytest.approx(1e-3, rel=1e-9)

    def test_quantile_out_of_range(self):
        with pytest.raises(ParameterDomainException):
            tail_quantile(self.model(), 0.5)

    def test_round_trip_dict(self):
        model = self.model()
        restored = TailModel.from_dict(model.to_dict())
        assert restored.params == model.params
        assert restored.window_stats == model.window_stats
