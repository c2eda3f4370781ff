import numpy as np
import pytest
from scipy import stats

from evtail.common.exceptions import ConfigException, FitException, InsufficientDataException
from evtail.module.augmentor import (
    AugmentConfig,
    HybridGenerator,
    VanillaGenerator,
    build_augmented_dataset,
    fit_generated_tail,
    generator_from_dict,
    hybrid_generate,
    train_augmentor,
    train_vanilla_gan,
)
from evtail.module.diagnostics import ks_statistic, tail_coverage_ks
from evtail.module.gpd import GpdParams, extract_exceedances, fit_gpd_mle, gpd_sample
from evtail.module.neural import DenseNet
from evtail.module.series import ORIGIN_REAL, ORIGIN_SYNTHETIC, SampleSeries
from evtail.module.synth import RegimeSpec, SynthConfig, generate_synthetic


def _hybrid(tail_probability, threshold=-64.0, regime=None, center=0.0, scale=1.0):
    return HybridGenerator(
        bulk_net=DenseNet.build([4, 8, 1], "relu", rng=0),
        threshold=threshold,
        params=GpdParams(0.2, 1.0),
        tail_probability=tail_probability,
        center=center,
        scale=scale,
        regime=regime,
    )


def _small_cfg(**kwargs):
    base = dict(batch_size=256, epochs=1, latent_dim=4, hidden=8, min_samples=1000)
    base.update(kwargs)
    return AugmentConfig(**base)


class TestHybridGenerator:
    def test_bulk_branch_stays_above_threshold(self):
        values = _hybrid(0.0).generate(5000, rng=1)
        assert np.all(values >= -64.0)

    def test_tail_branch_follows_gpd(self):
        values = _hybrid(1.0).generate(50_000, rng=2)
        assert np.all(values < -64.0)
        assert ks_statistic(-64.0 - values, GpdParams(0.2, 1.0)) <= 0.01

    def test_tail_branch_matches_direct_sampling(self):
        values = _hybrid(1.0).generate(100_000, rng=6)
        direct = gpd_sample(100_000, GpdParams(0.2, 1.0), rng=7)
        assert stats.ks_2samp(-64.0 - values, direct).statistic <= 0.01

    def test_tail_fraction(self):
        values = _hybrid(0.05, center=-60.0, scale=2.5).generate(100_000, rng=3)
        assert np.mean(values < -64.0) == pytest.approx(0.05, abs=0.005)

    def test_empty_draw(self):
        assert len(_hybrid(0.5).generate(0, rng=0)) == 0

    def test_negative_count(self):
        with pytest.raises(ConfigException):
            _hybrid(0.5).generate(-1)

    def test_invalid_probability(self):
        with pytest.raises(ConfigException):
            _hybrid(1.5)

    def test_series_is_tagged_synthetic(self):
        series = hybrid_generate(_hybrid(0.1, regime=2), 10, rng=0)
        assert np.all(series.origins == ORIGIN_SYNTHETIC)
        assert np.all(series.regimes == 2)

    def test_tail_model(self):
        model = _hybrid(0.05, regime=1).tail_model()
        assert model.threshold == -64.0
        assert model.window_stats.exceedance_rate == pytest.approx(0.05)

    @pytest.mark.parametrize(
        "gen",
        [
            _hybrid(0.1, center=-60.0, scale=2.0, regime=0),
            VanillaGenerator(DenseNet.build([4, 8, 1], "relu", rng=0), center=-60.0, scale=2.0),
        ],
    )
    def test_round_trip_dict(self, gen):
        restored = generator_from_dict(gen.to_dict())
        assert type(restored) is type(gen)
        np.testing.assert_array_equal(restored.generate(20, rng=5), gen.generate(20, rng=5))


class TestAugmentedDataset:
    @pytest.fixture
    def real(self, rng):
        return SampleSeries(
            rng.normal(-60.0, 3.0, 100), regimes=np.r_[np.zeros(60, int), np.ones(40, int)]
        )

    def test_ratio_zero_keeps_real_only(self, real):
        out = build_augmented_dataset(real, {0: _hybrid(0.1, regime=0)}, ratio=0.0, rng=0)
        assert len(out) == len(real)
        assert np.all(out.origins == ORIGIN_REAL)

    def test_ratio_one_doubles(self, real):
        gens = {0: _hybrid(0.1, regime=0), 1: _hybrid(0.1, threshold=-50.0, regime=1)}
        out = build_augmented_dataset(real, gens, ratio=1.0, rng=0)
        assert len(out) == 200
        np.testing.assert_array_equal(out.values[:100], real.values)
        assert np.all(out.origins[100:] == ORIGIN_SYNTHETIC)
        assert np.sum(out.regimes[100:] == 0) == 60
        assert np.sum(out.regimes[100:] == 1) == 40
        np.testing.assert_array_equal(out.real_only().values, real.values)

    def test_fractional_ratio_rounds_up(self, real):
        out = build_augmented_dataset(real, {None: _hybrid(0.1)}, ratio=0.015, rng=0)
        assert len(out) == 102
        assert out.regimes is None

    def test_needs_generator(self, real):
        with pytest.raises(ConfigException):
            build_augmented_dataset(real, {}, ratio=1.0)


class TestTraining:
    def test_per_regime(self, two_regime_series):
        gens, history = train_augmentor(two_regime_series, None, _small_cfg(), seed=0)
        assert set(gens) == {0, 1}
        assert {r.stage for r in history} == {"hybrid/regime-0", "hybrid/regime-1"}
        assert gens[0].threshold == pytest.approx(np.quantile(two_regime_series.values[:6000], 0.05))
        assert gens[1].tail_probability == pytest.approx(0.05, abs=0.001)
        assert all(np.isfinite(r.loss_d) and np.isfinite(r.loss_g) for r in history)

    def test_deterministic(self, two_regime_series):
        a, _ = train_augmentor(two_regime_series, None, _small_cfg(), seed=4)
        b, _ = train_augmentor(two_regime_series, None, _small_cfg(), seed=4)
        np.testing.assert_array_equal(a[1].generate(50, rng=0), b[1].generate(50, rng=0))

    def test_small_regime_is_skipped(self):
        cfg = SynthConfig(
            regimes=[RegimeSpec(), RegimeSpec(bulk_mean=-45.0, tail_threshold=-50.0)],
            segment_lengths=[6000, 2000],
            seed=1,
        )
        series, _ = generate_synthetic(cfg)
        gens, _ = train_augmentor(series, None, _small_cfg(min_samples=3000), seed=0)
        assert set(gens) == {0}

    def test_no_regime_has_enough_data(self, two_regime_series):
        with pytest.raises(InsufficientDataException):
            train_augmentor(two_regime_series, None, _small_cfg(min_samples=7000))

    def test_global_mode(self, two_regime_series):
        gens, history = train_augmentor(two_regime_series, None, _small_cfg(per_regime=False))
        assert set(gens) == {None}
        assert {r.stage for r in history} == {"hybrid"}

    def test_tail_is_fitted_to_every_exceedance(self):
        # 強い相関でクラスタ化したテールでも周辺分布の (0.2, 1.0) を当てる
        cfg = SynthConfig(regimes=[RegimeSpec()], segment_lengths=[40_000], rho=0.5, seed=13)
        series, _ = generate_synthetic(cfg)
        gens, _ = train_augmentor(series, None, _small_cfg(), seed=0)
        gen = gens[0]
        expected = fit_gpd_mle(extract_exceedances(series.values, gen.threshold)).params
        assert gen.params == expected
        assert gen.params.shape == pytest.approx(0.2, abs=0.12)
        assert gen.params.scale == pytest.approx(1.0, rel=0.15)

    def test_vanilla(self, two_regime_series):
        gens, history = train_vanilla_gan(two_regime_series, _small_cfg(), seed=0)
        assert set(gens) == {0, 1}
        assert {r.stage for r in history} == {"vanilla/regime-0", "vanilla/regime-1"}
        assert np.all(np.isfinite(gens[0].generate(100, rng=0)))


class TestGeneratedTail:
    def test_fit_recovers_tail(self):
        gen = _hybrid(0.05, center=-60.0, scale=2.5)
        model = fit_generated_tail(gen, -64.0, 100_000, rng=9, regime=0)
        assert model.params.shape == pytest.approx(0.2, abs=0.06)
        assert model.window_stats.n_u == pytest.approx(5000, rel=0.1)
        assert model.regime == 0

    def test_no_tail_coverage(self):
        with pytest.raises(FitException):
            fit_generated_tail(_hybrid(0.0), -64.0, 1000, rng=0)


@pytest.mark.slow
class TestTailCoverageAgainstVanilla:
    """実データと同じ裾を持つかを、テール分岐つきの生成器とバニラGANで比べる"""

    @staticmethod
    def _pair(truth, seed):
        series, _ = generate_synthetic(SynthConfig(regimes=[truth], segment_lengths=[20_000], seed=seed))
        hybrid, _ = train_augmentor(series, None, AugmentConfig(), seed=seed)
        vanilla, _ = train_vanilla_gan(series, AugmentConfig(), seed=seed)
        return hybrid[0], vanilla[0]

    def test_hybrid_covers_the_tail_better(self):
        truth = RegimeSpec()
        wins = 0
        for seed in range(20):
            hybrid, vanilla = self._pair(truth, seed)
            rng = np.random.default_rng(seed)
            hybrid_ks = tail_coverage_ks(hybrid.generate(200_000, rng), truth.tail_threshold, truth.tail_params)
            vanilla_ks = tail_coverage_ks(vanilla.generate(200_000, rng), truth.tail_threshold, truth.tail_params)
            wins += hybrid_ks < vanilla_ks
        assert wins >= 18

    def test_vanilla_extremes_are_shallower(self):
        truth = RegimeSpec(shape=0.4)
        shallower = 0
        for seed in range(20):
            hybrid, vanilla = self._pair(truth, seed)
            rng = np.random.default_rng(seed)
            hybrid_q = np.quantile(hybrid.generate(200_000, rng), 0.001)
            vanilla_q = np.quantile(vanilla.generate(200_000, rng), 0.001)
            shallower += vanilla_q > hybrid_q
        assert shallower >= 18
