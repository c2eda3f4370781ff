import numpy as np
import pytest

from evtail.common.exceptions import ConfigException, InsufficientDataException, TrainingDivergedException
from evtail.module.diagnostics import FixedSource, evaluate_model
from evtail.module.estimator import (
    EstimatorBuffer,
    EstimatorConfig,
    EstimatorNets,
    NetSource,
    batch_thresholds,
    discriminator_loss,
    draw_uniforms,
    estimate,
    estimate_batch,
    generator_loss,
    predict_threshold,
    stratified_batches,
    threshold_loss,
    train_estimator,
    train_param_net_kl,
    train_threshold_net,
    validation_ks,
    warm_start_param_net,
)
from evtail.module.neural import DenseNet
from evtail.module.gpd import TailModel, WindowStats, extract_exceedances, fit_gpd_mle
from evtail.module.synth import RegimeSpec, SynthConfig, generate_synthetic, windows_from_cells

WINDOW = 30


def _cfg(**kwargs):
    base = dict(window=WINDOW, n_min=5, hidden=8, disc_hidden=8)
    base.update(kwargs)
    return EstimatorConfig(**base)


def _smooth_nets(cfg, seed=0):
    """勾配検査用に滑らかな活性化だけで組んだネットワーク"""
    rng = np.random.default_rng(seed)
    nets = EstimatorNets.build(cfg, rng)
    nets.threshold_net = DenseNet.build([cfg.window, 6, 1], "tanh", rng=rng)
    nets.param_net = DenseNet.build([cfg.window, 6, 2], "tanh", rng=rng)
    nets.discriminator = DenseNet.build([1, 6, 1], "tanh", rng=rng)
    return nets


def _windows(rng, n=4):
    return rng.normal(-60.0, 3.0, size=(n, WINDOW))


def _numeric_grads(net, loss, eps=1e-6):
    grads = []
    for param in net.parameters():
        flat = param.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(len(flat)):
            original = flat[i]
            flat[i] = original + eps
            plus = loss()
            flat[i] = original - eps
            minus = loss()
            flat[i] = original
            numeric[i] = (plus - minus) / (2 * eps)
        grads.append(numeric.reshape(param.shape))
    return grads


class TestBuffer:
    @pytest.mark.parametrize("stride, expected", [(1, 901), (10, 91)])
    def test_window_counts(self, stride, expected):
        buffer = EstimatorBuffer(window=100, stride=stride)
        assert sum(buffer.push(v) for v in range(1000)) == expected

    def test_window_holds_latest_samples(self):
        buffer = EstimatorBuffer(window=3)
        for v in range(5):
            buffer.push(v)
        assert buffer.ready
        np.testing.assert_array_equal(buffer.window, [2.0, 3.0, 4.0])

    def test_invalid(self):
        with pytest.raises(ConfigException):
            EstimatorBuffer(window=0)


class TestConfig:
    def test_n_min_below_window(self):
        with pytest.raises(ConfigException):
            EstimatorConfig(window=100, n_min=100)

    def test_unknown_key(self):
        with pytest.raises(ConfigException):
            EstimatorConfig.from_dict({"learning_rate": 1e-3})

    def test_round_trip(self):
        cfg = _cfg(outage_threshold=-70.0)
        assert EstimatorConfig.from_dict(cfg.to_dict()) == cfg

    def test_default_n_min_fits_tail_mass(self):
        # 5%のテールで長さ100のウィンドウに期待される超過は5個
        cfg = EstimatorConfig()
        assert cfg.n_min == 4
        assert cfg.n_min < 0.05 * cfg.window


class TestContract:
    def test_random_nets_satisfy_contract(self, rng):
        cfg = _cfg()
        for seed in range(5):
            nets = EstimatorNets.build(cfg, seed)
            windows = rng.normal(-60.0, rng.uniform(0.1, 10.0), size=(20, WINDOW))
            for w, model in zip(windows, estimate_batch(nets, windows)):
                assert np.min(w) <= model.threshold < np.median(w)
                assert -0.5 < model.params.shape < 0.5
                assert model.params.scale > 0
                assert model.window_stats.n == WINDOW

    def test_saturated_outputs_stay_inside_bounds(self, rng):
        nets = EstimatorNets.build(_cfg(), 0)
        nets.threshold_net.layers[-1].bias[:] = 50.0
        nets.param_net.layers[-1].bias[:] = [1e3, 1e3]
        w = rng.normal(-60.0, 3.0, WINDOW)
        model = estimate(nets, w)
        assert model.threshold < np.median(w)
        assert model.params.shape < 0.5

    def test_narrow_window_stays_below_median(self, rng):
        cfg = _cfg(window=31)
        nets = EstimatorNets.build(cfg, 0)
        nets.threshold_net.layers[-1].bias[:] = 50.0
        w = -60.0 + 1e-9 * rng.normal(size=31)
        model = estimate(nets, w)
        assert np.min(w) <= model.threshold < np.median(w)

    def test_window_with_median_at_minimum(self):
        cfg = _cfg(window=31)
        nets = EstimatorNets.build(cfg, 0)
        nets.threshold_net.layers[-1].bias[:] = 50.0
        w = np.concatenate([np.full(20, -60.0), np.linspace(-59.0, -50.0, 11)])
        model = estimate(nets, w)
        assert model.threshold == -60.0
        assert model.window_stats.n_u == 0

    def test_sample_order_does_not_matter(self, rng):
        nets = EstimatorNets.build(_cfg(), 2)
        w = rng.normal(-60.0, 3.0, WINDOW)
        assert estimate(nets, rng.permutation(w)) == estimate(nets, w)

    def test_shifted_window_shifts_threshold(self, rng):
        nets = EstimatorNets.build(_cfg(), 2)
        w = rng.normal(-60.0, 3.0, WINDOW)
        base, shifted = estimate(nets, w), estimate(nets, w + 5.0)
        assert shifted.threshold == pytest.approx(base.threshold + 5.0, abs=1e-9)
        assert shifted.params.shape == pytest.approx(base.params.shape, abs=1e-9)
        assert shifted.params.scale == pytest.approx(base.params.scale, abs=1e-9)

    def test_constant_window(self):
        nets = EstimatorNets.build(_cfg(), 0)
        model = estimate(nets, np.full(WINDOW, -60.0))
        assert model.threshold == -60.0
        assert model.window_stats.n_u == 0

    def test_constant_threshold_is_clipped_into_window(self, rng):
        nets = EstimatorNets.build(_cfg(), 0)
        nets.constant_threshold = -500.0
        w = rng.normal(-60.0, 3.0, WINDOW)
        assert predict_threshold(nets, w) == pytest.approx(np.min(w))
        assert batch_thresholds(nets, w[None, :])[0] == -500.0

    def test_buffer_query(self, rng):
        nets = EstimatorNets.build(_cfg(), 0)
        buffer = EstimatorBuffer(window=WINDOW)
        for v in rng.normal(-60.0, 3.0, WINDOW):
            buffer.push(v)
        assert estimate(nets, buffer).threshold == estimate(nets, buffer.window).threshold

    def test_nets_round_trip(self, rng):
        nets = EstimatorNets.build(_cfg(), 3)
        restored = EstimatorNets.from_dict(nets.to_dict())
        w = rng.normal(-60.0, 3.0, WINDOW)
        assert estimate(restored, w) == estimate(nets, w)

    def test_net_source(self, rng):
        nets = EstimatorNets.build(_cfg(), 3)
        w = rng.normal(-60.0, 3.0, WINDOW)
        assert NetSource(nets).tail_model(w, 0) == estimate(nets, w)


class TestThresholdLoss:
    def test_gradient_matches_finite_differences(self, rng):
        cfg = _cfg(n_min=20, lambda_tail=0.5)
        nets = _smooth_nets(cfg)
        windows = _windows(rng)
        first = threshold_loss(nets, windows, cfg)
        assert np.all(first.tail_terms > 0)

        def loss():
            return threshold_loss(nets, windows, cfg, frozen=first.frozen).loss

        for analytic, numeric in zip(first.grads, _numeric_grads(nets.threshold_net, loss)):
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)

    def test_penalty_only_without_exceedances(self):
        cfg = _cfg()
        nets = _smooth_nets(cfg)
        result = threshold_loss(nets, np.full((2, WINDOW), -60.0), cfg)
        assert np.all(result.fit_terms == 0)
        assert result.loss == pytest.approx(cfg.lambda_tail * np.mean(result.tail_terms))

    def test_empty_batch(self):
        cfg = _cfg()
        with pytest.raises(InsufficientDataException):
            threshold_loss(_smooth_nets(cfg), np.empty((0, WINDOW)), cfg)


class TestAdversarialLosses:
    def test_generator_gradient_matches_finite_differences(self, rng):
        cfg = _cfg()
        nets = _smooth_nets(cfg)
        windows = _windows(rng, 3)
        real_sets = [rng.exponential(1.0, size=k) for k in (4, 0, 6)]
        uniforms = draw_uniforms(real_sets, rng)
        result = generator_loss(nets, windows, real_sets, uniforms)
        assert len(result.synthetic[1]) == 0

        def loss():
            return generator_loss(nets, windows, real_sets, uniforms).loss

        for analytic, numeric in zip(result.grads, _numeric_grads(nets.param_net, loss)):
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)

    def test_uninformative_discriminator(self, rng):
        cfg = _cfg()
        nets = _smooth_nets(cfg)
        last = nets.discriminator.layers[-1]
        last.weight[:] = 0.0
        last.bias[:] = 0.0
        real = rng.exponential(1.0, 10)
        synthetic = rng.exponential(2.0, 7)
        loss_d, _ = discriminator_loss(nets.discriminator, real, synthetic)
        assert loss_d == pytest.approx(np.log(2))

        real_sets = [real]
        result = generator_loss(nets, _windows(rng, 1), real_sets, draw_uniforms(real_sets, rng))
        assert result.loss == pytest.approx(np.log(2))

    def test_generator_needs_exceedances(self, rng):
        cfg = _cfg()
        with pytest.raises(InsufficientDataException):
            generator_loss(_smooth_nets(cfg), _windows(rng, 2), [np.empty(0)] * 2, [np.empty(0)] * 2)


class TestWarmStart:
    def test_median_output_matches_pooled_fit(self, rng):
        cfg = _cfg()
        nets = EstimatorNets.build(cfg, 4)
        windows = rng.gumbel(-60.0, 2.0, size=(41, WINDOW))
        target = warm_start_param_net(nets, windows, cfg)
        assert target is not None
        params = [estimate(nets, w).params for w in windows]
        assert np.median([p.shape for p in params]) == pytest.approx(target.shape, abs=1e-6)
        assert np.median([p.scale for p in params]) == pytest.approx(target.scale, abs=1e-6)

    def test_skipped_without_exceedances(self):
        cfg = _cfg()
        nets = EstimatorNets.build(cfg, 4)
        before = [p.copy() for p in nets.param_net.parameters()]
        assert warm_start_param_net(nets, np.full((5, WINDOW), -60.0), cfg) is None
        for a, b in zip(before, nets.param_net.parameters()):
            np.testing.assert_array_equal(a, b)


class TestValidationKs:
    def test_nan_without_exceedances(self):
        cfg = _cfg()
        nets = EstimatorNets.build(cfg, 0)
        assert np.isnan(validation_ks(nets, np.full((3, WINDOW), -60.0), cfg))
        assert np.isnan(validation_ks(nets, np.empty((0, WINDOW)), cfg))

    def test_pooled_over_windows(self, rng):
        cfg = _cfg()
        nets = EstimatorNets.build(cfg, 0)
        ks = validation_ks(nets, rng.normal(-60.0, 3.0, size=(10, WINDOW)), cfg)
        assert 0.0 < ks <= 1.0


class TestStratifiedBatches:
    def test_round_robin(self, rng):
        labels = np.array([0] * 6 + [1] * 3)
        batches = stratified_batches(labels, 3, rng)
        flat = np.concatenate(batches)
        assert sorted(flat.tolist()) == list(range(9))
        assert set(labels[batches[0]]) == {0, 1}
        assert [len(b) for b in batches] == [3, 3, 3]


@pytest.fixture
def training_windows(two_regime_series):
    windows, labels = windows_from_cells(two_regime_series, [(0, 6000), (6000, 12000)], 50, 20)
    return windows, labels


class TestTraining:
    def test_threshold_training_needs_windows(self, small_estimator_config, rng):
        with pytest.raises(InsufficientDataException):
            train_threshold_net(rng.normal(size=(50, 50)), small_estimator_config)

    def test_adversarial_needs_threshold_net(self, small_estimator_config, training_windows):
        windows, labels = training_windows
        with pytest.raises(ConfigException):
            train_estimator(windows, labels, small_estimator_config)

    def test_pipeline_is_deterministic(self, small_estimator_config, training_windows):
        windows, labels = training_windows
        cfg = small_estimator_config

        def run():
            net, thr_history = train_threshold_net(windows, cfg, seed=1)
            nets, adv_history = train_estimator(windows, labels, cfg, seed=2, threshold_net=net)
            return net, thr_history, nets, adv_history

        net_a, thr_a, nets_a, adv_a = run()
        net_b, thr_b, nets_b, adv_b = run()
        assert [r.stage for r in thr_a] == ["threshold"] * len(thr_a)
        assert [r.stage for r in adv_a] == ["adversarial"] * len(adv_a)
        assert [r.val_metric for r in thr_a] == [r.val_metric for r in thr_b]
        for a, b in zip(nets_a.param_net.parameters(), nets_b.param_net.parameters()):
            np.testing.assert_array_equal(a, b)

        w = windows[0]
        model = estimate(nets_a, w)
        assert model.threshold < np.median(w)
        assert model.threshold == pytest.approx(predict_threshold(nets_a, w))

    def test_constant_threshold_ablation(self, small_estimator_config, training_windows):
        windows, labels = training_windows
        cfg = EstimatorConfig.from_dict({**small_estimator_config.to_dict(), "constant_threshold": True})
        nets, history = train_estimator(windows, labels, cfg, seed=0)
        assert nets.constant_threshold == pytest.approx(np.quantile(windows, 0.1))
        assert {r.stage for r in history} == {"adversarial-constant"}

    def test_mlp_kl(self, small_estimator_config, training_windows):
        windows, labels = training_windows
        cfg = small_estimator_config
        net, _ = train_threshold_net(windows, cfg, seed=1)
        nets, history = train_param_net_kl(windows, labels, cfg, seed=3, threshold_net=net)
        assert {r.stage for r in history} == {"mlp-kl"}
        assert all(np.isnan(r.loss_d) for r in history)
        assert all(np.isfinite(r.loss_g) for r in history)
        assert nets.threshold_net is not net
        np.testing.assert_array_equal(nets.threshold_net.parameters()[0], net.parameters()[0])


def _single_regime(length, seed, **regime):
    series, _ = generate_synthetic(
        SynthConfig(regimes=[RegimeSpec(**regime)], segment_lengths=[length], seed=seed)
    )
    return series


@pytest.fixture(scope="module")
def trained_single_regime():
    cfg = EstimatorConfig(window=100, stride=20)
    series = _single_regime(60_000, seed=3)
    windows, labels = windows_from_cells(series, [(0, len(series))], cfg.window, cfg.stride)
    net, _ = train_threshold_net(windows, cfg, seed=1)
    nets, history = train_estimator(windows, labels, cfg, seed=2, threshold_net=net)
    return nets, windows


@pytest.mark.slow
class TestSingleRegimeRecovery:
    """既知のテール (u*=-64, xi*=0.2, beta*=1) を持つ単一レジームで学習した推定器"""

    def test_threshold_and_parameters(self, trained_single_regime):
        nets, windows = trained_single_regime
        models = estimate_batch(nets, windows)
        assert np.median([m.threshold for m in models]) == pytest.approx(-64.0, abs=1.0)
        assert np.median([m.params.shape for m in models]) == pytest.approx(0.2, abs=0.1)
        assert np.median([m.params.scale for m in models]) == pytest.approx(1.0, rel=0.15)

    def test_goodness_of_fit_on_fresh_stream(self, trained_single_regime):
        nets, _ = trained_single_regime
        result = evaluate_model(NetSource(nets), _single_regime(100_000, seed=101), "evt-gan")
        assert result.aggregate.ks <= 0.10
        assert result.aggregate.ppcc >= 0.99

    def test_close_to_mle_with_far_more_data(self, trained_single_regime):
        # 120ウィンドウ分のデータで当てはめたMLEと同程度のKS
        nets, _ = trained_single_regime
        history = _single_regime(12_000, seed=202).values
        u = float(np.quantile(history, 0.05))
        exceedances = extract_exceedances(history, u)
        mle = FixedSource(
            {0: TailModel(u, fit_gpd_mle(exceedances).params, WindowStats(len(history), len(exceedances)))}
        )
        evt_ks, mle_ks = [], []
        for seed in range(20):
            fresh = _single_regime(1500, seed=300 + seed)
            evt_ks.append(evaluate_model(NetSource(nets), fresh, "evt-gan").aggregate.ks)
            mle_ks.append(evaluate_model(mle, fresh, "mle").aggregate.ks)
        assert np.median(evt_ks) <= 1.5 * np.median(mle_ks)


@pytest.mark.slow
class TestConstantThresholdAblation:
    def test_generator_loss_fluctuates_more(self, two_regime_config):
        config = SynthConfig(
            regimes=two_regime_config.regimes, segment_lengths=[20_000, 20_000], seed=11
        )
        series, _ = generate_synthetic(config)
        cfg = EstimatorConfig(window=100, stride=20, epochs=30, patience=30)
        windows, labels = windows_from_cells(series, [(0, 20_000), (20_000, 40_000)], cfg.window, cfg.stride)
        net, _ = train_threshold_net(windows, cfg, seed=0)
        constant_cfg = EstimatorConfig.from_dict({**cfg.to_dict(), "constant_threshold": True})

        def tail_std(run_cfg, seed, threshold_net=None):
            try:
                _, history = train_estimator(windows, labels, run_cfg, seed=seed, threshold_net=threshold_net)
            except TrainingDivergedException:
                return np.inf
            return float(np.nanstd([r.loss_g for r in history[-20:]]))

        wins = sum(
            tail_std(constant_cfg, seed) > tail_std(cfg, seed, net) for seed in range(5)
        )
        assert wins >= 4
