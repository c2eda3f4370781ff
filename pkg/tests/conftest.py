import numpy as np
import pytest

from evtail.module.estimator import EstimatorConfig
from evtail.module.gpd import GpdParams
from evtail.module.synth import RegimeSpec, SynthConfig, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tail_params():
    return GpdParams(shape=0.2, scale=1.0)


@pytest.fixture
def two_regime_config():
    return SynthConfig(
        regimes=[
            RegimeSpec(bulk_mean=-60.0, bulk_std=3.0, tail_threshold=-64.0, shape=0.2, scale=1.0),
            RegimeSpec(bulk_mean=-45.0, bulk_std=2.0, tail_threshold=-48.0, shape=-0.1, scale=0.8),
        ],
        segment_lengths=[6000, 6000],
        seed=7,
    )


@pytest.fixture
def two_regime_series(two_regime_config):
    series, _ = generate_synthetic(two_regime_config)
    return series


@pytest.fixture
def small_estimator_config():
    return EstimatorConfig(
        window=50,
        stride=5,
        n_min=5,
        batch_size=16,
        threshold_epochs=2,
        epochs=2,
        hidden=8,
        disc_hidden=8,
    )
