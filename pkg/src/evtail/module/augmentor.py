"""オフラインのテール重視データ拡張

バルク部分をニューラル生成器で、テール部分をGPDのパラメトリックサンプリングで合成するハイブリッド生成器と、
比較用のテール分岐を持たないバニラGANを扱う。
"""

import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit

from ..common import evtail_logger
from ..common.decorators import log_elapsed
from ..common.exceptions import (
    ConfigException,
    FitException,
    InsufficientDataException,
    NumericalException,
)
from .estimator import EpochRecord
from .gpd import (
    GpdParams,
    TailModel,
    WindowStats,
    extract_exceedances,
    extremal_index,
    fit_gpd_mle,
    gpd_sample,
)
from .neural import AdamState, DenseNet, apply_adam, bce_with_logits, softplus
from .regimes import RegimeModel, label_samples
from .series import ORIGIN_REAL, ORIGIN_SYNTHETIC, SampleSeries


@dataclass
class AugmentConfig:
    """データ拡張の設定

    Attributes
    ----------
    batch_size: int
        ミニバッチのサンプル数
    epochs: int
        エポック数
    learning_rate: float
        生成器・識別器の学習率
    betas: tuple[float, float]
        Adamのモーメント係数
    latent_dim: int
        潜在変数の次元
    hidden: int
        隠れ層のユニット数
    per_regime: bool
        レジームごとに生成器を学習する (Falseなら全体で1つ)
    tail_quantile: float
        テール閾値として使う経験分位点
    min_samples: int
        レジームあたりに必要な実サンプル数
    ratio: float
        合成サンプル数と実サンプル数の比
    """

    batch_size: int = 1024
    epochs: int = 50
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    latent_dim: int = 16
    hidden: int = 64
    per_regime: bool = True
    tail_quantile: float = 0.05
    min_samples: int = 10_000
    ratio: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("batch_size", "epochs", "learning_rate", "latent_dim", "hidden", "min_samples"):
            if not getattr(self, name) > 0:
                raise ConfigException(f"{name} must be positive: {getattr(self, name)}")
        if not 0 < self.tail_quantile < 0.5:
            raise ConfigException(f"tail_quantile must lie in (0, 0.5): {self.tail_quantile}")
        if self.ratio < 0:
            raise ConfigException(f"ratio must be non-negative: {self.ratio}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["betas"] = list(data["betas"])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigException(f"Unknown augment config keys: {sorted(unknown)}")
        return cls(**data)


# ---
# 生成器
# ---


@dataclass(eq=False)
class _Draw:
    """生成サンプルと、生成器の出力に対する連鎖律の係数"""

    samples: np.ndarray
    tape: object | None
    active: np.ndarray
    chain: np.ndarray


def _robust_scale(values: np.ndarray) -> tuple[float, float]:
    q25, median, q75 = np.quantile(values, [0.25, 0.5, 0.75])
    iqr = q75 - q25
    return float(median), float(iqr) if iqr > 0 else 1.0


@dataclass(eq=False)
class HybridGenerator:
    """ハイブリッド生成器

    確率 p_u でテール分岐 (y = u - z, z ~ GPD) を、それ以外はバルク分岐 (y = u + softplus(g(eps))) を選ぶ。
    バルク網は中央値/IQRで標準化した空間で動作する。

    Attributes
    ----------
    bulk_net: DenseNet
        latent -> 64 -> 64 -> 1
    threshold: float
        テール閾値 u (dB)
    params: GpdParams
        テールのGPDパラメータ
    tail_probability: float
        テール分岐の確率 p_u
    center, scale: float
        標準化の定数
    regime: int | None
        対応するレジーム
    """

    bulk_net: DenseNet
    threshold: float
    params: GpdParams
    tail_probability: float
    center: float = 0.0
    scale: float = 1.0
    regime: int | None = None

    def __post_init__(self):
        if not 0 <= self.tail_probability <= 1:
            raise ConfigException(f"Tail probability must lie in [0, 1]: {self.tail_probability}")
        if not self.scale > 0:
            raise ConfigException(f"Standardization scale must be positive: {self.scale}")

    @property
    def latent_dim(self) -> int:
        return self.bulk_net.in_dim

    def _draw(self, n: int, rng: np.random.Generator) -> _Draw:
        """標準化空間でn個のサンプルを生成する"""
        u_std = (self.threshold - self.center) / self.scale
        tail = rng.random(n) < self.tail_probability
        samples = np.empty(n)
        samples[tail] = u_std - gpd_sample(int(tail.sum()), self.params, rng) / self.scale
        active = np.flatnonzero(~tail)
        latent = rng.standard_normal((len(active), self.latent_dim))
        tape, chain = None, np.empty(0)
        if len(active) > 0:
            raw, tape = self.bulk_net.forward(latent)
            samples[active] = u_std + softplus(raw[:, 0])
            chain = expit(raw[:, 0])
        return _Draw(samples=samples, tape=tape, active=active, chain=chain)

    def generate(self, n: int, rng: np.random.Generator | int | None = None) -> np.ndarray:
        if n < 0:
            raise ConfigException(f"Sample count must be non-negative: {n}")
        draw = self._draw(n, np.random.default_rng(rng))
        return self.center + self.scale * draw.samples

    def tail_model(self) -> TailModel:
        n = 1_000_000
        return TailModel(
            threshold=self.threshold,
            params=self.params,
            window_stats=WindowStats(n=n, n_u=int(round(self.tail_probability * n))),
            regime=self.regime,
        )

    def to_dict(self) -> dict:
        return {
            "kind": "hybrid",
            "bulk_net": self.bulk_net.to_dict(),
            "threshold": self.threshold,
            "params": self.params.to_dict(),
            "tail_probability": self.tail_probability,
            "center": self.center,
            "scale": self.scale,
            "regime": self.regime,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HybridGenerator":
        return cls(
            bulk_net=DenseNet.from_dict(data["bulk_net"]),
            threshold=float(data["threshold"]),
            params=GpdParams.from_dict(data["params"]),
            tail_probability=float(data["tail_probability"]),
            center=float(data["center"]),
            scale=float(data["scale"]),
            regime=data.get("regime"),
        )


@dataclass(eq=False)
class VanillaGenerator:
    """テール分岐を持たない比較用の生成器 (全サンプルを y = center + scale g(eps) で生成)"""

    net: DenseNet
    center: float = 0.0
    scale: float = 1.0
    regime: int | None = None

    def _draw(self, n: int, rng: np.random.Generator) -> _Draw:
        latent = rng.standard_normal((n, self.net.in_dim))
        if n == 0:
            return _Draw(np.empty(0), None, np.empty(0, dtype=int), np.empty(0))
        raw, tape = self.net.forward(latent)
        return _Draw(samples=raw[:, 0], tape=tape, active=np.arange(n), chain=np.ones(n))

    def generate(self, n: int, rng: np.random.Generator | int | None = None) -> np.ndarray:
        if n < 0:
            raise ConfigException(f"Sample count must be non-negative: {n}")
        draw = self._draw(n, np.random.default_rng(rng))
        return self.center + self.scale * draw.samples

    def to_dict(self) -> dict:
        return {
            "kind": "vanilla",
            "net": self.net.to_dict(),
            "center": self.center,
            "scale": self.scale,
            "regime": self.regime,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VanillaGenerator":
        return cls(
            net=DenseNet.from_dict(data["net"]),
            center=float(data["center"]),
            scale=float(data["scale"]),
            regime=data.get("regime"),
        )


Generator = HybridGenerator | VanillaGenerator


def generator_from_dict(data: dict) -> Generator:
    if data.get("kind") == "vanilla":
        return VanillaGenerator.from_dict(data)
    return HybridGenerator.from_dict(data)


def hybrid_generate(
    gen: HybridGenerator, n: int, rng: np.random.Generator | int | None = None
) -> SampleSeries:
    """ハイブリッド生成器からn個の合成サンプルを生成する"""
    values = gen.generate(n, rng)
    return SampleSeries(
        values=values,
        label="synthetic",
        origins=np.full(n, ORIGIN_SYNTHETIC, dtype=object),
        regimes=None if gen.regime is None else np.full(n, gen.regime, dtype=int),
    )


# ---
# 学習
# ---


def _sample_regimes(real: SampleSeries, cfg: AugmentConfig, regime_model: RegimeModel | None) -> np.ndarray:
    if not cfg.per_regime:
        return np.zeros(len(real), dtype=int)
    if real.regimes is not None:
        return real.regimes
    if regime_model is not None:
        return label_samples(regime_model, real)
    return np.zeros(len(real), dtype=int)


def _regime_values(
    real: SampleSeries, cfg: AugmentConfig, regime_model: RegimeModel | None
) -> dict[int | None, np.ndarray]:
    """学習対象のレジームごとの実サンプル (サンプル数が足りないレジームは除く)"""
    labels = _sample_regimes(real, cfg, regime_model)
    result: dict[int | None, np.ndarray] = {}
    for regime in np.unique(labels):
        values = real.values[labels == regime]
        key = int(regime) if cfg.per_regime else None
        if len(values) < cfg.min_samples:
            evtail_logger.warning(
                f"Regime {key} has {len(values)} samples (< {cfg.min_samples}); skipped"
            )
            continue
        result[key] = values
    return result


def _adversarial_loop(
    name: str,
    generator: Generator,
    gen_net: DenseNet,
    real_std: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> list[EpochRecord]:
    """生成器と識別器 (1 -> 64 -> 64 -> 1) を交互に更新する

    識別器は実サンプル=1, 生成サンプル=0 のBCEで、生成器は -E[log D(生成)] で学習する。
    勾配はバルク網の出力を通る分だけが生成器に流れる。
    """
    disc = DenseNet.build([1, cfg.hidden, cfg.hidden, 1], "leaky_relu", rng=rng)
    d_state = AdamState.for_params(disc.parameters(), cfg.learning_rate, cfg.betas)
    g_state = AdamState.for_params(gen_net.parameters(), cfg.learning_rate, cfg.betas)

    history: list[EpochRecord] = []
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        losses_d, losses_g = [], []
        order = rng.permutation(len(real_std))
        for start in range(0, len(order), cfg.batch_size):
            real = real_std[order[start : start + cfg.batch_size]]
            n = len(real)

            fake = generator._draw(n, rng).samples
            inputs = np.concatenate([real, fake])[:, None]
            labels = np.concatenate([np.ones(n), np.zeros(n)])
            logits, tape = disc.forward(inputs)
            loss_d, d_logits = bce_with_logits(logits[:, 0], labels)
            grads, _ = disc.backward(tape, d_logits[:, None])
            d_state, _ = apply_adam(disc, d_state, grads)
            losses_d.append(loss_d)

            draw = generator._draw(n, rng)
            logits, tape = disc.forward(draw.samples[:, None])
            loss_g, d_logits = bce_with_logits(logits[:, 0], np.ones(n))
            losses_g.append(loss_g)
            if len(draw.active) == 0:
                continue
            _, d_input = disc.backward(tape, d_logits[:, None])
            d_out = (d_input[draw.active, 0] * draw.chain)[:, None]
            grads, _ = gen_net.backward(draw.tape, d_out)
            g_state, _ = apply_adam(gen_net, g_state, grads)

        record = EpochRecord(
            stage=name,
            epoch=epoch,
            loss_d=float(np.mean(losses_d)),
            loss_g=float(np.mean(losses_g)),
            lr=cfg.learning_rate,
            elapsed_s=time.perf_counter() - started,
        )
        record.loss = record.loss_g
        if not (np.isfinite(record.loss_d) and np.isfinite(record.loss_g)):
            evtail_logger.error(f"{name} diverged at epoch {epoch}")
            raise NumericalException(f"Non-finite {name} loss at epoch {epoch}")
        history.append(record)
        evtail_logger.debug(
            f"{name} epoch {epoch}: L_D={record.loss_d:.4f} L_G={record.loss_g:.4f}"
        )
    if history:
        evtail_logger.info(
            f"{name} finished: L_D={history[-1].loss_d:.4f} L_G={history[-1].loss_g:.4f}"
        )
    return history


def _stage_name(kind: str, regime: int | None) -> str:
    return kind if regime is None else f"{kind}/regime-{regime}"


@log_elapsed("hybrid augmentor training")
def train_augmentor(
    real: SampleSeries,
    regime_model: RegimeModel | None,
    cfg: AugmentConfig,
    seed: int = 0,
) -> tuple[dict[int | None, HybridGenerator], list[EpochRecord]]:
    """レジームごとにハイブリッド生成器を学習する

    テールは経験5%分位点を閾値として、閾値を下回る全サンプルの不足量へのMLEで固定し、p_u は閾値を下回る割合とする。
    生成したいのは周辺分布なので、デクラスタリング (クラスタの最深値だけを残す) は当てはめに使わない。
    バルク網はテール分岐を有効にしたまま実サンプル全体に対して敵対的に学習する。

    Raises
    ------
    InsufficientDataException
        学習できるレジームが1つもない場合
    """
    generators: dict[int | None, HybridGenerator] = {}
    history: list[EpochRecord] = []
    for regime, values in _regime_values(real, cfg, regime_model).items():
        rng = np.random.default_rng([seed, 0 if regime is None else regime + 1])
        u = float(np.quantile(values, cfg.tail_quantile))
        exceedances = extract_exceedances(values, u)
        try:
            fit = fit_gpd_mle(exceedances)
        except FitException as e:
            evtail_logger.warning(f"Regime {regime}: tail fit failed ({e}); skipped")
            continue
        center, scale = _robust_scale(values)
        gen = HybridGenerator(
            bulk_net=DenseNet.build(
                [cfg.latent_dim, cfg.hidden, cfg.hidden, 1], "relu", rng=rng
            ),
            threshold=u,
            params=fit.params,
            tail_probability=float(np.mean(values < u)),
            center=center,
            scale=scale,
            regime=regime,
        )
        evtail_logger.info(
            f"Regime {regime}: u={u:.3f} xi={fit.params.shape:.3f} beta={fit.params.scale:.3f} "
            f"p_u={gen.tail_probability:.4f} ({len(exceedances)} exceedances, "
            f"extremal index {extremal_index(exceedances):.2f})"
        )
        real_std = (values - center) / scale
        history.extend(
            _adversarial_loop(_stage_name("hybrid", regime), gen, gen.bulk_net, real_std, cfg, rng)
        )
        generators[regime] = gen
    if not generators:
        raise InsufficientDataException("No regime has enough data for augmentation", len(real))
    return generators, history


@log_elapsed("vanilla GAN training")
def train_vanilla_gan(
    real: SampleSeries,
    cfg: AugmentConfig,
    seed: int = 0,
    regime_model: RegimeModel | None = None,
) -> tuple[dict[int | None, VanillaGenerator], list[EpochRecord]]:
    """同じ構造・同じ手順でテール分岐なしのGANを学習する (テール被覆の比較用)"""
    generators: dict[int | None, VanillaGenerator] = {}
    history: list[EpochRecord] = []
    for regime, values in _regime_values(real, cfg, regime_model).items():
        rng = np.random.default_rng([seed, 0 if regime is None else regime + 1])
        center, scale = _robust_scale(values)
        gen = VanillaGenerator(
            net=DenseNet.build([cfg.latent_dim, cfg.hidden, cfg.hidden, 1], "relu", rng=rng),
            center=center,
            scale=scale,
            regime=regime,
        )
        real_std = (values - center) / scale
        history.extend(
            _adversarial_loop(_stage_name("vanilla", regime), gen, gen.net, real_std, cfg, rng)
        )
        generators[regime] = gen
    if not generators:
        raise InsufficientDataException("No regime has enough data for augmentation", len(real))
    return generators, history


# ---
# 拡張データセット
# ---


def _allocate(total: int, weights: np.ndarray) -> np.ndarray:
    """最大剰余法で total を重みに比例して割り振る"""
    if total == 0 or weights.sum() == 0:
        return np.zeros(len(weights), dtype=int)
    exact = total * weights / weights.sum()
    counts = np.floor(exact).astype(int)
    remainder = total - counts.sum()
    counts[np.argsort(-(exact - counts), kind="stable")[:remainder]] += 1
    return counts


def build_augmented_dataset(
    real: SampleSeries,
    generators: dict[int | None, Generator],
    ratio: float = 1.0,
    rng: np.random.Generator | int | None = None,
) -> SampleSeries:
    """実サンプルの後ろに ceil(ratio * |real|) 個の合成サンプルを連結する

    合成サンプル数は実データのレジーム比に応じて生成器に割り振る。
    全サンプルに由来タグを付け、実データと全生成器がレジームを持つ場合はレジーム番号も保持する。
    """
    if ratio < 0:
        raise ConfigException(f"ratio must be non-negative: {ratio}")
    if not generators:
        raise ConfigException("At least one generator is required")
    rng = np.random.default_rng(rng)
    total = math.ceil(ratio * len(real))
    keys = list(generators)
    if real.regimes is not None and all(k is not None for k in keys):
        weights = np.array([np.sum(real.regimes == k) for k in keys], dtype=float)
        if weights.sum() == 0:
            weights = np.ones(len(keys))
    else:
        weights = np.ones(len(keys))
    counts = _allocate(total, weights)

    values = [real.values]
    origins = [np.full(len(real), ORIGIN_REAL, dtype=object)]
    keep_regimes = real.regimes is not None and all(k is not None for k in keys)
    regimes = [real.regimes] if keep_regimes else []
    for key, count in zip(keys, counts):
        values.append(generators[key].generate(int(count), rng))
        origins.append(np.full(count, ORIGIN_SYNTHETIC, dtype=object))
        if keep_regimes:
            regimes.append(np.full(count, key, dtype=int))
    evtail_logger.info(f"Augmented {len(real)} real samples with {total} synthetic samples")
    return SampleSeries(
        values=np.concatenate(values),
        sample_period=real.sample_period,
        label=real.label,
        origins=np.concatenate(origins),
        regimes=np.concatenate(regimes) if keep_regimes else None,
    )


def fit_generated_tail(
    generator: Generator,
    threshold: float,
    n: int,
    rng: np.random.Generator | int | None = None,
    regime: int | None = None,
) -> TailModel:
    """生成サンプルのうち閾値を下回る部分にMLEでGPDを当てはめる

    Raises
    ------
    FitException
        生成サンプルがテールをほとんど覆っていない場合
    """
    values = generator.generate(n, rng)
    fit = fit_gpd_mle(extract_exceedances(values, threshold))
    return TailModel(
        threshold=threshold,
        params=fit.params,
        window_stats=WindowStats(n=n, n_u=fit.sample_count),
        regime=regime,
    )
