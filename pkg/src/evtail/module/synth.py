"""真のテールが既知の合成受信電力系列と、学習・評価用のバッチ分割"""

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import signal, stats

from ..common import evtail_logger
from ..common.exceptions import ConfigException, InsufficientDataException
from .gpd import GpdParams, gpd_quantile
from .series import SampleSeries


@dataclass
class RegimeSpec:
    """合成レジームの真のパラメータ

    Attributes
    ----------
    bulk_mean: float
        バルクのガウス分布の平均 mu (dB)
    bulk_std: float
        バルクのガウス分布の標準偏差 sigma (dB)
    tail_threshold: float
        真の閾値 u* (dB)
    shape: float
        真の形状 xi*
    scale: float
        真の尺度 beta*
    tail_mass: float
        u*を下回る確率 p*
    """

    bulk_mean: float = -60.0
    bulk_std: float = 3.0
    tail_threshold: float = -64.0
    shape: float = 0.2
    scale: float = 1.0
    tail_mass: float = 0.05

    def __post_init__(self):
        if not self.tail_threshold < self.bulk_mean:
            raise ConfigException(
                f"Tail threshold {self.tail_threshold} must lie below bulk mean {self.bulk_mean}"
            )
        if not 0 < self.tail_mass <= 0.2:
            raise ConfigException(f"Tail mass must lie in (0, 0.2]: {self.tail_mass}")
        if not self.bulk_std > 0:
            raise ConfigException(f"Bulk std must be positive: {self.bulk_std}")
        if not self.scale > 0:
            raise ConfigException(f"Tail scale must be positive: {self.scale}")

    @property
    def tail_params(self) -> GpdParams:
        return GpdParams(self.shape, self.scale)


def _default_regimes() -> list[RegimeSpec]:
    return [RegimeSpec()]


@dataclass
class SynthConfig:
    """合成系列の設定

    Attributes
    ----------
    regimes: list[RegimeSpec]
        レジームの一覧
    segment_lengths: list[int]
        各セグメントの長さ (セグメントiはレジーム i mod len(regimes) を使う)
    rho: float
        一様駆動系列のAR(1)係数 (0 <= rho < 1)
    seed: int
        乱数シード
    sample_period: float
        サンプリング周期 (秒)
    """

    regimes: list[RegimeSpec] = field(default_factory=_default_regimes)
    segment_lengths: list[int] = field(default_factory=lambda: [100_000])
    rho: float = 0.0
    seed: int = 0
    sample_period: float = 2e-3

    def __post_init__(self):
        self.regimes = [
            r if isinstance(r, RegimeSpec) else RegimeSpec(**r) for r in self.regimes
        ]
        if not self.regimes:
            raise ConfigException("At least one regime is required")
        if not 0 <= self.rho < 1:
            raise ConfigException(f"AR(1) coefficient must satisfy 0 <= rho < 1: {self.rho}")
        if any(int(n) < 0 for n in self.segment_lengths):
            raise ConfigException("Segment lengths must be non-negative")
        self.segment_lengths = [int(n) for n in self.segment_lengths]
        if not self.sample_period > 0:
            raise ConfigException("Sample period must be positive")

    @property
    def total_samples(self) -> int:
        return sum(self.segment_lengths)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigException(f"Unknown synth config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigException(f"Invalid synth config: {e}") from e


@dataclass(frozen=True)
class SegmentTruth:
    """セグメントごとの真値"""

    start: int
    stop: int
    regime: int
    tail_threshold: float
    shape: float
    scale: float
    tail_mass: float


@dataclass(frozen=True)
class GroundTruth:
    """合成系列の真値注釈"""

    segments: tuple[SegmentTruth, ...]

    def regime_of(self, index: int) -> SegmentTruth:
        for segment in self.segments:
            if segment.start <= index < segment.stop:
                return segment
        raise IndexError(index)

    def to_dict(self) -> dict:
        return {"segments": [asdict(s) for s in self.segments]}


def _uniform_driver(n: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """(0,1)上の一様駆動系列 (rho>0 ならガウスコピュラ型のAR(1)依存を持つ)"""
    if rho == 0:
        u = rng.random(n)
    else:
        noise = rng.standard_normal(n)
        if n > 0:
            # 定常分布N(0,1)から始める
            tail = signal.lfilter(
                [np.sqrt(1.0 - rho**2)], [1.0, -rho], noise[1:], zi=[rho * noise[0]]
            )[0]
            latent = np.concatenate([noise[:1], tail])
        else:
            latent = noise
        u = stats.norm.cdf(latent)
    tiny = np.finfo(float).tiny
    return np.clip(u, tiny, 1.0 - np.finfo(float).eps)


def _segment_values(spec: RegimeSpec, u: np.ndarray) -> np.ndarray:
    """一様駆動系列をレジームの周辺分布に単調変換する"""
    values = np.empty(len(u))
    tail = u < spec.tail_mass
    # 小さいUほど深いテールになるよう単調に対応させる
    conditional = 1.0 - u[tail] / spec.tail_mass
    conditional = np.clip(conditional, 0.0, 1.0 - np.finfo(float).eps)
    values[tail] = spec.tail_threshold - gpd_quantile(conditional, spec.tail_params)

    bulk_u = (u[~tail] - spec.tail_mass) / (1.0 - spec.tail_mass)
    a = (spec.tail_threshold - spec.bulk_mean) / spec.bulk_std
    values[~tail] = stats.truncnorm.ppf(
        bulk_u, a, np.inf, loc=spec.bulk_mean, scale=spec.bulk_std
    )
    return values


def generate_synthetic(cfg: SynthConfig) -> tuple[SampleSeries, GroundTruth]:
    """真値が既知の合成系列を生成する

    各セグメントでは確率p*で y = u* - z (z ~ GPD(xi*, beta*))、それ以外は [u*, inf) に
    切断したガウス分布から生成する。rho>0 の場合は一様駆動系列にAR(1)依存を入れ、
    周辺分布を保ったまま超過のクラスタを作る。

    Returns
    -------
    tuple[SampleSeries, GroundTruth]
        レジーム番号つきの系列と真値注釈
    """
    rng = np.random.default_rng(cfg.seed)
    chunks, labels, segments = [], [], []
    start = 0
    for i, length in enumerate(cfg.segment_lengths):
        regime = i % len(cfg.regimes)
        spec = cfg.regimes[regime]
        u = _uniform_driver(length, cfg.rho, rng)
        chunks.append(_segment_values(spec, u))
        labels.append(np.full(length, regime, dtype=int))
        segments.append(
            SegmentTruth(
                start=start,
                stop=start + length,
                regime=regime,
                tail_threshold=spec.tail_threshold,
                shape=spec.shape,
                scale=spec.scale,
                tail_mass=spec.tail_mass,
            )
        )
        start += length
    evtail_logger.debug(f"Generated {start} synthetic samples in {len(segments)} segments")
    series = SampleSeries(
        values=np.concatenate(chunks) if chunks else np.empty(0),
        sample_period=cfg.sample_period,
        label="synthetic",
        regimes=np.concatenate(labels) if labels else np.empty(0, dtype=int),
    )
    return series, GroundTruth(tuple(segments))


@dataclass(frozen=True)
class BatchPartition:
    """定常バッチとサブバッチへの分割

    Attributes
    ----------
    batches: tuple[tuple[tuple[int, int], ...], ...]
        バッチごとのサブバッチ区間 [start, stop)
    """

    batches: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [cell for batch in self.batches for cell in batch]

    def train_cells(self) -> list[tuple[int, int]]:
        """各バッチの偶数番目のサブバッチ (サブバッチが1つなら全て)"""
        result = []
        for batch in self.batches:
            if len(batch) == 1:
                result.extend(batch)
            else:
                result.extend(batch[0::2])
        return result

    def eval_cells(self) -> list[tuple[int, int]]:
        """各バッチの奇数番目のサブバッチ"""
        return [cell for batch in self.batches if len(batch) > 1 for cell in batch[1::2]]


def _split_range(start: int, stop: int, parts: int) -> list[tuple[int, int]]:
    size = (stop - start) // parts
    bounds = [(start + i * size, start + (i + 1) * size) for i in range(parts)]
    # 端数は最後に寄せる
    bounds[-1] = (bounds[-1][0], stop)
    return bounds


def split_batches(
    series: SampleSeries, n_batches: int, n_sub: int, window: int
) -> BatchPartition:
    """系列を連続した等長のバッチとサブバッチに分割する

    学習用と評価用はサブバッチ単位で交互に割り当てるため、両方に全てのレジームが含まれる

    Parameters
    ----------
    series: SampleSeries
        分割する系列
    n_batches: int
        定常バッチの数
    n_sub: int
        バッチあたりのサブバッチ数
    window: int
        ウィンドウ長 N_w (どのサブバッチも少なくとも1ウィンドウ分の長さを持つ)

    Raises
    ------
    ConfigException
        個数やウィンドウ長が正でない場合
    InsufficientDataException
        系列長が n_batches * n_sub * window 未満の場合
    """
    if n_batches < 1 or n_sub < 1:
        raise ConfigException("Batch counts must be positive")
    if window < 1:
        raise ConfigException(f"Window length must be positive: {window}")
    needed = n_batches * n_sub * window
    if len(series) < needed:
        raise InsufficientDataException(
            f"Series of length {len(series)} is shorter than {needed}", len(series)
        )
    batches = tuple(
        tuple(_split_range(b_start, b_stop, n_sub))
        for b_start, b_stop in _split_range(0, len(series), n_batches)
    )
    return BatchPartition(batches)


def concat_cells(series: SampleSeries, cells: list[tuple[int, int]]) -> SampleSeries:
    """区間の集合を連結した部分系列"""
    mask = np.zeros(len(series), dtype=bool)
    for start, stop in cells:
        mask[start:stop] = True
    return series.select(mask)


def windows_from_cells(
    series: SampleSeries, cells: list[tuple[int, int]], window: int, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """区間をまたがないスライディングウィンドウと、その末尾サンプルのレジーム番号"""
    blocks, labels = [], []
    for start, stop in cells:
        if stop - start < window:
            continue
        ends = np.arange(start + window, stop + 1, stride)
        blocks.append(np.stack([series.values[e - window : e] for e in ends]))
        if series.regimes is not None:
            labels.append(series.regimes[ends - 1])
        else:
            labels.append(np.zeros(len(ends), dtype=int))
    if not blocks:
        return np.empty((0, window)), np.empty(0, dtype=int)
    return np.concatenate(blocks), np.concatenate(labels).astype(int)
