from dataclasses import dataclass

import numpy as np

from ..common.exceptions import DataFormatException, DimensionMismatchException

ORIGIN_REAL = "real"
ORIGIN_SYNTHETIC = "synthetic"


@dataclass(frozen=True, eq=False)
class SampleSeries:
    """受信電力 (dB) の時系列

    Attributes
    ----------
    values: np.ndarray
        受信電力の系列 (dB)
    sample_period: float
        サンプリング周期 Ts (秒)
    label: str | None
        レジームやバッチを示すタグ
    origins: np.ndarray | None
        各サンプルの由来 ("real" / "synthetic")
    regimes: np.ndarray | None
        各サンプルのレジーム番号
    """

    values: np.ndarray
    sample_period: float = 2e-3
    label: str | None = None
    origins: np.ndarray | None = None
    regimes: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise DataFormatException(f"Non-finite sample at index {bad}")
        if not (np.isfinite(self.sample_period) and self.sample_period > 0):
            raise DataFormatException(
                f"Sample period must be positive: {self.sample_period}"
            )
        object.__setattr__(self, "values", values)

        if self.origins is not None:
            origins = np.asarray(self.origins, dtype=object).reshape(-1)
            if len(origins) != len(values):
                raise DimensionMismatchException("origins length != values length")
            object.__setattr__(self, "origins", origins)
        if self.regimes is not None:
            regimes = np.asarray(self.regimes, dtype=int).reshape(-1)
            if len(regimes) != len(values):
                raise DimensionMismatchException("regimes length != values length")
            object.__setattr__(self, "regimes", regimes)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.sample_period

    def slice(self, start: int, stop: int) -> "SampleSeries":
        """部分系列を取り出す"""
        return SampleSeries(
            values=self.values[start:stop],
            sample_period=self.sample_period,
            label=self.label,
            origins=None if self.origins is None else self.origins[start:stop],
            regimes=None if self.regimes is None else self.regimes[start:stop],
        )

    def select(self, mask: np.ndarray) -> "SampleSeries":
        """真偽マスクでサンプルを抽出する (順序は保持)"""
        mask = np.asarray(mask, dtype=bool)
        return SampleSeries(
            values=self.values[mask],
            sample_period=self.sample_period,
            label=self.label,
            origins=None if self.origins is None else self.origins[mask],
            regimes=None if self.regimes is None else self.regimes[mask],
        )

    def real_only(self) -> "SampleSeries":
        """合成サンプルを除いた実測系列を返す"""
        if self.origins is None:
            return self
        return self.select(self.origins == ORIGIN_REAL)


@dataclass(frozen=True, eq=False)
class ExceedanceSet:
    """下側テールの不足量 (deficit) z = u - y の集合

    Attributes
    ----------
    deficits: np.ndarray
        不足量 (dB, 非負)
    source_indices: np.ndarray
        元系列での時刻インデックス (狭義単調増加)
    threshold: float
        閾値 u (dB)
    """

    deficits: np.ndarray
    source_indices: np.ndarray
    threshold: float

    def __post_init__(self):
        deficits = np.asarray(self.deficits, dtype=float).reshape(-1)
        indices = np.asarray(self.source_indices, dtype=np.int64).reshape(-1)
        if len(deficits) != len(indices):
            raise DimensionMismatchException(
                f"deficits ({len(deficits)}) and indices ({len(indices)}) differ in length"
            )
        if np.any(deficits < 0) or not np.all(np.isfinite(deficits)):
            raise DataFormatException("Deficits must be finite and non-negative")
        if len(indices) > 1 and np.any(np.diff(indices) <= 0):
            raise DataFormatException("Source indices must be strictly increasing")
        object.__setattr__(self, "deficits", deficits)
        object.__setattr__(self, "source_indices", indices)
        object.__setattr__(self, "threshold", float(self.threshold))

    def __len__(self) -> int:
        return len(self.deficits)

    @property
    def values(self) -> np.ndarray:
        """不足量から元の電力値 y = u - z を復元する"""
        return self.threshold - self.deficits


def sliding_windows(values: np.ndarray, window: int, stride: int = 1) -> np.ndarray:
    """スライディングウィンドウの2次元ビューを返す

    Parameters
    ----------
    values: np.ndarray
        1次元の系列
    window: int
        ウィンドウ長 N_w
    stride: int
        スライド幅

    Returns
    -------
    np.ndarray
        (ウィンドウ数, N_w) の配列 (系列が短い場合は0行)
    """
    values = np.asarray(values, dtype=float)
    if window < 1 or stride < 1:
        raise DimensionMismatchException("window and stride must be positive")
    if len(values) < window:
        return np.empty((0, window))
    return np.lib.stride_tricks.sliding_window_view(values, window)[::stride]
