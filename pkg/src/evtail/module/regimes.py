"""ウィンドウ特徴量のGMMクラスタリングによるレジーム分割

特徴量は標準化してから対角共分散のGMMをEMで推定し、成分数はBICで選ぶ。
"""

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import logsumexp

from ..common import evtail_logger
from ..common.exceptions import (
    ConfigException,
    DimensionMismatchException,
    FitException,
    InsufficientDataException,
    NumericalException,
    ParameterDomainException,
)
from .series import SampleSeries, sliding_windows

MIN_FEATURE_WINDOW = 20

VARIANCE_FLOOR = 1e-6

# 実効サンプル数がこれ未満の成分は1点に潰れたとみなす
MIN_COMPONENT_SAMPLES = 2.0

FEATURE_NAMES = ("mean", "std", "q05", "q01", "min")


@dataclass
class RegimeConfig:
    """レジーム分割の設定

    Attributes
    ----------
    window: int
        特徴量を計算するウィンドウ長
    k_min, k_max: int
        BICで比較する成分数の範囲
    """

    window: int = 100
    k_min: int = 1
    k_max: int = 8

    def __post_init__(self):
        if self.window < MIN_FEATURE_WINDOW:
            raise ConfigException(f"Regime window must be at least {MIN_FEATURE_WINDOW}")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigException(f"Invalid K range [{self.k_min}, {self.k_max}]")

    @property
    def k_range(self) -> range:
        return range(self.k_min, self.k_max + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RegimeConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigException(f"Unknown regime config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True, eq=False)
class WindowFeatures:
    """ウィンドウの特徴ベクトル [平均, 標準偏差, 5%分位点, 1%分位点, 最小値]"""

    vector: np.ndarray

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=float).reshape(-1)
        if not np.all(np.isfinite(vector)):
            raise ParameterDomainException("Window features must be finite")
        object.__setattr__(self, "vector", vector)


def featurize(window: np.ndarray) -> WindowFeatures:
    """ウィンドウから特徴ベクトルを計算する

    分位点は順序統計量の線形補間で求める

    Raises
    ------
    InsufficientDataException
        ウィンドウ長が20未満の場合
    """
    window = np.asarray(window, dtype=float).reshape(-1)
    if len(window) < MIN_FEATURE_WINDOW:
        raise InsufficientDataException(
            f"Feature window needs at least {MIN_FEATURE_WINDOW} samples, got {len(window)}",
            len(window),
        )
    q01, q05 = np.quantile(window, [0.01, 0.05], method="linear")
    return WindowFeatures(
        np.array([window.mean(), window.std(), q05, q01, window.min()])
    )


def _feature_matrix(features: list[WindowFeatures] | np.ndarray) -> np.ndarray:
    if isinstance(features, np.ndarray):
        matrix = np.atleast_2d(np.asarray(features, dtype=float))
    else:
        matrix = np.array([f.vector for f in features], dtype=float)
    if matrix.ndim != 2:
        raise DimensionMismatchException("Features must form a 2-D matrix")
    return matrix


@dataclass(eq=False)
class GmmModel:
    """対角共分散GMM

    平均・分散は標準化後の特徴空間での値を保持する

    Attributes
    ----------
    weights: np.ndarray
        混合比 (K,)
    means: np.ndarray
        平均 (K, d)
    variances: np.ndarray
        対角分散 (K, d)
    center: np.ndarray
        標準化の中心 (d,)
    scale: np.ndarray
        標準化の尺度 (d,)
    log_likelihood: float
        収束時の対数尤度
    bic: float
        BIC値
    log_likelihood_trace: list[float]
        採用した初期化でのEM各反復の対数尤度
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    log_likelihood: float
    bic: float
    log_likelihood_trace: list[float] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def standardize(self, matrix: np.ndarray) -> np.ndarray:
        return (matrix - self.center) / self.scale

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "log_likelihood": self.log_likelihood,
            "bic": self.bic,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GmmModel":
        return cls(
            weights=np.array(data["weights"], dtype=float),
            means=np.array(data["means"], dtype=float),
            variances=np.array(data["variances"], dtype=float),
            center=np.array(data["center"], dtype=float),
            scale=np.array(data["scale"], dtype=float),
            log_likelihood=float(data["log_likelihood"]),
            bic=float(data["bic"]),
        )


def _component_log_densities(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """(n, K) の各成分の対数密度"""
    diff = x[:, None, :] - means[None, :, :]
    return -0.5 * (
        np.sum(np.log(2.0 * np.pi * variances), axis=1)[None, :]
        + np.sum(diff**2 / variances[None, :, :], axis=2)
    )


def _weighted_log_densities(x, weights, means, variances) -> np.ndarray:
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return _component_log_densities(x, means, variances) + log_w[None, :]


def _bic(log_likelihood: float, k: int, d: int, n: int) -> float:
    n_params = (k - 1) + 2 * k * d
    return -2.0 * log_likelihood + n_params * np.log(n)


def _run_em(
    x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[float]]:
    n, d = x.shape
    means = x[rng.choice(n, size=k, replace=False)].copy()
    variances = np.tile(np.maximum(x.var(axis=0), VARIANCE_FLOOR), (k, 1))
    weights = np.full(k, 1.0 / k)

    trace: list[float] = []
    for iteration in range(max_iter):
        # E-step
        log_joint = _weighted_log_densities(x, weights, means, variances)
        log_norm = logsumexp(log_joint, axis=1)
        ll = float(np.sum(log_norm))
        if trace and ll < trace[-1] - 1e-9 * max(1.0, abs(trace[-1])):
            raise NumericalException(
                f"EM log-likelihood decreased at iteration {iteration}: {trace[-1]} -> {ll}"
            )
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        resp = np.exp(log_joint - log_norm[:, None])

        # M-step
        nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        second = (resp.T @ (x**2)) / nk[:, None]
        variances = np.maximum(second - means**2, VARIANCE_FLOOR)
    return weights, means, variances, trace


def fit_gmm_em(
    features: list[WindowFeatures] | np.ndarray,
    k: int,
    seed: int | None = 0,
    n_restarts: int = 5,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> GmmModel:
    """EMアルゴリズムで対角共分散GMMを推定する

    特徴量は次元ごとにzスコア標準化してから当てはめ、5回の初期化のうち対数尤度が最大のものを採用する。
    ただし実効サンプル数が2未満の成分を持つ初期化 (分散の下限まで潰れた解) は、潰れていない初期化があればそちらを優先する。

    Parameters
    ----------
    features: list[WindowFeatures] | np.ndarray
        特徴ベクトル
    k: int
        成分数
    seed: int | None
        初期化の乱数シード
    n_restarts: int
        初期化の回数

    Returns
    -------
    GmmModel
        推定されたモデル

    Raises
    ------
    ParameterDomainException
        k < 1 の場合
    InsufficientDataException
        特徴量の数が 5k 未満の場合
    FitException
        全次元で分散が0の場合
    """
    if k < 1:
        raise ParameterDomainException(f"Component count must be >= 1: {k}")
    matrix = _feature_matrix(features)
    n, d = matrix.shape
    if n < 5 * k:
        raise InsufficientDataException(
            f"GMM with K={k} needs at least {5 * k} feature vectors, got {n}", n
        )
    center = matrix.mean(axis=0)
    scale = matrix.std(axis=0)
    if not np.any(scale > 0):
        raise FitException("All window features are identical", n)
    scale = np.where(scale > 0, scale, 1.0)
    x = (matrix - center) / scale

    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_restarts)]
    best, best_key = None, None
    for restart, rng in enumerate(rngs):
        weights, means, variances, trace = _run_em(x, k, rng, max_iter, tol)
        collapsed = bool(np.min(weights) * n < MIN_COMPONENT_SAMPLES)
        evtail_logger.debug(
            f"GMM K={k} restart {restart}: ll={trace[-1]:.6f} after {len(trace)} iterations"
            + (" (collapsed component)" if collapsed else "")
        )
        key = (not collapsed, trace[-1])
        if best is None or key > best_key:
            best, best_key = (weights, means, variances, trace), key

    weights, means, variances, trace = best
    return GmmModel(
        weights=weights,
        means=means,
        variances=variances,
        center=center,
        scale=scale,
        log_likelihood=trace[-1],
        bic=_bic(trace[-1], k, d, n),
        log_likelihood_trace=trace,
    )


def select_k_bic(
    features: list[WindowFeatures] | np.ndarray,
    k_range=range(1, 9),
    seed: int | None = 0,
) -> tuple[int, GmmModel]:
    """BIC最小の成分数を選ぶ (同値なら小さいK)

    BIC = -2 ll + p ln(n), p = K-1 + 2Kd
    """
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ParameterDomainException("K range must not be empty")
    best_k, best_model = None, None
    for k in ks:
        model = fit_gmm_em(features, k, seed=seed)
        evtail_logger.debug(f"GMM K={k}: BIC={model.bic:.3f}")
        if best_model is None or model.bic < best_model.bic:
            best_k, best_model = k, model
    evtail_logger.info(f"Selected K={best_k} regimes by BIC ({best_model.bic:.3f})")
    return best_k, best_model


def posterior(model: GmmModel, features: list[WindowFeatures] | np.ndarray) -> np.ndarray:
    """(n, K) の事後責任度"""
    matrix = _feature_matrix(features)
    if matrix.shape[1] != model.dim:
        raise DimensionMismatchException(
            f"Feature dimension {matrix.shape[1]} does not match model dimension {model.dim}"
        )
    log_joint = _weighted_log_densities(
        model.standardize(matrix), model.weights, model.means, model.variances
    )
    return np.exp(log_joint - logsumexp(log_joint, axis=1)[:, None])


def assign_regime(model: GmmModel, features: WindowFeatures) -> tuple[int, np.ndarray]:
    """特徴ベクトルのレジームを事後確率最大の成分として割り当てる

    Returns
    -------
    tuple[int, np.ndarray]
        レジーム番号 (同値なら小さい番号) と責任度
    """
    resp = posterior(model, features.vector[None, :])[0]
    return int(np.argmax(resp)), resp


@dataclass(eq=False)
class RegimeModel:
    """ウィンドウ単位のレジーム分割結果

    Attributes
    ----------
    gmm: GmmModel
        選択されたGMM
    window: int
        特徴量を計算したウィンドウ長
    window_labels: np.ndarray
        学習に使ったウィンドウのラベル
    """

    gmm: GmmModel
    window: int
    window_labels: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def n_regimes(self) -> int:
        return self.gmm.n_components

    def label_windows(self, windows: np.ndarray) -> np.ndarray:
        """ウィンドウの集合にラベルを付ける (ウィンドウの順序には依存しない)"""
        if len(windows) == 0:
            return np.empty(0, dtype=int)
        matrix = np.array([featurize(w).vector for w in windows])
        return np.argmax(posterior(self.gmm, matrix), axis=1).astype(int)

    def to_dict(self) -> dict:
        return {"gmm": self.gmm.to_dict(), "window": self.window}

    @classmethod
    def from_dict(cls, data: dict) -> "RegimeModel":
        return cls(gmm=GmmModel.from_dict(data["gmm"]), window=int(data["window"]))


def fit_regimes(
    series: SampleSeries,
    window: int = 100,
    stride: int | None = None,
    k_range=range(1, 9),
    seed: int | None = 0,
) -> RegimeModel:
    """系列をウィンドウに分けて特徴量を計算し、BICでGMMを選ぶ"""
    stride = window if stride is None else stride
    windows = sliding_windows(series.values, window, stride)
    if len(windows) == 0:
        raise InsufficientDataException(
            f"Series of length {len(series)} is shorter than window {window}", len(series)
        )
    matrix = np.array([featurize(w).vector for w in windows])
    # 特徴量の数に収まるKだけを候補とする
    usable = [k for k in k_range if 5 * k <= len(matrix)]
    if not usable:
        raise InsufficientDataException(
            f"{len(matrix)} windows are too few for any K in {list(k_range)}", len(matrix)
        )
    _, gmm = select_k_bic(matrix, usable, seed=seed)
    labels = np.argmax(posterior(gmm, matrix), axis=1).astype(int)
    return RegimeModel(gmm=gmm, window=window, window_labels=labels)


def label_samples(model: RegimeModel, series: SampleSeries) -> np.ndarray:
    """非重複ウィンドウのラベルをサンプルに展開する

    端数のサンプルは最後のウィンドウのラベルを引き継ぐ
    """
    n = len(series)
    windows = sliding_windows(series.values, model.window, model.window)
    if len(windows) == 0:
        raise InsufficientDataException(
            f"Series of length {n} is shorter than window {model.window}", n
        )
    window_labels = model.label_windows(windows)
    labels = np.repeat(window_labels, model.window)
    if len(labels) < n:
        labels = np.concatenate([labels, np.full(n - len(labels), window_labels[-1])])
    return labels
