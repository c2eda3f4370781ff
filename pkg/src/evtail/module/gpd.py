"""一般化パレート分布 (GPD) による下側テールの解析的な道具立て

不足量 z = u - y (y < u) に対する GPD の分布関数・密度・分位点・サンプリング、
最尤推定とモーメント法によるフィッティング、超過量の抽出とラン法によるデクラスタリング (極値指数)、
およびテール確率の計算を提供する。
"""

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from ..common import evtail_logger
from ..common.exceptions import (
    FitException,
    InsufficientDataException,
    ParameterDomainException,
    SupportException,
)
from .series import ExceedanceSet, SampleSeries

# この値より|xi|が小さければ指数分布の極限式に切り替える
XI_EPSILON = 1e-6

# 最尤推定でのxiの探索範囲 (開区間)
MLE_XI_BOUND = 1.0

# ラン法デクラスタリングの既定ギャップ (サンプル数)
DEFAULT_RUN_GAP = 10

MIN_FIT_SAMPLES = 5


@dataclass(frozen=True)
class GpdParams:
    """GPDの形状・尺度パラメータ

    Attributes
    ----------
    shape: float
        形状パラメータ xi
    scale: float
        尺度パラメータ beta (>0, 不足量と同じ単位 dB)
    """

    shape: float
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.shape) and np.isfinite(self.scale)):
            raise ParameterDomainException(
                f"GPD parameters must be finite: xi={self.shape}, beta={self.scale}"
            )
        if self.scale <= 0:
            raise ParameterDomainException(f"GPD scale must be positive: {self.scale}")
        object.__setattr__(self, "shape", float(self.shape))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def upper_endpoint(self) -> float:
        """サポートの上端 (xi >= 0 なら無限大)"""
        if self.shape >= 0:
            return np.inf
        return -self.scale / self.shape

    def to_dict(self) -> dict:
        return {"shape": self.shape, "scale": self.scale}

    @classmethod
    def from_dict(cls, data: dict) -> "GpdParams":
        return cls(shape=data["shape"], scale=data["scale"])


@dataclass(frozen=True)
class WindowStats:
    """テール確率の合成に使うウィンドウ統計

    Attributes
    ----------
    n: int
        ウィンドウ内サンプル数 N
    n_u: int
        閾値を下回ったサンプル数 N_u
    """

    n: int
    n_u: int

    def __post_init__(self):
        if self.n <= 0 or self.n_u < 0 or self.n_u > self.n:
            raise ParameterDomainException(
                f"Invalid window stats: N={self.n}, N_u={self.n_u}"
            )

    @property
    def exceedance_rate(self) -> float:
        return self.n_u / self.n


@dataclass(frozen=True)
class TailModel:
    """推定されたテールモデル (u, xi, beta)

    Attributes
    ----------
    threshold: float
        下側テール閾値 u (dB)
    params: GpdParams
        GPDパラメータ
    window_stats: WindowStats
        推定に用いたウィンドウの統計
    regime: int | None
        所属レジーム
    """

    threshold: float
    params: GpdParams
    window_stats: WindowStats
    regime: int | None = None

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "shape": self.params.shape,
            "scale": self.params.scale,
            "n": self.window_stats.n,
            "n_u": self.window_stats.n_u,
            "regime": self.regime,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TailModel":
        return cls(
            threshold=float(data["threshold"]),
            params=GpdParams(data["shape"], data["scale"]),
            window_stats=WindowStats(int(data["n"]), int(data["n_u"])),
            regime=data.get("regime"),
        )


@dataclass(frozen=True)
class MleFit:
    """最尤推定の結果"""

    params: GpdParams
    nll: float
    sample_count: int


def _as_output(values: np.ndarray, scalar_input: bool):
    return float(values) if scalar_input else values


def gpd_cdf(z, params: GpdParams):
    """GPDの分布関数 G(z; xi, beta)

    Parameters
    ----------
    z: float | np.ndarray
        不足量 (>=0)
    params: GpdParams
        GPDパラメータ

    Returns
    -------
    float | np.ndarray
        確率 (サポート上端以上では厳密に1)
    """
    scalar_input = np.ndim(z) == 0
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ParameterDomainException("Deficit must be non-negative")
    xi, beta = params.shape, params.scale

    if abs(xi) < XI_EPSILON:
        result = -np.expm1(-z / beta)
    else:
        arg = xi * z / beta
        with np.errstate(divide="ignore", invalid="ignore"):
            inside = -np.expm1(-np.log1p(arg) / xi)
        # xi<0 の上端以上は1
        result = np.where(arg <= -1.0, 1.0, inside)
    return _as_output(np.clip(result, 0.0, 1.0), scalar_input)


def gpd_log_pdf(z, params: GpdParams, strict: bool = False):
    """GPDの対数密度

    サポート外の点では -inf を返す (strict=True なら SupportException)

    Parameters
    ----------
    z: float | np.ndarray
        不足量
    params: GpdParams
        GPDパラメータ
    strict: bool
        サポート外で例外を送出するかどうか

    Returns
    -------
    float | np.ndarray
        対数密度
    """
    scalar_input = np.ndim(z) == 0
    z = np.asarray(z, dtype=float)
    xi, beta = params.shape, params.scale

    if abs(xi) < XI_EPSILON:
        outside = z < 0
        with np.errstate(invalid="ignore"):
            result = -np.log(beta) - z / beta
    else:
        arg = xi * z / beta
        outside = (z < 0) | (arg <= -1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            result = -np.log(beta) - (1.0 / xi + 1.0) * np.log1p(arg)

    if np.any(outside):
        if strict:
            raise SupportException(
                f"Deficit outside GPD support [0, {params.upper_endpoint})"
            )
        result = np.where(outside, -np.inf, result)
    return _as_output(result, scalar_input)


def gpd_log_pdf_grad(z: np.ndarray, shape: float, scale: float, floor: float = 1e-12):
    """対数密度とそのパラメータ偏微分を計算する

    サポート外では 1 + xi*z/beta を floor で下から抑え、有限の値と勾配を返す
    (学習時の損失として使うための緩和版)

    Returns
    -------
    tuple[np.ndarray, np.ndarray, np.ndarray]
        (log p, d log p / d xi, d log p / d beta)
    """
    z = np.asarray(z, dtype=float)
    xi, beta = float(shape), float(scale)

    if abs(xi) < XI_EPSILON:
        log_p = -np.log(beta) - z / beta
        d_xi = z**2 / (2.0 * beta**2) - z / beta
        d_beta = -1.0 / beta + z / beta**2
        return log_p, d_xi, d_beta

    one_plus = np.maximum(1.0 + xi * z / beta, floor)
    log1p_arg = np.log(one_plus)
    log_p = -np.log(beta) - (1.0 / xi + 1.0) * log1p_arg
    denom = beta * one_plus
    d_xi = log1p_arg / xi**2 - (1.0 + xi) * z / (xi * denom)
    d_beta = -1.0 / beta + (1.0 + xi) * z / (beta * denom)
    return log_p, d_xi, d_beta


def gpd_nll(deficits, params: GpdParams) -> float:
    """負の対数尤度 (サポート外を含めば +inf)"""
    log_p = gpd_log_pdf(np.asarray(deficits, dtype=float), params)
    return float(-np.sum(log_p))


def gpd_quantile(p, params: GpdParams):
    """GPDの分位点関数 (分布関数の逆関数)

    Parameters
    ----------
    p: float | np.ndarray
        確率 0 <= p < 1
    params: GpdParams
        GPDパラメータ

    Returns
    -------
    float | np.ndarray
        不足量
    """
    scalar_input = np.ndim(p) == 0
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or np.any(p >= 1):
        raise ParameterDomainException("Probability must satisfy 0 <= p < 1")
    xi, beta = params.shape, params.scale

    log_tail = -np.log1p(-p)
    if abs(xi) < XI_EPSILON:
        result = beta * log_tail
    else:
        result = beta * np.expm1(xi * log_tail) / xi
    return _as_output(result, scalar_input)


def gpd_sample(n: int, params: GpdParams, rng: np.random.Generator | int | None = None):
    """逆関数法でGPDに従う乱数をn個生成する"""
    if n < 0:
        raise ParameterDomainException(f"Sample count must be non-negative: {n}")
    rng = np.random.default_rng(rng)
    uniforms = rng.random(n)
    return np.asarray(gpd_quantile(uniforms, params), dtype=float).reshape(-1)


def _deficits_of(deficits) -> np.ndarray:
    if isinstance(deficits, ExceedanceSet):
        return deficits.deficits
    return np.asarray(deficits, dtype=float).reshape(-1)


def _moment_estimates(z: np.ndarray) -> GpdParams:
    """標本平均・不偏分散からのモーメント推定 (クランプ込み)"""
    mean = float(np.mean(z))
    var = float(np.var(z, ddof=1))
    shape = 0.5 * (1.0 - mean**2 / var)
    shape = float(np.clip(shape, -0.49, 0.49))
    scale = max(mean * (1.0 - shape), 1e-6)
    return GpdParams(shape, scale)


def fit_gpd_moments(
    deficits: ExceedanceSet | np.ndarray, min_samples: int = MIN_FIT_SAMPLES
) -> GpdParams:
    """モーメント法による軽量なGPDフィット

    xi = (1 - m^2/s^2)/2, beta = m(1 - xi)
    xi は [-0.49, 0.49] にクランプし、beta は 1e-6 で下から抑える

    閾値ネットワークの損失では min_samples を下げて小さなウィンドウにも使う

    Raises
    ------
    FitException
        サンプル数がmin_samples未満、または分散が0の場合
    """
    z = _deficits_of(deficits)
    if len(z) < max(min_samples, 2):
        raise FitException(
            f"Moment fit needs at least {max(min_samples, 2)} deficits, got {len(z)}",
            len(z),
        )
    if np.any(z < 0):
        raise FitException("Deficits must be non-negative", len(z))
    if not np.var(z) > 0:
        raise FitException("Moment fit needs deficits with positive variance", len(z))
    return _moment_estimates(z)


def fit_gpd_mle(deficits: ExceedanceSet | np.ndarray) -> MleFit:
    """最尤推定によるGPDフィット

    モーメント法の初期値から、beta = exp(.) と再パラメータ化した2次元の負の対数尤度を
    L-BFGS-B で最小化する。最適化が失敗・悪化した場合は 200x200 のグリッド探索にフォールバックする。

    Parameters
    ----------
    deficits: ExceedanceSet | np.ndarray
        不足量 (5個以上, 非負, 全て同じ値ではない)

    Returns
    -------
    MleFit
        推定パラメータと達成した負の対数尤度

    Raises
    ------
    FitException
        サンプル数不足や退化したデータの場合
    """
    z = _deficits_of(deficits)
    n = len(z)
    if n < MIN_FIT_SAMPLES:
        raise FitException(f"MLE needs at least {MIN_FIT_SAMPLES} deficits, got {n}", n)
    if np.any(z < 0) or not np.all(np.isfinite(z)):
        raise FitException("Deficits must be finite and non-negative", n)
    if np.ptp(z) == 0:
        raise FitException("MLE needs deficits that are not all identical", n)

    start = _moment_estimates(z)
    z_max = float(np.max(z))
    if start.shape < 0 and start.upper_endpoint <= z_max:
        start = GpdParams(start.shape, -start.shape * z_max * 1.01)
    start_nll = gpd_nll(z, start)

    xi_lim = MLE_XI_BOUND - 1e-6
    penalty = 1e10 * (1.0 + abs(start_nll))

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        xi, beta = float(theta[0]), float(np.exp(theta[1]))
        value = gpd_nll(z, GpdParams(xi, beta))
        if not np.isfinite(value):
            return penalty, np.zeros(2)
        _, d_xi, d_beta = gpd_log_pdf_grad(z, xi, beta)
        return value, -np.array([np.sum(d_xi), np.sum(d_beta) * beta])

    best_params, best_nll = start, start_nll
    try:
        result = optimize.minimize(
            objective,
            x0=np.array([start.shape, np.log(start.scale)]),
            method="L-BFGS-B",
            jac=True,
            bounds=[(-xi_lim, xi_lim), (np.log(start.scale) - 20, np.log(start.scale) + 20)],
        )
        candidate = GpdParams(float(result.x[0]), float(np.exp(result.x[1])))
        candidate_nll = gpd_nll(z, candidate)
        if result.success and candidate_nll <= best_nll:
            best_params, best_nll = candidate, candidate_nll
        else:
            evtail_logger.debug(f"MLE line search did not converge: {result.message}")
            best_params, best_nll = _grid_search(z, best_params, best_nll, xi_lim)
    except (ValueError, FloatingPointError) as e:
        evtail_logger.debug(f"MLE optimizer failed ({e}), falling back to grid search")
        best_params, best_nll = _grid_search(z, best_params, best_nll, xi_lim)

    if not np.isfinite(best_nll):
        raise FitException("MLE could not find parameters covering the data", n)
    return MleFit(params=best_params, nll=best_nll, sample_count=n)


def _grid_search(
    z: np.ndarray, best_params: GpdParams, best_nll: float, xi_lim: float
) -> tuple[GpdParams, float]:
    """200x200 の対数間隔グリッドでの探索"""
    shapes = np.linspace(-xi_lim, xi_lim, 200)
    scales = np.logspace(-2, 2, 200) * best_params.scale
    z_col = z[:, None]
    for xi in shapes:
        # beta方向はベクトル化して1行ずつ評価する
        arg = xi * z_col / scales[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            if abs(xi) < XI_EPSILON:
                log_p = -np.log(scales)[None, :] - z_col / scales[None, :]
            else:
                log_p = -np.log(scales)[None, :] - (1.0 / xi + 1.0) * np.log1p(arg)
            log_p = np.where(arg <= -1.0, -np.inf, log_p)
        nll = -np.sum(log_p, axis=0)
        j = int(np.argmin(nll))
        if nll[j] < best_nll:
            best_params, best_nll = GpdParams(float(xi), float(scales[j])), float(nll[j])
    return best_params, best_nll


def extract_exceedances(series: SampleSeries | np.ndarray, u: float) -> ExceedanceSet:
    """閾値 u を下回るサンプルの不足量 z = u - y を時刻順に抽出する

    Parameters
    ----------
    series: SampleSeries | np.ndarray
        受信電力系列
    u: float
        閾値 (dB, 有限)

    Returns
    -------
    ExceedanceSet
        不足量と元のインデックス (空集合も有効)
    """
    if not np.isfinite(u):
        raise ParameterDomainException(f"Threshold must be finite: {u}")
    values = series.values if isinstance(series, SampleSeries) else np.asarray(series)
    indices = np.flatnonzero(values < u)
    return ExceedanceSet(
        deficits=u - values[indices], source_indices=indices, threshold=u
    )


def decluster_runs(exceedances: ExceedanceSet, run_gap: int = DEFAULT_RUN_GAP) -> ExceedanceSet:
    """ラン法によるデクラスタリング

    インデックスの差が run_gap 以下の連続する超過を同じクラスタとみなし、
    各クラスタの最大不足量 (同値なら最も早いもの) だけを残す。run_gap=0 は恒等写像。

    Parameters
    ----------
    exceedances: ExceedanceSet
        超過集合
    run_gap: int
        クラスタを分けるギャップ (>=0)

    Returns
    -------
    ExceedanceSet
        クラスタのピークのみからなる超過集合
    """
    if run_gap < 0:
        raise ParameterDomainException(f"Run gap must be non-negative: {run_gap}")
    if run_gap == 0 or len(exceedances) <= 1:
        return exceedances

    indices = exceedances.source_indices
    deficits = exceedances.deficits
    # ギャップがrun_gapを超えたところでクラスタを切る
    boundaries = np.flatnonzero(np.diff(indices) > run_gap) + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [len(indices)]))
    keep = np.array(
        [start + int(np.argmax(deficits[start:stop])) for start, stop in zip(starts, stops)],
        dtype=np.int64,
    )
    return ExceedanceSet(
        deficits=deficits[keep],
        source_indices=indices[keep],
        threshold=exceedances.threshold,
    )


def extremal_index(exceedances: ExceedanceSet, run_gap: int = DEFAULT_RUN_GAP) -> float:
    """ラン法による極値指数 theta = クラスタ数 / 超過数

    1に近いほど超過は独立に近く、小さいほど深いフェードが塊で起きている。
    GPDの当てはめ自体は全超過 (周辺分布) で行い、デクラスタリングはこの指標にだけ使う。

    Raises
    ------
    InsufficientDataException
        超過が1つもない場合
    """
    if len(exceedances) == 0:
        raise InsufficientDataException("Extremal index needs at least 1 exceedance", 0)
    return len(decluster_runs(exceedances, run_gap)) / len(exceedances)


def tail_probability(model: TailModel, tau: float, window_stats: WindowStats | None = None) -> float:
    """POT合成による下側テール確率 Pr(Y < tau) = (N_u/N)(1 - G(u - tau))

    Parameters
    ----------
    model: TailModel
        テールモデル
    tau: float
        電力レベル (dB, u未満)
    window_stats: WindowStats | None
        ウィンドウ統計 (省略時はmodel.window_stats)

    Raises
    ------
    ParameterDomainException
        tau >= u の場合 (バルク領域はモデル化していない)
    """
    stats = window_stats if window_stats is not None else model.window_stats
    if not tau < model.threshold:
        raise ParameterDomainException(
            f"tau ({tau}) must lie below the tail threshold ({model.threshold})"
        )
    if stats.n_u == 0:
        return 0.0
    survival = 1.0 - gpd_cdf(model.threshold - tau, model.params)
    return stats.exceedance_rate * survival


def tail_quantile(model: TailModel, probability: float, window_stats: WindowStats | None = None) -> float:
    """下側テール確率が probability となる電力レベル (dB) を返す

    tail_probability の逆関数。probability は (0, N_u/N] の範囲であること
    """
    stats = window_stats if window_stats is not None else model.window_stats
    rate = stats.exceedance_rate
    if not (0 < probability <= rate):
        raise ParameterDomainException(
            f"Target probability {probability} outside (0, N_u/N={rate}]"
        )
    conditional = 1.0 - probability / rate
    return model.threshold - gpd_quantile(conditional, model.params)
