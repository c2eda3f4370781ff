"""EVTの適合度診断: QQ点、KS統計量、分位点誤差、PPCC、およびレポート出力"""

from dataclasses import asdict, dataclass, field, fields
from typing import Protocol

import numpy as np

from ..common import evtail_logger
from ..common.exceptions import ConfigException, FitException, InsufficientDataException
from .gpd import (
    DEFAULT_RUN_GAP,
    GpdParams,
    TailModel,
    extract_exceedances,
    extremal_index,
    gpd_cdf,
    gpd_quantile,
)
from .series import ExceedanceSet, SampleSeries, sliding_windows


def _deficits(exceedances: ExceedanceSet | np.ndarray) -> np.ndarray:
    if isinstance(exceedances, ExceedanceSet):
        return exceedances.deficits
    return np.asarray(exceedances, dtype=float).reshape(-1)


def plotting_positions(n: int) -> np.ndarray:
    """Hazenのプロット位置 (i - 0.5)/n"""
    return (np.arange(1, n + 1) - 0.5) / n


@dataclass(frozen=True, eq=False)
class QqPoints:
    """経験分位点とモデル分位点の組

    Attributes
    ----------
    empirical: np.ndarray
        昇順に並べた不足量
    model: np.ndarray
        同じプロット位置でのモデル分位点
    """

    empirical: np.ndarray
    model: np.ndarray

    @property
    def n(self) -> int:
        return len(self.empirical)


def qq_points(exceedances: ExceedanceSet | np.ndarray, params: GpdParams) -> QqPoints:
    """QQプロット用の点列を計算する

    Raises
    ------
    InsufficientDataException
        不足量が2個未満の場合
    """
    z = np.sort(_deficits(exceedances))
    if len(z) < 2:
        raise InsufficientDataException("QQ points need at least 2 exceedances", len(z))
    model = np.asarray(gpd_quantile(plotting_positions(len(z)), params), dtype=float)
    return QqPoints(empirical=z, model=model)


def uniform_ks_statistic(probabilities: np.ndarray) -> float:
    """確率積分変換した値 G(z) の一様分布 U(0, 1) に対するKS統計量

    sup_i max(|i/n - p_(i)|, |p_(i) - (i-1)/n|)。ウィンドウごとにパラメータが異なる超過を
    プールして1つの統計量にまとめるときにも使う。
    """
    cdf = np.sort(np.asarray(probabilities, dtype=float).reshape(-1))
    n = len(cdf)
    if n == 0:
        raise InsufficientDataException("KS statistic needs at least 1 value", 0)
    i = np.arange(1, n + 1)
    upper = np.max(np.abs(i / n - cdf))
    lower = np.max(np.abs(cdf - (i - 1) / n))
    return float(min(max(upper, lower), 1.0))


def ks_statistic(exceedances: ExceedanceSet | np.ndarray, params: GpdParams) -> float:
    """当てはめたGPDに対する1標本KS統計量"""
    z = _deficits(exceedances)
    if len(z) == 0:
        raise InsufficientDataException("KS statistic needs at least 1 exceedance", 0)
    return uniform_ks_statistic(gpd_cdf(z, params))


@dataclass(frozen=True)
class QuantileErrors:
    """QQ点上での分位点誤差"""

    mse: float
    rmse: float
    mae: float


def quantile_errors(qq: QqPoints) -> QuantileErrors:
    """(モデル - 経験) 分位点のMSE・RMSE・MAE"""
    diff = qq.model - qq.empirical
    mse = float(np.mean(diff**2))
    return QuantileErrors(mse=mse, rmse=float(np.sqrt(mse)), mae=float(np.mean(np.abs(diff))))


def ppcc(qq: QqPoints) -> float:
    """確率プロット相関係数 (QQ点の座標間のピアソン相関)

    Raises
    ------
    InsufficientDataException
        点が3個未満の場合
    FitException
        どちらかの座標の分散が0の場合
    """
    if qq.n < 3:
        raise InsufficientDataException("PPCC needs at least 3 QQ points", qq.n)
    x = qq.empirical - qq.empirical.mean()
    y = qq.model - qq.model.mean()
    denom = np.sqrt(np.sum(x * x) * np.sum(y * y))
    if not denom > 0:
        raise FitException("PPCC is undefined for zero-variance coordinates", qq.n)
    return float(np.clip(np.sum(x * y) / denom, -1.0, 1.0))


@dataclass
class DiagnosticsReport:
    """適合度指標のまとめ

    Attributes
    ----------
    model_id: str
        モデルの識別子
    n: int
        超過数 N
    ks, mse, rmse, mae, ppcc: float
        各指標 (計算できない場合はnan)
    regime: int | None
        レジーム (集約値ならNone)
    extremal_index: float
        プールした超過のラン法による極値指数 (1なら独立、未計算ならnan)
    """

    model_id: str
    n: int
    ks: float
    mse: float
    rmse: float
    mae: float
    ppcc: float
    regime: int | None = None
    extremal_index: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DiagnosticsReport":
        return cls(**data)


REPORT_COLUMNS = (
    "model_id", "regime", "n", "ks", "mse", "rmse", "mae", "ppcc", "extremal_index",
)


def diagnose(
    exceedances: ExceedanceSet | np.ndarray,
    params: GpdParams,
    model_id: str,
    regime: int | None = None,
) -> DiagnosticsReport:
    """不足量の集合とパラメータから全指標を計算する (点数が足りない指標はnan)"""
    z = _deficits(exceedances)
    n = len(z)
    ks = ks_statistic(z, params) if n >= 1 else float("nan")
    mse = rmse = mae = corr = float("nan")
    if n >= 2:
        qq = qq_points(z, params)
        errors = quantile_errors(qq)
        mse, rmse, mae = errors.mse, errors.rmse, errors.mae
        if n >= 3:
            try:
                corr = ppcc(qq)
            except FitException:
                corr = float("nan")
    return DiagnosticsReport(
        model_id=model_id, n=n, ks=ks, mse=mse, rmse=rmse, mae=mae, ppcc=corr, regime=regime
    )


def aggregate_reports(reports: list[DiagnosticsReport], model_id: str) -> DiagnosticsReport:
    """超過数で重み付けした平均 (nanの指標は除外して重みを正規化する)"""
    if not reports:
        raise InsufficientDataException("No reports to aggregate", 0)
    weights = np.array([r.n for r in reports], dtype=float)

    def weighted(name: str) -> float:
        values = np.array([getattr(r, name) for r in reports], dtype=float)
        ok = np.isfinite(values) & (weights > 0)
        if not np.any(ok):
            return float("nan")
        return float(np.sum(values[ok] * weights[ok]) / np.sum(weights[ok]))

    mse = weighted("mse")
    return DiagnosticsReport(
        model_id=model_id,
        n=int(weights.sum()),
        ks=weighted("ks"),
        mse=mse,
        rmse=float(np.sqrt(mse)),
        mae=weighted("mae"),
        ppcc=weighted("ppcc"),
        regime=None,
        extremal_index=weighted("extremal_index"),
    )


class TailModelSource(Protocol):
    """ウィンドウからテールモデルを返すもの"""

    def tail_model(self, window: np.ndarray, regime: int | None) -> TailModel: ...


class FixedSource:
    """レジームごとに固定されたテールモデルを返すソース

    プールしたデータに対する最尤推定や、生成データへの当てはめ結果を保持する
    """

    def __init__(self, models: dict[int, TailModel]):
        self.models = dict(models)

    def tail_model(self, window: np.ndarray, regime: int | None) -> TailModel:
        if regime in self.models:
            return self.models[regime]
        if len(self.models) == 1:
            return next(iter(self.models.values()))
        raise KeyError(f"No tail model for regime {regime}")


@dataclass
class EvaluationConfig:
    """評価の設定

    Attributes
    ----------
    window: int
        評価ウィンドウ長
    stride: int | None
        ウィンドウのスライド幅 (Noneなら非重複)
    run_gap: int
        極値指数を求めるときのデクラスタリングギャップ (採点には全超過を使う)
    mle_quantile: float
        MLEベースラインの閾値とする学習データの経験分位点
    generated_samples: int
        生成器ベースラインで当てはめに使う生成サンプル数
    """

    window: int = 100
    stride: int | None = None
    run_gap: int = DEFAULT_RUN_GAP
    mle_quantile: float = 0.05
    generated_samples: int = 100_000

    def __post_init__(self):
        if self.window < 1 or (self.stride is not None and self.stride < 1):
            raise ConfigException("Evaluation window and stride must be positive")
        if self.run_gap < 0:
            raise ConfigException(f"run_gap must be non-negative: {self.run_gap}")
        if not 0 < self.mle_quantile < 0.5:
            raise ConfigException(f"mle_quantile must lie in (0, 0.5): {self.mle_quantile}")
        if self.generated_samples < 1:
            raise ConfigException("generated_samples must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigException(f"Unknown evaluation config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EvaluationResult:
    """評価結果 (集約・レジーム別・ウィンドウ別)"""

    aggregate: DiagnosticsReport
    per_regime: list[DiagnosticsReport] = field(default_factory=list)
    per_window: list[dict] = field(default_factory=list)
    qq: dict[int, QqPoints] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate.to_dict(),
            "per_regime": [r.to_dict() for r in self.per_regime],
            "per_window": list(self.per_window),
        }


def evaluate_model(
    source: TailModelSource,
    series: SampleSeries,
    model_id: str,
    cfg: EvaluationConfig | None = None,
) -> EvaluationResult:
    """評価系列に対してテールモデルを診断する

    レジームごとに、ウィンドウ推定値の中央値 (u, xi, beta) を代表モデルとし、
    そのレジームの全評価サンプルから抽出した超過量をプールして採点する。モデルは周辺分布のテールを
    表すので、採点にはデクラスタリングしない全超過を使い、ラン法は極値指数の報告にだけ使う。
    集約値は超過数で重み付けした平均。ウィンドウ単位の内訳も返す。

    Raises
    ------
    InsufficientDataException
        評価系列全体で超過が1つもない場合
    """
    cfg = cfg if cfg is not None else EvaluationConfig()
    stride = cfg.stride if cfg.stride is not None else cfg.window
    regimes = series.regimes if series.regimes is not None else np.zeros(len(series), dtype=int)

    per_regime: list[DiagnosticsReport] = []
    per_window: list[dict] = []
    qq: dict[int, QqPoints] = {}
    for regime in np.unique(regimes):
        regime = int(regime)
        values = series.values[regimes == regime]
        windows = sliding_windows(values, cfg.window, stride)
        if len(windows) == 0:
            evtail_logger.warning(f"Regime {regime} is shorter than one window; skipped")
            continue

        models = [source.tail_model(w, regime) for w in windows]
        for i, (w, m) in enumerate(zip(windows, models)):
            own = extract_exceedances(w, m.threshold)
            report = diagnose(own, m.params, model_id, regime)
            per_window.append(
                {
                    "regime": regime,
                    "window": i,
                    "threshold": m.threshold,
                    "shape": m.params.shape,
                    "scale": m.params.scale,
                    **{k: getattr(report, k) for k in ("n", "ks", "mse", "rmse", "mae", "ppcc")},
                }
            )

        threshold = float(np.median([m.threshold for m in models]))
        params = GpdParams(
            float(np.median([m.params.shape for m in models])),
            float(np.median([m.params.scale for m in models])),
        )
        pooled = extract_exceedances(values, threshold)
        if len(pooled) < 2:
            evtail_logger.warning(
                f"Regime {regime} has {len(pooled)} pooled exceedances; skipped"
            )
            continue
        report = diagnose(pooled, params, model_id, regime)
        report.extremal_index = extremal_index(pooled, cfg.run_gap)
        per_regime.append(report)
        qq[regime] = qq_points(pooled, params)

    if not per_regime or sum(r.n for r in per_regime) == 0:
        raise InsufficientDataException(f"No exceedances in evaluation set for {model_id}", 0)
    return EvaluationResult(
        aggregate=aggregate_reports(per_regime, model_id),
        per_regime=per_regime,
        per_window=per_window,
        qq=qq,
    )


def tail_coverage_ks(
    generated: np.ndarray | SampleSeries, threshold: float, reference: GpdParams
) -> float:
    """生成サンプルのうち閾値を下回る部分の不足量を、真のテールに対するKSで評価する

    生成サンプルが閾値を1つも下回らない場合は1.0 (テールを全く覆っていない)
    """
    values = generated.values if isinstance(generated, SampleSeries) else np.asarray(generated)
    deficits = threshold - values[values < threshold]
    if len(deficits) == 0:
        return 1.0
    return ks_statistic(deficits, reference)
