"""オンラインのテールパラメータ推定器 (閾値ネットワーク + パラメータネットワーク + 識別器)

ウィンドウ b_t から閾値 u_t を閾値ネットワークで、(xi_t, beta_t) をパラメータネットワークで推定する。
パラメータネットワークは、再パラメータ化したGPDサンプリングを通じて識別器からの勾配で学習する。
"""

import time
from collections import deque
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np
from scipy.special import expit

from ..common import evtail_logger
from ..common.decorators import log_elapsed
from ..common.exceptions import (
    ConfigException,
    FitException,
    InsufficientDataException,
    NumericalException,
    TrainingDivergedException,
    UnexpectedException,
)
from .diagnostics import uniform_ks_statistic
from .gpd import (
    GpdParams,
    TailModel,
    WindowStats,
    decluster_runs,
    extract_exceedances,
    fit_gpd_mle,
    fit_gpd_moments,
    gpd_cdf,
    gpd_log_pdf,
    gpd_log_pdf_grad,
)
from .neural import (
    AdamState,
    DenseNet,
    apply_adam,
    bce_with_logits,
    gpd_reparam_sample,
    softplus,
)
from .regimes import RegimeModel

SHAPE_BOUND = 0.5
SCALE_FLOOR = 1e-6

# シグモイドの飽和で閾値がウィンドウの中央値に一致しないようにする
THRESHOLD_SQUASH_MAX = 1.0 - 1e-9

# 初期化直後のパラメータネットワークの最終層の重みに掛ける係数
WARM_START_WEIGHT_SCALE = 0.1

# 識別器の出力がこの値を超え続けたら発散とみなす (10 ln 2)
DIVERGENCE_LOSS = 10.0 * np.log(2.0)

_UNIFORM_EPS = 1e-12


@dataclass
class EstimatorConfig:
    """推定器の設定

    Attributes
    ----------
    window: int
        ウィンドウ長 N_w
    stride: int
        ウィンドウのスライド幅
    lambda_tail: float
        超過数ペナルティの重み
    n_min: int
        ウィンドウあたりの最小超過数 (テール質量 x ウィンドウ長 を超えると閾値がバルクに入り込む)
    threshold_lr, generator_lr, discriminator_lr: float
        各ネットワークの学習率
    threshold_betas, adversarial_betas, kl_betas: tuple[float, float]
        Adamのモーメント係数
    batch_size: int
        ミニバッチのウィンドウ数
    threshold_epochs, epochs: int
        閾値学習・敵対的学習のエポック数
    patience: int
        早期終了までの改善なしエポック数
    scheduler_patience: int
        学習率を半減するまでの改善なしエポック数
    bandwidth: float
        ソフトカウントの帯域幅 h (dB)
    outage_threshold: float | None
        レポート用の停止閾値 x_th (dB)
    run_gap: int
        ウィンドウ内デクラスタリングのギャップ
    validation_fraction: float
        検証に回すウィンドウの割合
    constant_threshold: bool
        閾値ネットワークの代わりに固定閾値を使う (アブレーション)
    constant_threshold_quantile: float
        固定閾値として使う学習データの分位点
    divergence_epochs: int
        発散判定の連続エポック数
    hidden, disc_hidden: int
        隠れ層のユニット数
    warm_start: bool
        敵対的学習・MLP-KLの前にパラメータネットワークの出力をプールした最尤推定値に合わせる
    """

    window: int = 100
    stride: int = 1
    lambda_tail: float = 1.0
    n_min: int = 4
    threshold_lr: float = 5e-5
    generator_lr: float = 2e-4
    discriminator_lr: float = 4e-4
    threshold_betas: tuple[float, float] = (0.9, 0.999)
    adversarial_betas: tuple[float, float] = (0.5, 0.999)
    kl_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 32
    threshold_epochs: int = 50
    epochs: int = 100
    patience: int = 10
    scheduler_patience: int = 5
    bandwidth: float = 0.25
    outage_threshold: float | None = None
    run_gap: int = 0
    validation_fraction: float = 0.2
    constant_threshold: bool = False
    constant_threshold_quantile: float = 0.1
    divergence_epochs: int = 3
    hidden: int = 64
    disc_hidden: int = 128
    warm_start: bool = True

    def __post_init__(self):
        self.threshold_betas = tuple(self.threshold_betas)
        self.adversarial_betas = tuple(self.adversarial_betas)
        self.kl_betas = tuple(self.kl_betas)
        positive = (
            "window", "stride", "threshold_lr", "generator_lr", "discriminator_lr",
            "batch_size", "threshold_epochs", "epochs", "patience", "scheduler_patience",
            "bandwidth", "divergence_epochs", "hidden", "disc_hidden",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigException(f"{name} must be positive: {getattr(self, name)}")
        if self.lambda_tail < 0 or self.n_min < 0 or self.run_gap < 0:
            raise ConfigException("lambda_tail, n_min and run_gap must be non-negative")
        if not self.n_min < self.window:
            raise ConfigException(f"n_min ({self.n_min}) must be below window ({self.window})")
        if not 0 < self.validation_fraction < 1:
            raise ConfigException("validation_fraction must lie in (0, 1)")
        if not 0 < self.constant_threshold_quantile < 0.5:
            raise ConfigException("constant_threshold_quantile must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("threshold_betas", "adversarial_betas", "kl_betas"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigException(f"Unknown estimator config keys: {sorted(unknown)}")
        return cls(**data)


# ---
# ウィンドウ・バッファ
# ---


class EstimatorBuffer:
    """直近N_wサンプルを保持する推定バッファ b_t

    push()がTrueを返したときにwindowが推定対象となる (strideごと)
    """

    def __init__(self, window: int = 100, stride: int = 1):
        if window < 1 or stride < 1:
            raise ConfigException("window and stride must be positive")
        self.n_w = window
        self.stride = stride
        self.t = -1
        self._values: deque[float] = deque(maxlen=window)

    def push(self, value: float) -> bool:
        self._values.append(float(value))
        self.t += 1
        if len(self._values) < self.n_w:
            return False
        return (self.t - (self.n_w - 1)) % self.stride == 0

    @property
    def ready(self) -> bool:
        return len(self._values) == self.n_w

    @property
    def window(self) -> np.ndarray:
        return np.fromiter(self._values, dtype=float, count=len(self._values))


def standardize_windows(windows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ウィンドウごとに中央値を引き四分位範囲で割り、昇順に並べる

    閾値もテールの形も順序統計量で決まるので、ネットワークには時刻順ではなく並べ替えた値を入力する。
    並べ替えと標準化のどちらもウィンドウの平行移動で変わらない。

    Returns
    -------
    tuple[np.ndarray, np.ndarray, np.ndarray]
        標準化して昇順に並べたウィンドウ、各ウィンドウの最小値、中央値
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    q25, median, q75 = np.quantile(windows, [0.25, 0.5, 0.75], axis=1)
    iqr = q75 - q25
    iqr = np.where(iqr > 0, iqr, 1.0)
    x = (np.sort(windows, axis=1) - median[:, None]) / iqr[:, None]
    return x, windows.min(axis=1), median


# ---
# ネットワーク群
# ---


@dataclass(eq=False)
class EstimatorNets:
    """推定器を構成するネットワーク群

    Attributes
    ----------
    threshold_net: DenseNet
        N_w -> 64 -> 64 -> 1
    param_net: DenseNet
        N_w -> 64 -> 64 -> 2 (生の出力)
    discriminator: DenseNet
        1 -> 128 -> 128 -> 1 (ロジット)
    config: EstimatorConfig
        設定
    constant_threshold: float | None
        固定閾値 (アブレーション時のみ)
    regime_model: RegimeModel | None
        レジームモデル
    """

    threshold_net: DenseNet
    param_net: DenseNet
    discriminator: DenseNet
    config: EstimatorConfig
    constant_threshold: float | None = None
    regime_model: RegimeModel | None = None

    @classmethod
    def build(cls, cfg: EstimatorConfig, seed: int | np.random.Generator | None = 0) -> "EstimatorNets":
        rng = np.random.default_rng(seed)
        return cls(
            threshold_net=DenseNet.build([cfg.window, cfg.hidden, cfg.hidden, 1], "relu", rng=rng),
            param_net=DenseNet.build([cfg.window, cfg.hidden, cfg.hidden, 2], "relu", rng=rng),
            discriminator=DenseNet.build(
                [1, cfg.disc_hidden, cfg.disc_hidden, 1], "leaky_relu", rng=rng
            ),
            config=cfg,
        )

    def copy(self) -> "EstimatorNets":
        return EstimatorNets(
            threshold_net=self.threshold_net.copy(),
            param_net=self.param_net.copy(),
            discriminator=self.discriminator.copy(),
            config=self.config,
            constant_threshold=self.constant_threshold,
            regime_model=self.regime_model,
        )

    def to_dict(self) -> dict:
        return {
            "threshold_net": self.threshold_net.to_dict(),
            "param_net": self.param_net.to_dict(),
            "discriminator": self.discriminator.to_dict(),
            "config": self.config.to_dict(),
            "constant_threshold": self.constant_threshold,
            "regime_model": None if self.regime_model is None else self.regime_model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatorNets":
        return cls(
            threshold_net=DenseNet.from_dict(data["threshold_net"]),
            param_net=DenseNet.from_dict(data["param_net"]),
            discriminator=DenseNet.from_dict(data["discriminator"]),
            config=EstimatorConfig.from_dict(data["config"]),
            constant_threshold=data.get("constant_threshold"),
            regime_model=(
                None if data.get("regime_model") is None
                else RegimeModel.from_dict(data["regime_model"])
            ),
        )


@dataclass(eq=False)
class _ThresholdPass:
    thresholds: np.ndarray
    squash: np.ndarray
    span: np.ndarray
    tape: object


def _below_median(thresholds: np.ndarray, w_min: np.ndarray, w_med: np.ndarray) -> np.ndarray:
    """幅のあるウィンドウ (中央値 > 最小値) では閾値を中央値より厳密に下に抑える

    幅が数ulpしかないと w_min + s (w_med - w_min) が丸めで中央値に一致するため、中央値の1つ下の浮動小数点数で止める。
    中央値 == 最小値 の退化ウィンドウは u = 最小値 のまま。
    """
    ceiling = np.nextafter(w_med, -np.inf)
    return np.where(w_med > w_min, np.minimum(thresholds, ceiling), w_min)


def _threshold_pass(net: DenseNet, windows: np.ndarray) -> _ThresholdPass:
    x, w_min, w_med = standardize_windows(windows)
    raw, tape = net.forward(x)
    squash = expit(raw[:, 0])
    span = w_med - w_min
    thresholds = _below_median(w_min + np.minimum(squash, THRESHOLD_SQUASH_MAX) * span, w_min, w_med)
    return _ThresholdPass(thresholds=thresholds, squash=squash, span=span, tape=tape)


def batch_thresholds(nets: EstimatorNets, windows: np.ndarray, clip: bool = False) -> np.ndarray:
    """ウィンドウ群の閾値 (固定閾値のアブレーションではその定数)

    clip=Trueなら固定閾値もウィンドウの下半分に収める (問い合わせ時の契約を守るため)
    """
    windows = np.atleast_2d(windows)
    if nets.constant_threshold is None:
        return _threshold_pass(nets.threshold_net, windows).thresholds
    thresholds = np.full(len(windows), nets.constant_threshold)
    if clip:
        _, w_min, w_med = standardize_windows(windows)
        thresholds = _below_median(np.maximum(thresholds, w_min), w_min, w_med)
    return thresholds


def predict_threshold(nets: EstimatorNets, window: np.ndarray | EstimatorBuffer) -> float:
    """u = w_min + sigmoid(raw) (w_q50 - w_min)"""
    if isinstance(window, EstimatorBuffer):
        window = window.window
    return float(batch_thresholds(nets, np.asarray(window)[None, :], clip=True)[0])


def _map_params(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """生の出力を xi = 0.5 tanh(o1), beta = softplus(o2) + 1e-6 に写す"""
    bound = SHAPE_BOUND - 1e-9
    shape = np.clip(SHAPE_BOUND * np.tanh(raw[:, 0]), -bound, bound)
    scale = softplus(raw[:, 1]) + SCALE_FLOOR
    return shape, scale


def param_forward(nets: EstimatorNets, window: np.ndarray | EstimatorBuffer) -> GpdParams:
    """ウィンドウからGPDパラメータを推定する (xi in (-0.5, 0.5), beta > 0)"""
    if isinstance(window, EstimatorBuffer):
        window = window.window
    x, _, _ = standardize_windows(np.asarray(window)[None, :])
    shape, scale = _map_params(nets.param_net.predict(x))
    return GpdParams(float(shape[0]), float(scale[0]))


def window_exceedances(window: np.ndarray, threshold: float, run_gap: int) -> np.ndarray:
    """ウィンドウの (デクラスタリング済み) 不足量"""
    return decluster_runs(extract_exceedances(window, threshold), run_gap).deficits


# ---
# 閾値ネットワークの損失と学習
# ---


@dataclass(frozen=True)
class FrozenWindow:
    """1ステップの間固定する超過集合のメンバーと暫定パラメータ"""

    members: np.ndarray
    params: GpdParams | None


@dataclass(eq=False)
class ThresholdLoss:
    """閾値ネットワークの損失と勾配"""

    loss: float
    grads: list[np.ndarray]
    fit_terms: np.ndarray
    tail_terms: np.ndarray
    soft_counts: np.ndarray
    frozen: list[FrozenWindow]


def _provisional_fit(deficits: np.ndarray) -> GpdParams | None:
    """軽量な暫定フィット (2点以上で分散が正のときのみ)"""
    if len(deficits) < 2:
        return None
    try:
        params = fit_gpd_moments(deficits, min_samples=2)
    except FitException:
        return None
    z_max = float(np.max(deficits))
    if params.shape < 0 and params.upper_endpoint <= z_max:
        # サポートが最大の不足量を覆うよう尺度を広げる
        params = GpdParams(params.shape, -params.shape * z_max * 1.01)
    return params


def threshold_loss(
    nets: EstimatorNets,
    windows: np.ndarray,
    cfg: EstimatorConfig,
    frozen: list[FrozenWindow] | None = None,
) -> ThresholdLoss:
    """閾値ネットワークの損失 L_thr = mean_t [L_fit + lambda_tail L_tail] と勾配

    L_fit は暫定パラメータ (勾配を止める) の下での超過の負の対数尤度で、超過集合のメンバーは固定したまま
    不足量 u - y を通じて u に関して微分する。L_tail = max(0, n_min - c)^2 の c はシグモイドによる
    ソフトカウント。超過が2個未満のウィンドウはペナルティ項のみを持つ。

    Parameters
    ----------
    frozen: list[FrozenWindow] | None
        指定すると超過集合と暫定パラメータをこの値に固定して評価する (勾配検査用)
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    if len(windows) == 0:
        raise InsufficientDataException("Threshold loss needs a non-empty batch", 0)
    batch = len(windows)
    tp = _threshold_pass(nets.threshold_net, windows)
    du_draw = tp.squash * (1.0 - tp.squash) * tp.span

    fit_terms = np.zeros(batch)
    tail_terms = np.zeros(batch)
    soft_counts = np.zeros(batch)
    d_raw = np.zeros(batch)
    frozen_out: list[FrozenWindow] = []
    for t in range(batch):
        w, u = windows[t], tp.thresholds[t]
        if frozen is None:
            exc = decluster_runs(extract_exceedances(w, u), cfg.run_gap)
            members = exc.source_indices
            params = _provisional_fit(exc.deficits)
        else:
            members, params = frozen[t].members, frozen[t].params
        frozen_out.append(FrozenWindow(members=members, params=params))

        dloss_du = 0.0
        if params is not None and len(members) > 0:
            z = u - w[members]
            log_p = gpd_log_pdf(z, params)
            fit_terms[t] = -float(np.sum(log_p))
            # d(-log p)/dz = (1 + xi) / (beta + xi z)
            dloss_du += float(np.sum((1.0 + params.shape) / (params.scale + params.shape * z)))

        soft = expit((u - w) / cfg.bandwidth)
        soft_counts[t] = soft.sum()
        shortfall = max(0.0, cfg.n_min - soft_counts[t])
        tail_terms[t] = shortfall**2
        dloss_du += cfg.lambda_tail * (-2.0 * shortfall) * float(
            np.sum(soft * (1.0 - soft)) / cfg.bandwidth
        )
        d_raw[t] = dloss_du * du_draw[t] / batch

    loss = float(np.mean(fit_terms + cfg.lambda_tail * tail_terms))
    grads, _ = nets.threshold_net.backward(tp.tape, d_raw[:, None])
    return ThresholdLoss(
        loss=loss,
        grads=grads,
        fit_terms=fit_terms,
        tail_terms=tail_terms,
        soft_counts=soft_counts,
        frozen=frozen_out,
    )


@dataclass
class EpochRecord:
    """1エポック分の学習履歴"""

    stage: str
    epoch: int
    loss: float = float("nan")
    loss_d: float = float("nan")
    loss_g: float = float("nan")
    val_metric: float = float("nan")
    lr: float = float("nan")
    elapsed_s: float = 0.0
    skipped_steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _validation_split(n: int, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """一定間隔で検証用を抜き出す (全レジームが両方に残るように)"""
    step = max(2, int(round(1.0 / fraction)))
    indices = np.arange(n)
    val = indices % step == step - 1
    return indices[~val], indices[val]


def _chunks(indices: np.ndarray, size: int) -> list[np.ndarray]:
    return [indices[i : i + size] for i in range(0, len(indices), size)]


@log_elapsed("threshold training")
def train_threshold_net(
    windows: np.ndarray,
    cfg: EstimatorConfig,
    seed: int = 0,
    nets: EstimatorNets | None = None,
) -> tuple[DenseNet, list[EpochRecord]]:
    """閾値ネットワークを敵対的学習の前に単独で学習する

    Adam (lr 5e-5) で学習し、検証損失が1%以上改善しないエポックがscheduler_patience回続けば学習率を半減、
    patience回続けば早期終了する。検証損失が最良だったパラメータを返す。

    Raises
    ------
    InsufficientDataException
        ウィンドウが100未満の場合
    NumericalException
        損失が非有限になった場合
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    if len(windows) < 100:
        raise InsufficientDataException(
            f"Threshold training needs at least 100 windows, got {len(windows)}", len(windows)
        )
    rng = np.random.default_rng(seed)
    nets = nets if nets is not None else EstimatorNets.build(cfg, rng)
    net = nets.threshold_net
    train_idx, val_idx = _validation_split(len(windows), cfg.validation_fraction)
    state = AdamState.for_params(net.parameters(), cfg.threshold_lr, cfg.threshold_betas)

    history: list[EpochRecord] = []
    best_val, best_params = np.inf, [p.copy() for p in net.parameters()]
    plateau = stale = 0
    started = time.perf_counter()
    for epoch in range(cfg.threshold_epochs):
        losses = []
        for batch in _chunks(rng.permutation(train_idx), cfg.batch_size):
            result = threshold_loss(nets, windows[batch], cfg)
            if not np.isfinite(result.loss):
                evtail_logger.error(
                    f"Non-finite threshold loss at epoch {epoch}: "
                    f"fit={result.fit_terms}, tail={result.tail_terms}"
                )
                raise NumericalException(f"Non-finite threshold loss at epoch {epoch}")
            losses.append(result.loss)
            state, _ = apply_adam(net, state, result.grads)

        val_loss = float(
            np.mean([threshold_loss(nets, windows[b], cfg).loss for b in _chunks(val_idx, cfg.batch_size)])
        )
        if not np.isfinite(val_loss):
            raise NumericalException(f"Non-finite validation loss at epoch {epoch}")
        history.append(
            EpochRecord(
                stage="threshold",
                epoch=epoch,
                loss=float(np.mean(losses)),
                val_metric=val_loss,
                lr=state.learning_rate,
                elapsed_s=time.perf_counter() - started,
            )
        )
        evtail_logger.info(
            f"threshold epoch {epoch}: loss={history[-1].loss:.4f} val={val_loss:.4f} "
            f"lr={state.learning_rate:.2e}"
        )

        if val_loss < best_val - 0.01 * abs(best_val) or not np.isfinite(best_val):
            best_val, best_params = val_loss, [p.copy() for p in net.parameters()]
            plateau = stale = 0
        else:
            plateau += 1
            stale += 1
            if plateau >= cfg.scheduler_patience:
                state.learning_rate *= 0.5
                plateau = 0
                evtail_logger.info(f"threshold lr halved to {state.learning_rate:.2e}")
            if stale >= cfg.patience:
                evtail_logger.info(f"threshold training stopped early at epoch {epoch}")
                break

    net.set_parameters(best_params)
    return net, history


# ---
# 敵対的学習
# ---


@dataclass(eq=False)
class AdversarialOptimizers:
    """識別器と生成器 (パラメータネットワーク) のAdam状態"""

    discriminator: AdamState
    generator: AdamState

    @classmethod
    def for_nets(cls, nets: EstimatorNets, cfg: EstimatorConfig) -> "AdversarialOptimizers":
        return cls(
            discriminator=AdamState.for_params(
                nets.discriminator.parameters(), cfg.discriminator_lr, cfg.adversarial_betas
            ),
            generator=AdamState.for_params(
                nets.param_net.parameters(), cfg.generator_lr, cfg.adversarial_betas
            ),
        )


@dataclass
class StepResult:
    """敵対的学習1ステップの結果"""

    loss_d: float
    loss_g: float
    skipped: bool = False
    real_count: int = 0
    synthetic_count: int = 0


def transform_deficits(z: np.ndarray) -> np.ndarray:
    """識別器への入力変換 log(1 + z)"""
    return np.log1p(np.asarray(z, dtype=float)).reshape(-1, 1)


def real_exceedance_sets(
    nets: EstimatorNets, windows: np.ndarray, cfg: EstimatorConfig
) -> list[np.ndarray]:
    """各ウィンドウの実超過集合 Z_t (閾値ネットワークは固定)"""
    thresholds = batch_thresholds(nets, windows)
    return [window_exceedances(w, u, cfg.run_gap) for w, u in zip(windows, thresholds)]


def draw_uniforms(real_sets: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """各ウィンドウで実超過と同数の一様乱数 (開区間)"""
    return [
        np.clip(rng.random(len(z)), _UNIFORM_EPS, 1.0 - _UNIFORM_EPS) for z in real_sets
    ]


def discriminator_loss(
    discriminator: DenseNet, real: np.ndarray, synthetic: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """実=1, 合成=0 のラベルでの識別器BCE (連結バッチ平均) と勾配"""
    inputs = np.vstack([transform_deficits(real), transform_deficits(synthetic)])
    labels = np.concatenate([np.ones(len(real)), np.zeros(len(synthetic))])
    logits, tape = discriminator.forward(inputs)
    loss, d_logits = bce_with_logits(logits[:, 0], labels)
    grads, _ = discriminator.backward(tape, d_logits[:, None])
    return loss, grads


@dataclass(eq=False)
class GeneratorLoss:
    """生成器損失 L_G = -E[log D(z~)] とパラメータネットワークの勾配"""

    loss: float
    grads: list[np.ndarray]
    synthetic: list[np.ndarray]


def generator_loss(
    nets: EstimatorNets,
    windows: np.ndarray,
    real_sets: list[np.ndarray],
    uniforms: list[np.ndarray],
) -> GeneratorLoss:
    """再パラメータ化サンプリングを通じた生成器損失と勾配

    合成集合のサイズは各ウィンドウの実超過集合に合わせる。超過のないウィンドウは勾配を持たない。
    """
    windows = np.atleast_2d(windows)
    x, _, _ = standardize_windows(windows)
    raw, tape = nets.param_net.forward(x)
    shape, scale = _map_params(raw)

    samples = []
    synthetic = []
    for t, u in enumerate(uniforms):
        if len(u) == 0:
            samples.append(None)
            synthetic.append(np.empty(0))
            continue
        sample = gpd_reparam_sample(GpdParams(shape[t], scale[t]), u)
        samples.append(sample)
        synthetic.append(sample.deficits)

    all_synthetic = np.concatenate(synthetic)
    if len(all_synthetic) == 0:
        raise InsufficientDataException("Generator loss needs at least one exceedance", 0)
    logits, d_tape = nets.discriminator.forward(transform_deficits(all_synthetic))
    loss, d_logits = bce_with_logits(logits[:, 0], np.ones(len(all_synthetic)))
    _, d_input = nets.discriminator.backward(d_tape, d_logits[:, None])
    d_z = d_input[:, 0] / (1.0 + all_synthetic)

    d_raw = np.zeros_like(raw)
    offset = 0
    for t, sample in enumerate(samples):
        if sample is None:
            continue
        n = len(sample.deficits)
        g = d_z[offset : offset + n]
        offset += n
        d_shape = float(np.sum(g * sample.d_shape))
        d_scale = float(np.sum(g * sample.d_scale))
        d_raw[t, 0] = d_shape * SHAPE_BOUND * (1.0 - np.tanh(raw[t, 0]) ** 2)
        d_raw[t, 1] = d_scale * expit(raw[t, 1])
    grads, _ = nets.param_net.backward(tape, d_raw)
    return GeneratorLoss(loss=loss, grads=grads, synthetic=synthetic)


def adversarial_step(
    nets: EstimatorNets,
    windows: np.ndarray,
    cfg: EstimatorConfig,
    rng: np.random.Generator,
    optimizers: AdversarialOptimizers,
) -> StepResult:
    """識別器と生成器を1回ずつ更新する

    閾値ネットワークは固定。超過のないウィンドウは読み飛ばし、全ウィンドウが空ならno-opとして報告する。
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    real_sets = real_exceedance_sets(nets, windows, cfg)
    real = np.concatenate(real_sets) if real_sets else np.empty(0)
    if len(real) == 0:
        evtail_logger.debug("Adversarial step skipped: no exceedances in batch")
        return StepResult(loss_d=float("nan"), loss_g=float("nan"), skipped=True)

    uniforms = draw_uniforms(real_sets, rng)

    # 識別器の更新には現在の生成器からの合成サンプルを使う
    x, _, _ = standardize_windows(windows)
    shape, scale = _map_params(nets.param_net.predict(x))
    synthetic = np.concatenate(
        [
            gpd_reparam_sample(GpdParams(shape[t], scale[t]), u).deficits
            for t, u in enumerate(uniforms)
            if len(u) > 0
        ]
    )
    loss_d, d_grads = discriminator_loss(nets.discriminator, real, synthetic)
    optimizers.discriminator, _ = apply_adam(nets.discriminator, optimizers.discriminator, d_grads)

    gen = generator_loss(nets, windows, real_sets, uniforms)
    optimizers.generator, _ = apply_adam(nets.param_net, optimizers.generator, gen.grads)
    return StepResult(
        loss_d=loss_d,
        loss_g=gen.loss,
        real_count=len(real),
        synthetic_count=len(synthetic),
    )


def stratified_batches(
    labels: np.ndarray, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """レジームを順番に巡回して並べたミニバッチ

    各レジーム内をシャッフルし、レジームを交互に取り出してから batch_size ごとに区切る
    """
    labels = np.asarray(labels)
    ranks = np.empty(len(labels), dtype=np.int64)
    for regime in np.unique(labels):
        idx = np.flatnonzero(labels == regime)
        ranks[rng.permutation(idx)] = np.arange(len(idx))
    order = np.lexsort((labels, ranks))
    return _chunks(order, batch_size)


def validation_ks(nets: EstimatorNets, windows: np.ndarray, cfg: EstimatorConfig) -> float:
    """検証ウィンドウの超過を各ウィンドウの推定パラメータで G(z) に変換し、プールした一様KS

    ウィンドウあたりの超過は数個しかないため、窓ごとのKSではなく確率積分変換をプールして評価する。
    超過が1つもなければnan。
    """
    if len(windows) == 0:
        return float("nan")
    thresholds = batch_thresholds(nets, windows)
    x, _, _ = standardize_windows(windows)
    shape, scale = _map_params(nets.param_net.predict(x))
    probabilities = []
    for w, u, xi, beta in zip(windows, thresholds, shape, scale):
        z = window_exceedances(w, u, cfg.run_gap)
        if len(z) > 0:
            probabilities.append(np.asarray(gpd_cdf(z, GpdParams(xi, beta)), dtype=float))
    if not probabilities:
        return float("nan")
    return uniform_ks_statistic(np.concatenate(probabilities))


def _softplus_inverse(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def warm_start_param_net(
    nets: EstimatorNets, windows: np.ndarray, cfg: EstimatorConfig
) -> GpdParams | None:
    """パラメータネットワークの出力を、学習ウィンドウの超過をプールした最尤推定値の近くから始める

    最終層の重みを縮め、ウィンドウ全体での生の出力の中央値が (xi, beta) の逆写像に一致するようバイアスをずらす。
    閾値ネットワークで決まる超過が最尤推定に足りなければ何もしない。

    Returns
    -------
    GpdParams | None
        合わせたパラメータ (何もしなかった場合はNone)
    """
    real_sets = real_exceedance_sets(nets, windows, cfg)
    pooled = np.concatenate(real_sets) if real_sets else np.empty(0)
    try:
        fit = fit_gpd_mle(pooled)
    except FitException as e:
        evtail_logger.warning(f"Parameter network warm start skipped: {e}")
        return None

    bound = SHAPE_BOUND - 1e-3
    target = GpdParams(float(np.clip(fit.params.shape, -bound, bound)), fit.params.scale)
    params = [p.copy() for p in nets.param_net.parameters()]
    params[-2] *= WARM_START_WEIGHT_SCALE
    nets.param_net.set_parameters(params)
    x, _, _ = standardize_windows(windows)
    raw = np.median(nets.param_net.predict(x), axis=0)
    params[-1] = params[-1] + np.array(
        [
            np.arctanh(target.shape / SHAPE_BOUND) - raw[0],
            _softplus_inverse(max(target.scale - SCALE_FLOOR, SCALE_FLOOR)) - raw[1],
        ]
    )
    nets.param_net.set_parameters(params)
    evtail_logger.info(
        f"Parameter network warm start: xi={target.shape:.3f} beta={target.scale:.3f} "
        f"({len(pooled)} pooled exceedances)"
    )
    return target


def _prepare_nets(
    windows: np.ndarray,
    cfg: EstimatorConfig,
    rng: np.random.Generator,
    threshold_net: DenseNet | None,
    regime_model: RegimeModel | None,
) -> EstimatorNets:
    nets = EstimatorNets.build(cfg, rng)
    nets.regime_model = regime_model
    if cfg.constant_threshold:
        nets.constant_threshold = float(np.quantile(windows, cfg.constant_threshold_quantile))
        evtail_logger.info(f"Using constant threshold {nets.constant_threshold:.3f} dB (ablation)")
    elif threshold_net is None:
        raise ConfigException("A trained threshold network is required unless constant_threshold is set")
    else:
        nets.threshold_net = threshold_net.copy()
    return nets


def _run_epochs(
    stage: str,
    nets: EstimatorNets,
    windows: np.ndarray,
    labels: np.ndarray,
    cfg: EstimatorConfig,
    rng: np.random.Generator,
    step: Callable[[np.ndarray], StepResult],
    lr: Callable[[], float],
    guard_divergence: bool,
) -> tuple[EstimatorNets, list[EpochRecord]]:
    """エポックループ (検証KSでの早期終了と最良スナップショットの保持)

    学習前のネットワークも検証KSで採点し、どのエポックもそれを下回らなければ学習前の状態を返す。
    """
    train_idx, val_idx = _validation_split(len(windows), cfg.validation_fraction)
    history: list[EpochRecord] = []
    initial_ks = validation_ks(nets, windows[val_idx], cfg)
    best_ks = initial_ks if np.isfinite(initial_ks) else np.inf
    best = nets.copy()
    stale = diverging = 0
    started = time.perf_counter()
    for epoch in range(cfg.epochs):
        results = [
            step(windows[train_idx[batch]])
            for batch in stratified_batches(labels[train_idx], cfg.batch_size, rng)
        ]
        done = [r for r in results if not r.skipped]
        record = EpochRecord(
            stage=stage,
            epoch=epoch,
            loss_d=float(np.mean([r.loss_d for r in done])) if done else float("nan"),
            loss_g=float(np.mean([r.loss_g for r in done])) if done else float("nan"),
            val_metric=validation_ks(nets, windows[val_idx], cfg),
            lr=lr(),
            elapsed_s=time.perf_counter() - started,
            skipped_steps=len(results) - len(done),
        )
        record.loss = record.loss_g
        history.append(record)
        evtail_logger.info(
            f"{stage} epoch {epoch}: L_D={record.loss_d:.4f} L_G={record.loss_g:.4f} "
            f"val_ks={record.val_metric:.4f} skipped={record.skipped_steps}"
        )
        if any(not np.isfinite(r.loss_g) for r in done):
            raise NumericalException(f"Non-finite {stage} loss at epoch {epoch}")

        if guard_divergence:
            diverging = diverging + 1 if record.loss_g > DIVERGENCE_LOSS else 0
            if diverging >= cfg.divergence_epochs:
                evtail_logger.error(f"{stage} training diverged at epoch {epoch}")
                raise TrainingDivergedException(
                    f"L_G exceeded {DIVERGENCE_LOSS:.3f} for {diverging} epochs", history
                )

        if np.isfinite(record.val_metric) and record.val_metric < best_ks:
            best_ks, best, stale = record.val_metric, nets.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                evtail_logger.info(f"{stage} training stopped early at epoch {epoch}")
                break
    return best, history


@log_elapsed("adversarial training")
def train_estimator(
    windows: np.ndarray,
    regime_labels: np.ndarray | None,
    cfg: EstimatorConfig,
    seed: int = 0,
    threshold_net: DenseNet | None = None,
    regime_model: RegimeModel | None = None,
) -> tuple[EstimatorNets, list[EpochRecord]]:
    """EVT-GANの敵対的学習

    レジーム層別のミニバッチで識別器と生成器を1:1で交互に更新し、検証KSが最良のネットワークを返す。
    warm_start なら学習前にパラメータネットワークをプールした最尤推定値に合わせる。

    Raises
    ------
    ConfigException
        学習済み閾値ネットワークがなく、固定閾値の指定もない場合
    TrainingDivergedException
        L_G が 10 ln 2 を連続 divergence_epochs エポック超えた場合
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    labels = np.zeros(len(windows), dtype=int) if regime_labels is None else np.asarray(regime_labels)
    rng = np.random.default_rng(seed)
    nets = _prepare_nets(windows, cfg, rng, threshold_net, regime_model)
    if cfg.warm_start:
        train_idx, _ = _validation_split(len(windows), cfg.validation_fraction)
        warm_start_param_net(nets, windows[train_idx], cfg)
    optimizers = AdversarialOptimizers.for_nets(nets, cfg)

    def step(batch: np.ndarray) -> StepResult:
        return adversarial_step(nets, batch, cfg, rng, optimizers)

    return _run_epochs(
        "adversarial-constant" if cfg.constant_threshold else "adversarial",
        nets, windows, labels, cfg, rng, step,
        lr=lambda: optimizers.generator.learning_rate,
        guard_divergence=True,
    )


def kl_loss(
    nets: EstimatorNets, windows: np.ndarray, real_sets: list[np.ndarray]
) -> tuple[float, list[np.ndarray]]:
    """実超過の平均負の対数尤度 (経験エントロピーを除いた前向きKL) と勾配"""
    x, _, _ = standardize_windows(windows)
    raw, tape = nets.param_net.forward(x)
    shape, scale = _map_params(raw)
    active = [t for t, z in enumerate(real_sets) if len(z) > 0]
    if not active:
        raise InsufficientDataException("KL loss needs at least one exceedance", 0)
    d_raw = np.zeros_like(raw)
    total = 0.0
    for t in active:
        z = real_sets[t]
        log_p, d_xi, d_beta = gpd_log_pdf_grad(z, shape[t], scale[t])
        total += -float(np.mean(log_p))
        d_raw[t, 0] = -float(np.mean(d_xi)) * SHAPE_BOUND * (1.0 - np.tanh(raw[t, 0]) ** 2)
        d_raw[t, 1] = -float(np.mean(d_beta)) * expit(raw[t, 1])
    d_raw /= len(active)
    grads, _ = nets.param_net.backward(tape, d_raw)
    return total / len(active), grads


@log_elapsed("MLP-KL training")
def train_param_net_kl(
    windows: np.ndarray,
    regime_labels: np.ndarray | None,
    cfg: EstimatorConfig,
    seed: int = 0,
    threshold_net: DenseNet | None = None,
    regime_model: RegimeModel | None = None,
) -> tuple[EstimatorNets, list[EpochRecord]]:
    """MLP-KL比較手法: 同じ構造のパラメータネットワークを実超過の負の対数尤度で学習する"""
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    labels = np.zeros(len(windows), dtype=int) if regime_labels is None else np.asarray(regime_labels)
    rng = np.random.default_rng(seed)
    nets = _prepare_nets(windows, cfg, rng, threshold_net, regime_model)
    if cfg.warm_start:
        train_idx, _ = _validation_split(len(windows), cfg.validation_fraction)
        warm_start_param_net(nets, windows[train_idx], cfg)
    state = AdamState.for_params(nets.param_net.parameters(), cfg.generator_lr, cfg.kl_betas)
    holder = {"state": state}

    def step(batch: np.ndarray) -> StepResult:
        real_sets = real_exceedance_sets(nets, batch, cfg)
        if not any(len(z) for z in real_sets):
            return StepResult(loss_d=float("nan"), loss_g=float("nan"), skipped=True)
        loss, grads = kl_loss(nets, batch, real_sets)
        holder["state"], _ = apply_adam(nets.param_net, holder["state"], grads)
        return StepResult(loss_d=float("nan"), loss_g=loss, real_count=sum(len(z) for z in real_sets))

    return _run_epochs(
        "mlp-kl", nets, windows, labels, cfg, rng, step,
        lr=lambda: holder["state"].learning_rate,
        guard_divergence=False,
    )


# ---
# 問い合わせ
# ---


def estimate_batch(nets: EstimatorNets, windows: np.ndarray) -> list[TailModel]:
    """ウィンドウ群のテールモデルを推定する

    閾値は常に最小値 <= u < 中央値 に収まる。例外は中央値と最小値が一致する退化ウィンドウ
    (定数ウィンドウなど、半数以上のサンプルが最小値に等しい場合) で、このときだけ u = 最小値 = 中央値、N_u = 0 になる。

    Raises
    ------
    UnexpectedException
        推定結果が xi in (-0.5, 0.5), beta > 0 と上の閾値の範囲を満たさない場合
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=float))
    thresholds = batch_thresholds(nets, windows, clip=True)
    x, _, medians = standardize_windows(windows)
    shape, scale = _map_params(nets.param_net.predict(x))
    regimes = (
        nets.regime_model.label_windows(windows)
        if nets.regime_model is not None and windows.shape[1] >= 20
        else [None] * len(windows)
    )
    models = []
    for w, u, xi, beta, med, regime in zip(windows, thresholds, shape, scale, medians, regimes):
        degenerate = med == w.min()
        if not (-SHAPE_BOUND < xi < SHAPE_BOUND and beta > 0 and (u < med or (degenerate and u == med))):
            raise UnexpectedException(
                f"Tail model violates its contract: u={u}, median={med}, xi={xi}, beta={beta}"
            )
        models.append(
            TailModel(
                threshold=float(u),
                params=GpdParams(float(xi), float(beta)),
                window_stats=WindowStats(n=len(w), n_u=int(np.sum(w < u))),
                regime=None if regime is None else int(regime),
            )
        )
    return models


def estimate(nets: EstimatorNets, window: np.ndarray | EstimatorBuffer) -> TailModel:
    """現在のウィンドウのテールモデル (u, xi, beta) を返す"""
    if isinstance(window, EstimatorBuffer):
        window = window.window
    return estimate_batch(nets, np.asarray(window)[None, :])[0]


class NetSource:
    """学習済みネットワークを評価用のソースとして使うアダプタ"""

    def __init__(self, nets: EstimatorNets):
        self.nets = nets

    def tail_model(self, window: np.ndarray, regime: int | None) -> TailModel:
        return estimate(self.nets, window)
