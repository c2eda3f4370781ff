"""小規模な全結合ネットワークと、その学習に必要な最小限の部品

逆伝播は層ごとに手書きしている (ネットワークは高々3層なので汎用の自動微分は持たない)。
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from ..common import evtail_logger
from ..common.exceptions import (
    DimensionMismatchException,
    NumericalException,
    ParameterDomainException,
    StaleTapeException,
)
from .gpd import XI_EPSILON, GpdParams

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "softplus", "sigmoid", "identity")

LEAKY_SLOPE = 0.01

# Adam更新前の勾配クリッピング (大域ノルム)
GRAD_CLIP_NORM = 5.0


def softplus(x: np.ndarray) -> np.ndarray:
    """数値的に安定なsoftplus: log1p(exp(-|x|)) + max(x, 0)"""
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if activation == "tanh":
        return np.tanh(x)
    if activation == "softplus":
        return softplus(x)
    if activation == "sigmoid":
        return expit(x)
    if activation == "identity":
        return x
    raise ParameterDomainException(f"Unknown activation: {activation}")


def activation_derivative(pre: np.ndarray, activation: str) -> np.ndarray:
    """活性化関数の導関数を前活性値で評価する"""
    if activation == "relu":
        return (pre > 0).astype(float)
    if activation == "leaky_relu":
        return np.where(pre > 0, 1.0, LEAKY_SLOPE)
    if activation == "tanh":
        return 1.0 - np.tanh(pre) ** 2
    if activation == "softplus":
        return expit(pre)
    if activation == "sigmoid":
        s = expit(pre)
        return s * (1.0 - s)
    if activation == "identity":
        return np.ones_like(pre)
    raise ParameterDomainException(f"Unknown activation: {activation}")


@dataclass(eq=False)
class DenseLayer:
    """全結合層 y = act(x W + b)

    Attributes
    ----------
    weight: np.ndarray
        (入力次元, 出力次元) の重み
    bias: np.ndarray
        (出力次元,) のバイアス
    activation: str
        活性化関数のタグ
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[1] != len(self.bias):
            raise DimensionMismatchException(
                f"Weight {self.weight.shape} does not match bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ParameterDomainException(f"Unknown activation: {self.activation}")


@dataclass(eq=False)
class GradTape:
    """順伝播で記録した逆伝播用の値

    Attributes
    ----------
    net: DenseNet
        記録元のネットワーク
    version: int
        記録時のネットワークのパラメータ版数
    inputs: list[np.ndarray]
        各層への入力
    pre_activations: list[np.ndarray]
        各層の前活性値
    """

    net: "DenseNet"
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)

    @property
    def output_shape(self) -> tuple[int, int]:
        return self.pre_activations[-1].shape


class DenseNet:
    """全結合ネットワーク

    閾値ネットワーク・パラメータネットワーク・識別器・バルク生成器の共通基盤
    """

    def __init__(self, layers: list[DenseLayer]):
        if len(layers) == 0:
            raise DimensionMismatchException("DenseNet needs at least one layer")
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise DimensionMismatchException(
                    f"Layer dimensions do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self.layers = layers
        self.version = 0

    @classmethod
    def build(
        cls,
        sizes: list[int],
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        rng: np.random.Generator | int | None = None,
    ) -> "DenseNet":
        """層サイズのリストからネットワークを構築する

        重みはrelu系ならHe型、それ以外はXavier型の一様分布で初期化し、バイアスは0とする

        Parameters
        ----------
        sizes: list[int]
            [入力次元, 隠れ層..., 出力次元]
        hidden_activation: str
            隠れ層の活性化関数
        output_activation: str
            出力層の活性化関数
        rng: np.random.Generator | int | None
            乱数生成器またはシード
        """
        if len(sizes) < 2:
            raise DimensionMismatchException("sizes needs input and output dimensions")
        rng = np.random.default_rng(rng)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            activation = output_activation if i == len(sizes) - 2 else hidden_activation
            if activation in ("relu", "leaky_relu"):
                limit = np.sqrt(6.0 / fan_in)
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append(DenseLayer(weight, np.zeros(fan_out), activation))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def parameter_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        """[W0, b0, W1, b1, ...] の順で参照を返す"""
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def set_parameters(self, params: list[np.ndarray]) -> None:
        """パラメータを置き換え、版数を進める"""
        if len(params) != 2 * len(self.layers):
            raise DimensionMismatchException("Parameter list length mismatch")
        for i, layer in enumerate(self.layers):
            weight = np.array(params[2 * i], dtype=float)
            bias = np.array(params[2 * i + 1], dtype=float)
            if weight.shape != layer.weight.shape or bias.shape != layer.bias.shape:
                raise DimensionMismatchException(f"Parameter shape mismatch at layer {i}")
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise NumericalException(f"Non-finite parameters at layer {i}")
            layer.weight, layer.bias = weight, bias
        self.version += 1

    def forward(self, batch: np.ndarray) -> tuple[np.ndarray, GradTape]:
        """順伝播

        Parameters
        ----------
        batch: np.ndarray
            (バッチ, 入力次元) の入力

        Returns
        -------
        tuple[np.ndarray, GradTape]
            (バッチ, 出力次元) の出力と逆伝播用テープ
        """
        x = np.asarray(batch, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionMismatchException(
                f"Input shape {x.shape} does not match input dimension {self.in_dim}"
            )
        tape = GradTape(net=self, version=self.version)
        for layer in self.layers:
            pre = x @ layer.weight + layer.bias
            tape.inputs.append(x)
            tape.pre_activations.append(pre)
            x = activate(pre, layer.activation)
        return x, tape

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch)[0]

    def backward(
        self, tape: GradTape, output_grad: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """逆伝播

        Parameters
        ----------
        tape: GradTape
            forwardで得たテープ
        output_grad: np.ndarray
            出力に対する損失の勾配

        Returns
        -------
        tuple[list[np.ndarray], np.ndarray]
            parameters()と同じ順の勾配リストと、入力に対する勾配

        Raises
        ------
        StaleTapeException
            テープ記録後にパラメータが更新されていた場合
        """
        if tape.net is not self or tape.version != self.version:
            raise StaleTapeException(
                "GradTape was recorded before the latest parameter update"
            )
        grad = np.asarray(output_grad, dtype=float)
        if grad.shape != tape.output_shape:
            raise DimensionMismatchException(
                f"Output gradient {grad.shape} does not match output {tape.output_shape}"
            )
        param_grads: list[np.ndarray] = [np.empty(0)] * (2 * len(self.layers))
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            delta = grad * activation_derivative(tape.pre_activations[i], layer.activation)
            param_grads[2 * i] = tape.inputs[i].T @ delta
            param_grads[2 * i + 1] = delta.sum(axis=0)
            grad = delta @ layer.weight.T
        return param_grads, grad

    def copy(self) -> "DenseNet":
        return DenseNet(
            [
                DenseLayer(layer.weight.copy(), layer.bias.copy(), layer.activation)
                for layer in self.layers
            ]
        )

    def to_dict(self) -> dict:
        return {
            "architecture": [self.in_dim] + [layer.weight.shape[1] for layer in self.layers],
            "activations": [layer.activation for layer in self.layers],
            "weights": [layer.weight.tolist() for layer in self.layers],
            "biases": [layer.bias.tolist() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNet":
        layers = [
            DenseLayer(np.array(w, dtype=float).reshape(data["architecture"][i], -1), b, act)
            for i, (w, b, act) in enumerate(
                zip(data["weights"], data["biases"], data["activations"])
            )
        ]
        return cls(layers)


def forward(net: DenseNet, batch: np.ndarray) -> tuple[np.ndarray, GradTape]:
    return net.forward(batch)


def backward(tape: GradTape, output_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    return tape.net.backward(tape, output_grad)


# ---
# 最適化
# ---


@dataclass
class AdamState:
    """Adamの内部状態

    Attributes
    ----------
    learning_rate: float
        学習率
    betas: tuple[float, float]
        モーメント係数 (beta1, beta2)
    eps: float
        分母の安定化項
    step: int
        更新回数
    first_moments: list[np.ndarray]
        1次モーメント
    second_moments: list[np.ndarray]
        2次モーメント
    """

    learning_rate: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first_moments: list[np.ndarray] = field(default_factory=list)
    second_moments: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(
        cls,
        params: list[np.ndarray],
        learning_rate: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            betas=(float(betas[0]), float(betas[1])),
            eps=eps,
            first_moments=[np.zeros_like(p, dtype=float) for p in params],
            second_moments=[np.zeros_like(p, dtype=float) for p in params],
        )

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "betas": list(self.betas),
            "eps": self.eps,
            "step": self.step,
            "first_moments": [m.tolist() for m in self.first_moments],
            "second_moments": [v.tolist() for v in self.second_moments],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AdamState":
        return cls(
            learning_rate=data["learning_rate"],
            betas=(float(data["betas"][0]), float(data["betas"][1])),
            eps=data["eps"],
            step=int(data["step"]),
            first_moments=[np.array(m, dtype=float) for m in data["first_moments"]],
            second_moments=[np.array(v, dtype=float) for v in data["second_moments"]],
        )


def adam_step(
    state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> tuple[list[np.ndarray], AdamState, bool]:
    """バイアス補正つきAdamの1ステップ

    非有限の勾配を含む場合は更新を棄却し、元のパラメータと状態をそのまま返す

    Returns
    -------
    tuple[list[np.ndarray], AdamState, bool]
        更新後のパラメータ、更新後の状態、更新が受理されたかどうか
    """
    if len(params) != len(grads) or len(params) != len(state.first_moments):
        raise DimensionMismatchException("Adam parameter/gradient count mismatch")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise DimensionMismatchException(
                f"Gradient shape {np.shape(g)} does not match parameter {np.shape(p)}"
            )
    if not all(np.all(np.isfinite(g)) for g in grads):
        evtail_logger.warning(f"Adam update rejected at step {state.step}: non-finite gradient")
        return list(params), state, False

    beta1, beta2 = state.betas
    step = state.step + 1
    first, second, updated = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moments, state.second_moments):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        updated.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
        first.append(m)
        second.append(v)
    return updated, replace(state, step=step, first_moments=first, second_moments=second), True


def clip_by_global_norm(
    grads: list[np.ndarray], max_norm: float = GRAD_CLIP_NORM
) -> tuple[list[np.ndarray], float]:
    """大域ノルムがmax_normを超える勾配を縮小する"""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not np.isfinite(norm) or norm <= max_norm:
        return grads, norm
    return [g * (max_norm / norm) for g in grads], norm


def apply_adam(
    net: DenseNet, state: AdamState, grads: list[np.ndarray], max_norm: float = GRAD_CLIP_NORM
) -> tuple[AdamState, bool]:
    """勾配をクリップしてAdam更新をネットワークに適用する"""
    grads, _ = clip_by_global_norm(grads, max_norm)
    params, state, accepted = adam_step(state, net.parameters(), grads)
    if accepted:
        net.set_parameters(params)
    return state, accepted


# ---
# 損失
# ---


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """ロジットに対する二値交差エントロピー (平均)

    log-sum-exp 形式 max(l, 0) - l*y + log1p(exp(-|l|)) で評価する

    Returns
    -------
    tuple[float, np.ndarray]
        損失と、ロジットに対する勾配 (sigmoid(l) - y) / n
    """
    logits = np.asarray(logits, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if len(logits) != len(labels):
        raise DimensionMismatchException("logits and labels differ in length")
    if len(logits) == 0:
        raise DimensionMismatchException("BCE needs a non-empty batch")
    losses = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    grad = (expit(logits) - labels) / len(logits)
    return float(np.mean(losses)), grad


# ---
# 再パラメータ化サンプリング
# ---


@dataclass(frozen=True, eq=False)
class ReparamSample:
    """再パラメータ化されたGPDサンプルとその偏微分"""

    deficits: np.ndarray
    d_shape: np.ndarray
    d_scale: np.ndarray


def gpd_reparam_sample(params: GpdParams, uniforms: np.ndarray) -> ReparamSample:
    """一様乱数を決定的に変換したGPDサンプル

    z = (beta/xi)((1-U)^(-xi) - 1) とその xi, beta に関する解析的な偏微分を返す。
    |xi| が小さい場合は z = -beta ln(1-U), dz/dxi = (beta/2) ln^2(1-U) を用いる。

    Raises
    ------
    ParameterDomainException
        一様乱数が開区間(0,1)に入っていない場合
    """
    u = np.asarray(uniforms, dtype=float).reshape(-1)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ParameterDomainException("Uniforms must lie strictly inside (0, 1)")
    xi, beta = params.shape, params.scale
    log_tail = -np.log1p(-u)

    if abs(xi) < XI_EPSILON:
        deficits = beta * log_tail
        d_shape = 0.5 * beta * log_tail**2
    else:
        growth = np.expm1(xi * log_tail)
        deficits = beta * growth / xi
        d_shape = beta * (log_tail * (growth + 1.0) / xi - growth / xi**2)
    return ReparamSample(deficits=deficits, d_shape=d_shape, d_scale=deficits / beta)
