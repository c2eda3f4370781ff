"""evtail コマンドラインインターフェース

サブコマンド: synth / augment / train / estimate / evaluate
終了コード: 0 成功, 2 設定エラー, 3 入出力エラー, 4 数値計算の失敗
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .common import evtail_logger
from .common.logger import LOG_LEVELS, set_log_level
from .common.decorators import log_elapsed
from .common.exceptions import (
    ConfigException,
    DataFormatException,
    FitException,
    InsufficientDataException,
    NumericalException,
    ParameterDomainException,
    RemoteTraceException,
)
from .connector.remote import RemoteTraceConfig
from .module.augmentor import (
    AugmentConfig,
    build_augmented_dataset,
    fit_generated_tail,
    generator_from_dict,
    train_augmentor,
    train_vanilla_gan,
)
from .module.diagnostics import (
    REPORT_COLUMNS,
    EvaluationConfig,
    FixedSource,
    evaluate_model,
    tail_coverage_ks,
)
from .module.estimator import (
    EpochRecord,
    EstimatorBuffer,
    EstimatorConfig,
    EstimatorNets,
    NetSource,
    estimate_batch,
    train_estimator,
    train_param_net_kl,
    train_threshold_net,
)
from .module.gpd import (
    TailModel,
    WindowStats,
    extract_exceedances,
    fit_gpd_mle,
    tail_probability,
)
from .module.regimes import RegimeConfig, RegimeModel, fit_regimes, label_samples
from .module.series import ORIGIN_SYNTHETIC, SampleSeries, sliding_windows
from .module.synth import (
    SynthConfig,
    concat_cells,
    generate_synthetic,
    split_batches,
    windows_from_cells,
)
from .util.csvio import ColumnSpec, ingest_csv, iter_csv_values, write_csv, write_table
from .util.seeds import stage_seed
from .util.serialize import read_checkpoint, read_json, write_checkpoint, write_json

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

ABLATIONS = ("constant-threshold",)

HISTORY_COLUMNS = ("stage", "epoch", "loss_d", "loss_g", "loss", "val_metric", "lr", "ablation")

ESTIMATE_FLUSH = 4096


@dataclass
class RunConfig:
    """1回の実行の設定 (設定ファイルとフラグを統合したもの)

    Attributes
    ----------
    seed: int
        ルートシード (各ステージのシードはここから導く)
    n_batches, n_sub: int
        学習・評価分割のバッチ数とサブバッチ数
    train_mlp_kl: bool
        比較用のMLP-KLも学習するかどうか
    ablation: str | None
        アブレーション名
    """

    seed: int = 0
    n_batches: int = 8
    n_sub: int = 8
    train_mlp_kl: bool = True
    ablation: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    evaluate: EvaluationConfig = field(default_factory=EvaluationConfig)
    regimes: RegimeConfig = field(default_factory=RegimeConfig)
    remote: RemoteTraceConfig = field(default_factory=RemoteTraceConfig)

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigException(f"Seed must be non-negative: {self.seed}")
        if self.n_batches < 1 or self.n_sub < 1:
            raise ConfigException("n_batches and n_sub must be positive")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ConfigException(f"Unknown ablation {self.ablation!r} (choose from {ABLATIONS})")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_batches": self.n_batches,
            "n_sub": self.n_sub,
            "train_mlp_kl": self.train_mlp_kl,
            "ablation": self.ablation,
            "synth": self.synth.to_dict(),
            "estimator": self.estimator.to_dict(),
            "augment": self.augment.to_dict(),
            "evaluate": self.evaluate.to_dict(),
            "regimes": self.regimes.to_dict(),
            "remote": self.remote.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigException("Config file must contain a JSON object")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigException(f"Unknown config sections: {sorted(unknown)}")
        sections = {
            "synth": SynthConfig,
            "estimator": EstimatorConfig,
            "augment": AugmentConfig,
            "evaluate": EvaluationConfig,
            "regimes": RegimeConfig,
            "remote": RemoteTraceConfig,
        }
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigException(f"Section {key!r} must be a JSON object")
                try:
                    kwargs[key] = sections[key].from_dict(value)
                except TypeError as e:
                    raise ConfigException(f"Invalid {key} section: {e}") from e
            else:
                kwargs[key] = value
        return cls(**kwargs)


# ---
# 設定の解決
# ---


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_dict(read_json(args.config)) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.ablation is not None:
        cfg = replace(cfg, ablation=args.ablation)

    estimator = {}
    if args.window is not None:
        estimator["window"] = args.window
        cfg.evaluate = replace(cfg.evaluate, window=args.window)
    if args.stride is not None:
        estimator["stride"] = args.stride
    if args.xth is not None:
        estimator["outage_threshold"] = args.xth
    if cfg.ablation == "constant-threshold":
        estimator["constant_threshold"] = True
    if estimator:
        cfg.estimator = replace(cfg.estimator, **estimator)
    if args.command == "synth" and (args.config is None or args.seed is not None):
        cfg.synth = replace(cfg.synth, seed=stage_seed(cfg.seed, "synth"))
    return cfg


def _prepare_out(args: argparse.Namespace, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", cfg.to_dict())
    return out


def _require(value, flag: str):
    if value is None:
        raise ConfigException(f"{flag} is required for this command")
    return value


def _history_rows(history: list[EpochRecord], ablation: str | None) -> list[dict]:
    return [
        {
            "stage": r.stage,
            "epoch": r.epoch,
            "loss_d": r.loss_d,
            "loss_g": r.loss_g,
            "loss": r.loss,
            "val_metric": r.val_metric,
            "lr": r.lr,
            "ablation": ablation or "",
        }
        for r in history
    ]


def _ingest(path: str, cfg: RunConfig) -> SampleSeries:
    return ingest_csv(path, ColumnSpec(), remote_config=cfg.remote)


# ---
# サブコマンド
# ---


@log_elapsed("synth")
def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> None:
    """合成データセットと真値注釈を書き出す"""
    out = _prepare_out(args, cfg)
    series, truth = generate_synthetic(cfg.synth)
    write_csv(out / "synthetic.csv", series)
    write_json(out / "ground_truth.json", truth.to_dict())
    evtail_logger.info(f"Wrote {len(series)} samples to {out / 'synthetic.csv'}")


def _regime_model_for(series: SampleSeries, cfg: RunConfig, stage: str) -> RegimeModel:
    return fit_regimes(
        series,
        window=cfg.regimes.window,
        k_range=cfg.regimes.k_range,
        seed=stage_seed(cfg.seed, stage),
    )


@log_elapsed("augment")
def cmd_augment(args: argparse.Namespace, cfg: RunConfig) -> None:
    """ハイブリッド生成器とバニラGANを学習し、拡張データセットを書き出す"""
    out = _prepare_out(args, cfg)
    real = _ingest(_require(args.data, "--data"), cfg).real_only()
    regime_model = None
    if real.regimes is None and cfg.augment.per_regime:
        regime_model = _regime_model_for(real, cfg, "augment-regimes")

    hybrid, hybrid_history = train_augmentor(
        real, regime_model, cfg.augment, seed=stage_seed(cfg.seed, "augment-hybrid")
    )
    vanilla, vanilla_history = train_vanilla_gan(
        real, cfg.augment, seed=stage_seed(cfg.seed, "augment-vanilla"), regime_model=regime_model
    )
    if real.regimes is None and regime_model is not None:
        real = SampleSeries(
            values=real.values,
            sample_period=real.sample_period,
            label=real.label,
            origins=real.origins,
            regimes=label_samples(regime_model, real),
        )

    augmented = build_augmented_dataset(
        real, hybrid, cfg.augment.ratio, rng=stage_seed(cfg.seed, "augment-generate")
    )
    write_csv(out / "augmented.csv", augmented)
    write_checkpoint(
        out / "augmentor.json",
        "augmentor",
        {
            "hybrid": [g.to_dict() for g in hybrid.values()],
            "vanilla": [g.to_dict() for g in vanilla.values()],
            "regime_model": None if regime_model is None else regime_model.to_dict(),
        },
    )
    write_table(
        out / "augment_history.csv",
        _history_rows(hybrid_history + vanilla_history, None),
        columns=HISTORY_COLUMNS,
    )

    # テール被覆の比較 (真値がないため各レジームのMLEテールを参照とする)
    rng = np.random.default_rng(stage_seed(cfg.seed, "augment-coverage"))
    for regime, gen in hybrid.items():
        if regime not in vanilla:
            continue
        hybrid_ks = tail_coverage_ks(gen.generate(10_000, rng), gen.threshold, gen.params)
        vanilla_ks = tail_coverage_ks(vanilla[regime].generate(10_000, rng), gen.threshold, gen.params)
        evtail_logger.info(
            f"Regime {regime}: tail-coverage KS hybrid={hybrid_ks:.4f} vanilla={vanilla_ks:.4f}"
        )


def _split(series: SampleSeries, cfg: RunConfig):
    return split_batches(series, cfg.n_batches, cfg.n_sub, cfg.estimator.window)


def _training_windows(
    series: SampleSeries, cfg: RunConfig, regime_model: RegimeModel
) -> tuple[np.ndarray, np.ndarray]:
    """学習用ウィンドウとレジームラベル (拡張データの合成サンプルは追加のウィンドウにする)"""
    window, stride = cfg.estimator.window, cfg.estimator.stride
    real = series.real_only()
    partition = _split(real, cfg)
    windows, labels = windows_from_cells(real, partition.train_cells(), window, stride)
    if real.regimes is None:
        labels = regime_model.label_windows(windows)

    if series.origins is not None:
        synthetic = series.select(series.origins == ORIGIN_SYNTHETIC)
        extra = sliding_windows(synthetic.values, window, stride)
        if len(extra) > 0:
            if synthetic.regimes is not None:
                ends = np.arange(window - 1, len(synthetic), stride)[: len(extra)]
                extra_labels = synthetic.regimes[ends]
            else:
                extra_labels = regime_model.label_windows(extra)
            evtail_logger.info(f"Adding {len(extra)} windows from synthetic samples")
            windows = np.concatenate([windows, extra])
            labels = np.concatenate([labels, extra_labels])
    return windows, np.asarray(labels, dtype=int)


@log_elapsed("train")
def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> None:
    """レジーム分割 -> 閾値ネットワーク -> 敵対的学習 の順に学習する"""
    series = _ingest(_require(args.data, "--data"), cfg)
    out = _prepare_out(args, cfg)
    est = cfg.estimator

    real = series.real_only()
    train_real = concat_cells(real, _split(real, cfg).train_cells())
    regime_model = _regime_model_for(train_real, cfg, "regimes")
    windows, labels = _training_windows(series, cfg, regime_model)
    evtail_logger.info(f"Training on {len(windows)} windows across {len(np.unique(labels))} regimes")

    history: list[EpochRecord] = []
    threshold_net = None
    if not est.constant_threshold:
        threshold_net, threshold_history = train_threshold_net(
            windows, est, seed=stage_seed(cfg.seed, "threshold")
        )
        history.extend(threshold_history)

    nets, adversarial_history = train_estimator(
        windows, labels, est, seed=stage_seed(cfg.seed, "adversarial"),
        threshold_net=threshold_net, regime_model=regime_model,
    )
    history.extend(adversarial_history)

    kl_nets = None
    if cfg.train_mlp_kl:
        kl_nets, kl_history = train_param_net_kl(
            windows, labels, est, seed=stage_seed(cfg.seed, "mlp-kl"),
            threshold_net=threshold_net, regime_model=regime_model,
        )
        history.extend(kl_history)

    write_checkpoint(
        out / "checkpoint.json",
        "estimator",
        {
            "evt_gan": nets.to_dict(),
            "mlp_kl": None if kl_nets is None else kl_nets.to_dict(),
            "ablation": cfg.ablation,
        },
    )
    write_table(out / "history.csv", _history_rows(history, cfg.ablation), columns=HISTORY_COLUMNS)


def _estimate_rows(nets: EstimatorNets, windows: list[np.ndarray], ends: list[int], xth) -> list[dict]:
    rows = []
    for end, window, model in zip(ends, windows, estimate_batch(nets, np.array(windows))):
        row = {"index": end, **model.to_dict()}
        if xth is not None:
            row["tail_probability"] = _outage_probability(model, window, xth)
        rows.append(row)
    return rows


def _outage_probability(model: TailModel, window: np.ndarray, xth: float) -> float:
    """Pr(Y < x_th): x_th < u ならテールモデル、そうでなければウィンドウの経験割合"""
    if xth < model.threshold:
        return tail_probability(model, xth)
    return float(np.mean(window < xth))


@log_elapsed("estimate")
def cmd_estimate(args: argparse.Namespace, cfg: RunConfig) -> None:
    """スライディングウィンドウごとのテールモデルを逐次書き出す (メモリ使用量は系列長に依存しない)"""
    payload = read_checkpoint(_require(args.checkpoint, "--checkpoint"), "estimator")
    nets = EstimatorNets.from_dict(payload["evt_gan"])
    data = _require(args.data, "--data")
    out = _prepare_out(args, cfg)
    window = nets.config.window
    if cfg.estimator.window != window:
        evtail_logger.warning(f"Checkpoint window {window} overrides configured {cfg.estimator.window}")
    xth = cfg.estimator.outage_threshold

    columns = ["index", "threshold", "shape", "scale", "n", "n_u", "regime"]
    if xth is not None:
        columns.append("tail_probability")
    path = out / "estimates.csv"
    write_table(path, [], columns=columns)

    buffer = EstimatorBuffer(window, cfg.estimator.stride)
    pending, ends = [], []
    total = 0
    started = time.perf_counter()

    def flush():
        nonlocal total
        if not pending:
            return
        frame_rows = _estimate_rows(nets, pending, ends, xth)
        pd.DataFrame(frame_rows, columns=columns).to_csv(
            path, mode="a", header=False, index=False, lineterminator="\n"
        )
        total += len(frame_rows)
        pending.clear()
        ends.clear()

    for chunk in iter_csv_values(data):
        for value in chunk:
            if buffer.push(value):
                pending.append(buffer.window)
                ends.append(buffer.t)
                if len(pending) >= ESTIMATE_FLUSH:
                    flush()
    flush()

    if buffer.t + 1 < window:
        evtail_logger.warning(f"Stream of {buffer.t + 1} samples is shorter than window {window}")
    else:
        evtail_logger.info(f"First {window - 1} samples fill the buffer and yield no estimate")
    elapsed = time.perf_counter() - started
    evtail_logger.info(
        f"Wrote {total} estimates ({total / elapsed if elapsed > 0 else float('inf'):.1f} windows/s)"
    )


def _mle_source(train: SampleSeries, cfg: RunConfig) -> FixedSource:
    """学習データをレジームごとにプールしたMLEベースライン (閾値を下回る全サンプルに当てはめる)"""
    models = {}
    for regime in np.unique(train.regimes):
        values = train.values[train.regimes == regime]
        u = float(np.quantile(values, cfg.evaluate.mle_quantile))
        fit = fit_gpd_mle(extract_exceedances(values, u))
        models[int(regime)] = TailModel(
            threshold=u,
            params=fit.params,
            window_stats=WindowStats(n=len(values), n_u=int(np.sum(values < u))),
            regime=int(regime),
        )
    return FixedSource(models)


def _generator_sources(path: str, cfg: RunConfig) -> dict[str, FixedSource]:
    """拡張生成器の生成サンプルにMLEで当てはめたベースライン"""
    payload = read_checkpoint(path, "augmentor")
    hybrid = [generator_from_dict(g) for g in payload["hybrid"]]
    vanilla = {g.regime: g for g in map(generator_from_dict, payload["vanilla"])}
    rng = np.random.default_rng(stage_seed(cfg.seed, "evaluate-generated"))
    sources: dict[str, dict] = {"hybrid-augment": {}, "vanilla-gan-augment": {}}
    for gen in hybrid:
        for name, source_gen in (("hybrid-augment", gen), ("vanilla-gan-augment", vanilla.get(gen.regime))):
            if source_gen is None:
                continue
            try:
                model = fit_generated_tail(
                    source_gen, gen.threshold, cfg.evaluate.generated_samples, rng, regime=gen.regime
                )
            except FitException as e:
                evtail_logger.warning(f"{name}: regime {gen.regime} tail fit failed ({e})")
                continue
            sources[name][gen.regime] = model
    return {name: FixedSource(models) for name, models in sources.items() if models}


@log_elapsed("evaluate")
def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> None:
    """評価用サブバッチでモデルを診断し、レポート・QQ点・比較表を書き出す"""
    series = _ingest(_require(args.data, "--data"), cfg).real_only()
    payload = read_checkpoint(_require(args.checkpoint, "--checkpoint"), "estimator")
    out = _prepare_out(args, cfg)
    nets = EstimatorNets.from_dict(payload["evt_gan"])

    if series.regimes is None:
        if nets.regime_model is None:
            raise ConfigException("Data has no regime column and the checkpoint has no regime model")
        series = SampleSeries(
            values=series.values,
            sample_period=series.sample_period,
            label=series.label,
            regimes=label_samples(nets.regime_model, series),
        )
    partition = split_batches(series, cfg.n_batches, cfg.n_sub, cfg.evaluate.window)
    train = concat_cells(series, partition.train_cells())
    evaluation = concat_cells(series, partition.eval_cells())

    sources = {"evt-gan": NetSource(nets)}
    if payload.get("mlp_kl") is not None:
        sources["mlp-kl"] = NetSource(EstimatorNets.from_dict(payload["mlp_kl"]))
    else:
        evtail_logger.warning("mlp-kl: no network in checkpoint; omitted")
    try:
        sources["mle"] = _mle_source(train, cfg)
    except FitException as e:
        evtail_logger.warning(f"mle: pooled fit failed ({e}); omitted")
    if args.augmentor:
        sources.update(_generator_sources(args.augmentor, cfg))
    else:
        evtail_logger.warning("vanilla-gan-augment: no augmentor checkpoint given; omitted")

    comparison = []
    for model_id, source in sources.items():
        try:
            result = evaluate_model(source, evaluation, model_id, cfg.evaluate)
        except (InsufficientDataException, KeyError) as e:
            evtail_logger.warning(f"{model_id}: evaluation failed ({e}); omitted")
            continue
        write_json(out / "reports" / f"{model_id}.json", result.to_dict())
        write_table(out / "per_window" / f"{model_id}.csv", result.per_window)
        for regime, qq in result.qq.items():
            write_table(
                out / "qq" / f"{model_id}_regime{regime}.csv",
                {"empirical": qq.empirical, "model": qq.model},
            )
        for report in [result.aggregate, *result.per_regime]:
            comparison.append({k: getattr(report, k) for k in REPORT_COLUMNS})
        evtail_logger.info(
            f"{model_id}: KS={result.aggregate.ks:.4f} RMSE={result.aggregate.rmse:.4f} "
            f"PPCC={result.aggregate.ppcc:.4f} (N={result.aggregate.n})"
        )
    write_table(out / "comparison.csv", comparison, columns=REPORT_COLUMNS)


# ---
# エントリポイント
# ---

COMMANDS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="root seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--data", default=None, help="input CSV path or http(s) URL")
    common.add_argument("--checkpoint", default=None, help="estimator checkpoint JSON")
    common.add_argument("--augmentor", default=None, help="augmentor checkpoint JSON (evaluate)")
    common.add_argument("--window", type=int, default=None, help="window length N_w")
    common.add_argument("--stride", type=int, default=None, help="window stride")
    common.add_argument("--xth", type=float, default=None, help="outage threshold x_th (dB)")
    common.add_argument("--ablation", choices=ABLATIONS, default=None)
    common.add_argument(
        "--log-level", default="INFO", choices=LOG_LEVELS
    )

    parser = argparse.ArgumentParser(prog="evtail", description="EVT-guided tail modeling")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=func.__doc__)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    set_log_level(args.log_level)

    try:
        cfg = _resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigException, json.JSONDecodeError) as e:
        evtail_logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (OSError, DataFormatException, RemoteTraceException) as e:
        evtail_logger.error(f"I/O error: {e}")
        return EXIT_IO
    except (NumericalException, FitException, InsufficientDataException, ParameterDomainException) as e:
        evtail_logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
