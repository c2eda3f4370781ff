"""受信電力系列のCSV入出力

形式: ヘッダ `index,timestamp_s,power_db[,origin][,regime]`、UTF-8、LF改行
"""

import io
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from ..common import evtail_logger
from ..common.exceptions import DataFormatException
from ..connector.remote import RemoteTraceClient, RemoteTraceConfig, is_remote
from ..module.series import SampleSeries

BASE_COLUMNS = ("index", "timestamp_s", "power_db")


@dataclass(frozen=True)
class ColumnSpec:
    """読み込む列の指定

    Attributes
    ----------
    power: str
        受信電力 (dB) の列 (必須)
    timestamp: str | None
        時刻 (秒) の列 (任意)
    origin: str | None
        由来タグの列 (任意)
    regime: str | None
        レジーム番号の列 (任意)
    sample_period: float
        時刻の列がない場合のサンプリング周期
    """

    power: str = "power_db"
    timestamp: str | None = "timestamp_s"
    origin: str | None = "origin"
    regime: str | None = "regime"
    sample_period: float = 2e-3


def _source(path: str | Path, remote_config: RemoteTraceConfig | None, transport=None):
    if is_remote(str(path)):
        text = RemoteTraceClient(remote_config, transport=transport).fetch(str(path))
        return io.StringIO(text)
    return path


def _parse_power(frame: pd.DataFrame, column: str, row_offset: int) -> np.ndarray:
    """電力列を数値化する (非有限値はヘッダを1行目とした行番号つきで拒否する)"""
    raw = frame[column].str.strip()
    values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if len(bad) > 0:
        row = row_offset + int(bad[0]) + 2
        raise DataFormatException(
            f"Row {row}: non-finite or malformed {column} value {raw.iloc[bad[0]]!r}", row=row
        )
    return values


def _check_columns(frame: pd.DataFrame, columns: ColumnSpec) -> None:
    if columns.power not in frame.columns:
        raise DataFormatException(
            f"Required column {columns.power!r} is missing (found {list(frame.columns)})", row=1
        )


def _sample_period(frame: pd.DataFrame, columns: ColumnSpec) -> float:
    if columns.timestamp is None or columns.timestamp not in frame.columns or len(frame) < 2:
        return columns.sample_period
    stamps = pd.to_numeric(frame[columns.timestamp], errors="coerce").to_numpy(dtype=float)
    steps = np.diff(stamps)
    steps = steps[np.isfinite(steps) & (steps > 0)]
    if len(steps) == 0:
        return columns.sample_period
    return float(np.median(steps))


def ingest_csv(
    path: str | Path,
    columns: ColumnSpec | None = None,
    remote_config: RemoteTraceConfig | None = None,
    transport=None,
) -> SampleSeries:
    """CSVファイル (またはhttp(s)のURL) から系列を読み込む

    Parameters
    ----------
    path: str | Path
        ファイルパスまたはURL
    columns: ColumnSpec | None
        列の指定
    remote_config: RemoteTraceConfig | None
        URLの場合の取得設定

    Raises
    ------
    FileNotFoundError
        ファイルが存在しない場合
    DataFormatException
        ファイルが空、必須列がない、または不正な行がある場合
    RemoteTraceException
        URLの取得に失敗した場合
    """
    columns = columns if columns is not None else ColumnSpec()
    try:
        frame = pd.read_csv(
            _source(path, remote_config, transport), dtype=str, keep_default_na=False
        )
    except pd.errors.EmptyDataError as e:
        raise DataFormatException(f"Empty CSV: {path}", row=None) from e
    except pd.errors.ParserError as e:
        raise DataFormatException(f"Malformed CSV {path}: {e}", row=None) from e
    _check_columns(frame, columns)

    values = _parse_power(frame, columns.power, 0)
    origins = None
    if columns.origin is not None and columns.origin in frame.columns:
        origins = frame[columns.origin].str.strip().to_numpy(dtype=object)
    regimes = None
    if columns.regime is not None and columns.regime in frame.columns:
        try:
            regimes = frame[columns.regime].astype(int).to_numpy()
        except ValueError as e:
            raise DataFormatException(f"Malformed {columns.regime} column: {e}") from e

    evtail_logger.debug(f"Ingested {len(values)} samples from {path}")
    return SampleSeries(
        values=values,
        sample_period=_sample_period(frame, columns),
        label=Path(str(path)).stem,
        origins=origins,
        regimes=regimes,
    )


def iter_csv_values(
    path: str | Path,
    columns: ColumnSpec | None = None,
    chunksize: int = 65_536,
) -> Iterator[np.ndarray]:
    """CSVの電力列を一定サイズのチャンクごとに読み出す (メモリ使用量は系列長に依存しない)"""
    columns = columns if columns is not None else ColumnSpec()
    offset = 0
    try:
        reader = pd.read_csv(path, dtype=str, keep_default_na=False, chunksize=chunksize)
        for chunk in reader:
            _check_columns(chunk, columns)
            yield _parse_power(chunk, columns.power, offset)
            offset += len(chunk)
    except pd.errors.EmptyDataError as e:
        raise DataFormatException(f"Empty CSV: {path}", row=None) from e


def series_frame(series: SampleSeries) -> pd.DataFrame:
    data = {
        "index": np.arange(len(series)),
        "timestamp_s": series.timestamps,
        "power_db": series.values,
    }
    if series.origins is not None:
        data["origin"] = series.origins
    if series.regimes is not None:
        data["regime"] = series.regimes
    return pd.DataFrame(data)


def write_csv(path: str | Path, series: SampleSeries) -> None:
    """系列をCSVに書き出す (サンプル0個ならヘッダのみ)"""
    write_table(path, series_frame(series))


def write_table(path: str | Path, table: pd.DataFrame | list[dict], columns=None) -> None:
    """表をUTF-8・LF改行のCSVに書き出す"""
    frame = table if isinstance(table, pd.DataFrame) else pd.DataFrame(table, columns=columns)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
