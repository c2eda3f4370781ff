"""チェックポイント・レポートのJSON入出力"""

import json
from pathlib import Path
from typing import Any

from ..common.exceptions import ConfigException, DataFormatException

CHECKPOINT_FORMAT = "evtail-checkpoint"
CHECKPOINT_VERSION = 1


def dumps(data: Any) -> str:
    """キー順を固定したJSON文字列 (同じ内容なら同じバイト列になる)"""
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: str | Path, data: Any) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(data))


def read_json(path: str | Path) -> Any:
    """JSONファイルを読み込む

    Raises
    ------
    ConfigException
        JSONとして解釈できない場合 (行・列を含める)
    """
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigException(
            f"Malformed JSON in {path} at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e


def write_checkpoint(path: str | Path, kind: str, payload: dict) -> None:
    write_json(
        path,
        {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": kind, "payload": payload},
    )


def read_checkpoint(path: str | Path, kind: str) -> dict:
    """チェックポイントを読み込み、形式と種類を検査する"""
    data = read_json(path)
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatException(f"{path} is not an evtail checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise DataFormatException(f"Unsupported checkpoint version {data.get('version')} in {path}")
    if data.get("kind") != kind:
        raise DataFormatException(f"{path} holds a {data.get('kind')!r} checkpoint, expected {kind!r}")
    return data["payload"]
