import logging
import sys

LOG_FORMAT = "%(asctime)s [%(name)s/%(levelname)s] %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def setup_logger(name: str = "evtail", level: int | str = logging.INFO) -> logging.Logger:
    """パッケージのロガーを用意する

    学習の進捗やCLIの結果はstderrに出し、stdoutは出力データ用に空けておく
    """
    _logger = logging.getLogger(name)
    _logger.setLevel(level)

    # テストなどで再importされても二重に出力しない
    if not _logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        _logger.addHandler(handler)

    return _logger


def set_log_level(level: str) -> None:
    """レベル名 (DEBUG/INFO/WARNING/ERROR) でパッケージロガーのレベルを変える"""
    name = level.upper()
    if name not in LOG_LEVELS:
        raise ValueError(f"Unknown log level {level!r} (choose from {LOG_LEVELS})")
    logger.setLevel(name)


logger = setup_logger()
