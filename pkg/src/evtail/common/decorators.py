import time
from functools import wraps

from .logger import logger


def log_elapsed(label: str | None = None):
    """処理時間をログに出力するデコレータ

    学習ステージやCLIコマンドにつけ、所要時間をINFOで記録する
    例外で抜けた場合もWARNINGで所要時間を記録してから再送出する
    """

    def decorator(func):
        name = label if label is not None else func.__name__

        @wraps(func)
        def wrapper(*args, **kwargs):
            started = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception:
                logger.warning(
                    f"{name} aborted after {time.perf_counter() - started:.3f}s"
                )
                raise
            logger.info(f"{name} finished in {time.perf_counter() - started:.3f}s")
            return result

        return wrapper

    return decorator
