import asyncio
from dataclasses import asdict, dataclass, fields

import httpx

from ..common import evtail_logger
from ..common.exceptions import ConfigException, RemoteTraceException


@dataclass
class RemoteTraceConfig:
    """リモートの測定データ (CSV) を取得する際の設定

    Attributes
    ----------
    request_timeout: float
        タイムアウト (秒)
    attempt_limit: int
        リクエストの試行回数上限
    retry_interval: float
        リクエスト失敗時のリトライ間隔 (秒)
    semaphore_limit: int
        同時リクエスト数の上限
    """

    request_timeout: float = 20
    attempt_limit: int = 3
    retry_interval: float = 5
    semaphore_limit: int = 10

    def __post_init__(self):
        if self.request_timeout <= 0 or self.attempt_limit < 1 or self.semaphore_limit < 1:
            raise ConfigException("Remote trace limits must be positive")
        if self.retry_interval < 0:
            raise ConfigException("retry_interval must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RemoteTraceConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigException(f"Unknown remote config keys: {sorted(unknown)}")
        return cls(**data)


def is_remote(path: str) -> bool:
    return str(path).startswith(("http://", "https://"))


class RemoteTraceClient:
    """測定データのCSVをHTTPで取得するクライアント"""

    def __init__(
        self,
        config: RemoteTraceConfig | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
    ):
        """RemoteTraceClientオブジェクトの初期化

        Parameters
        ----------
        config: RemoteTraceConfig | None
            設定
        transport: httpx.AsyncBaseTransport | None
            差し替え用のトランスポート (テストではhttpx.MockTransportを渡す)
        """
        self.config: RemoteTraceConfig = config if config is not None else RemoteTraceConfig()
        self.transport = transport

    async def _fetch(
        self, client: httpx.AsyncClient, semaphore: asyncio.Semaphore, url: str
    ) -> str:
        retry_count = 0
        while True:
            response = None
            try:
                # Semaphoreで同時実行数制御
                async with semaphore:
                    evtail_logger.debug(f"Trace request: {url}")
                    response = await client.get(url, timeout=self.config.request_timeout)
                    response.raise_for_status()
            except (httpx.HTTPStatusError, httpx.TimeoutException, httpx.TransportError) as e:
                retry_count += 1
                status = response.status_code if response is not None else "timeout"

                # 4xxはリトライしても結果が変わらない
                client_error = response is not None and 400 <= response.status_code < 500
                if client_error or retry_count >= self.config.attempt_limit:
                    evtail_logger.error(f"Trace request failed with {status}: {url}")
                    raise RemoteTraceException(
                        f"Trace request failed with {status}: {url}",
                        response.status_code if response is not None else 999,
                    ) from e

                evtail_logger.warning(f"Trace request returned {status} (retry: {retry_count}) -> {url}")
                await asyncio.sleep(self.config.retry_interval)
                continue
            return response.text

    def fetch_many(self, urls: list[str], return_exceptions: bool = False) -> list[str | Exception]:
        """複数のCSVを並行して取得する

        Parameters
        ----------
        urls: list[str]
            URLのリスト
        return_exceptions: bool
            例外を返すかどうか (True: 返す, False: 例外を送出)

        Returns
        -------
        list[str | Exception]
            本文のリスト (順序はURLのリストと同じ)

        Raises
        ------
        RemoteTraceException
            リトライ上限に達した場合、または4xxが返った場合
        """
        semaphore = asyncio.Semaphore(self.config.semaphore_limit)

        async def _execute():
            async with httpx.AsyncClient(transport=self.transport) as client:
                return await asyncio.gather(
                    *[self._fetch(client, semaphore, url) for url in urls],
                    return_exceptions=return_exceptions,
                )

        return list(asyncio.run(_execute()))

    def fetch(self, url: str) -> str:
        return self.fetch_many([url])[0]
