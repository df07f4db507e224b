"""Run a :class:`~mixbroker.broker.Broker` on a background event loop thread."""

from __future__ import annotations

import asyncio
import threading
from typing import Any, Callable

from .broker import Broker, BrokerConfig, Tap
from .transport import ListenerKind


class BrokerThread:
    """Context manager that starts a broker in a daemon thread.

    >>> with BrokerThread(config) as bt:          # doctest: +SKIP
    ...     port = bt.port(ListenerKind.PLAIN)
    """

    def __init__(self, config: BrokerConfig, *, tap: Tap | None = None) -> None:
        self.broker = Broker(config, tap=tap)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._run, name="mixbroker", daemon=True)
        self._ready = threading.Event()
        self._error: BaseException | None = None

    def _run(self) -> None:
        asyncio.set_event_loop(self._loop)
        try:
            self._loop.run_until_complete(self.broker.start())
        except BaseException as exc:  # surfaced to the starting thread
            self._error = exc
            self._ready.set()
            return
        self._ready.set()
        self._loop.run_forever()
        self._loop.run_until_complete(self.broker.stop())
        self._loop.close()

    def start(self) -> BrokerThread:
        self._thread.start()
        self._ready.wait()
        if self._error is not None:
            raise self._error
        return self

    def stop(self) -> None:
        if self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._loop.stop)
            self._thread.join(timeout=10)

    def call(self, fn: Callable[[], Any]) -> Any:
        """Run ``fn`` on the broker's loop and return its result."""
        async def wrapper() -> Any:
            return fn()
        return asyncio.run_coroutine_threadsafe(wrapper(), self._loop).result(timeout=10)

    def port(self, kind: ListenerKind) -> int:
        return self.broker.port(kind)

    def __enter__(self) -> BrokerThread:
        return self.start()

    def __exit__(self, *exc_info: object) -> None:
        self.stop()
