"""Wall-clock runtime over real UDP sockets.

Exposes the scheduling and datagram surface of :class:`src.network.netem.Netem`
(``now``, ``call_at``, ``call_later``, ``bind``, ``send``, ``host_of``,
``on_address_change``) so the same entity code runs in a role process.
"""

import asyncio
import logging
import signal
import time
from typing import Callable, Dict, List, Optional, Tuple

from src.utils.config import SECOND
from src.utils.errors import ConfigError, StreamError

from .netem import MEDIA, Address, Handler

logger = logging.getLogger(__name__)


class _UdpEndpoint(asyncio.DatagramProtocol):
    def __init__(self, runtime: "AsyncioRuntime", handler: Handler):
        self.runtime = runtime
        self.handler = handler
        self.transport = None

    def connection_made(self, transport):
        self.transport = transport

    def datagram_received(self, data, addr):
        try:
            self.handler(data, (addr[0], addr[1]), self.runtime.now())
        except StreamError as e:
            self.runtime.fail(e)
        except Exception:
            logger.exception("Datagram handler failed for packet from %s", addr)

    def error_received(self, exc):
        logger.debug("UDP error: %s", exc)


class AsyncioRuntime:
    def __init__(self, bind_address: str = "0.0.0.0"):
        self.bind_address = bind_address
        self.loop: Optional[asyncio.AbstractEventLoop] = None
        self._epoch = time.monotonic_ns()
        self._node_host: Dict[str, str] = {}
        self._binds: List[Tuple[str, int, Handler]] = []
        self._endpoints: Dict[Tuple[str, int], _UdpEndpoint] = {}
        self._stop: Optional[asyncio.Event] = None
        self._failure: Optional[BaseException] = None

    def now(self) -> int:
        return time.monotonic_ns() - self._epoch

    def call_at(self, at: int, callback: Callable, *args, label: str = ""):
        return self.call_later(at - self.now(), callback, *args, label=label)

    def call_later(self, delay: int, callback: Callable, *args, label: str = ""):
        return self.loop.call_later(max(0, delay) / SECOND, callback, *args)

    def add_node(self, node: str, host: Optional[str] = None):
        self._node_host[node] = host or node

    def host_of(self, node: str) -> str:
        return self._node_host[node]

    def bind(self, node: str, port: int, handler: Handler, channel: str = MEDIA):
        self._node_host.setdefault(node, node)
        self._binds.append((node, port, handler))

    def on_address_change(self, node: str, callback: Callable[[str, str], None]):
        # sockets report no address change; recovery starts from RTP silence instead
        logger.debug("Address changes of %s are not observable over UDP", node)

    def send(self, node: str, port: int, dst: Address, datagram: bytes):
        endpoint = self._endpoints.get((node, port))
        if endpoint is None or endpoint.transport is None:
            logger.debug("Send on unbound port %s:%d dropped", node, port)
            return
        endpoint.transport.sendto(datagram, dst)

    async def _open_endpoints(self):
        for node, port, handler in self._binds:
            if (node, port) in self._endpoints:
                continue
            try:
                _, protocol = await self.loop.create_datagram_endpoint(
                    lambda h=handler: _UdpEndpoint(self, h),
                    local_addr=(self.bind_address, port),
                )
            except OSError as e:
                raise ConfigError(f"cannot bind UDP port {port}: {e}") from e
            self._endpoints[(node, port)] = protocol
            logger.info("Listening on %s:%d (%s)", self.bind_address, port, node)

    def fail(self, exc: StreamError):
        self._failure = exc
        self.stop()

    def _on_loop_error(self, loop, context):
        exc = context.get("exception")
        if isinstance(exc, StreamError):
            # entity failures raised from timers end the role
            self.fail(exc)
        else:
            loop.default_exception_handler(context)

    def stop(self):
        if self._stop is not None:
            self._stop.set()

    async def serve(self, on_start: Callable[[], None], duration: Optional[int] = None):
        """Open every port bound so far, call ``on_start`` and run until stopped."""
        self.loop = asyncio.get_running_loop()
        self._stop = asyncio.Event()
        self.loop.set_exception_handler(self._on_loop_error)
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                self.loop.add_signal_handler(sig, self._stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        await self._open_endpoints()
        on_start()
        try:
            if duration is None:
                await self._stop.wait()
            else:
                await asyncio.wait_for(self._stop.wait(), timeout=duration / SECOND)
        except asyncio.TimeoutError:
            pass
        finally:
            for endpoint in self._endpoints.values():
                if endpoint.transport is not None:
                    endpoint.transport.close()
            self._endpoints.clear()
        if self._failure is not None:
            raise self._failure
