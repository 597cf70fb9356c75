import itertools
import logging
from typing import Callable, Dict, Optional, Tuple

from src.control.messages import ControlMessage, Method, parse_message, render_message
from src.network.clock_sync import LocalClock, SyncSample
from src.network.netem import CONTROL, Address
from src.utils.config import MS
from src.utils.errors import MalformedMessage

logger = logging.getLogger(__name__)

# callback(response or None on timeout, local receive time)
ReplyCallback = Callable[[Optional[ControlMessage], int], None]


class ControlClient:
    """Request/response client of the control protocol over one datagram port."""

    def __init__(self, runtime, node: str, port: int, server: Address, clock: LocalClock,
                 stream: str = "cam"):
        self.runtime = runtime
        self.node = node
        self.port = port
        self.server = server
        self.clock = clock
        self.stream = stream
        self._cseq = itertools.count(1)
        self._pending: Dict[int, Tuple[ReplyCallback, object]] = {}
        runtime.bind(node, port, self._on_datagram, CONTROL)

    def local_now(self) -> int:
        return self.clock.local(self.runtime.now())

    def request(self, method: Method, callback: ReplyCallback, timeout: int, **fields) -> int:
        cseq = next(self._cseq)
        msg = ControlMessage.request(method, cseq, stream=self.stream, **fields)
        timer = self.runtime.call_later(timeout, self._expire, cseq, label="ctrl-timeout")
        self._pending[cseq] = (callback, timer)
        logger.debug("-> %s cseq=%d session=%s", method.value, cseq, fields.get("session_id"))
        self.runtime.send(self.node, self.port, self.server, render_message(msg))
        return cseq

    def cancel_all(self):
        for _, timer in self._pending.values():
            timer.cancel()
        self._pending.clear()

    def _expire(self, cseq: int):
        entry = self._pending.pop(cseq, None)
        if entry is not None:
            entry[0](None, self.local_now())

    def _on_datagram(self, data: bytes, src: Address, now: int):
        try:
            msg = parse_message(data)
        except MalformedMessage as e:
            logger.debug("Dropping malformed control datagram from %s: %s", src, e)
            return
        if msg.is_request:
            return
        entry = self._pending.pop(msg.cseq, None)
        if entry is None:
            return  # reply to a request that already timed out
        callback, timer = entry
        timer.cancel()
        callback(msg, self.clock.local(now))

    # -- clock sync ------------------------------------------------------------

    def sync_round(self, k: int, on_done: Optional[Callable[[], None]] = None,
                   spacing: int = 10 * MS, timeout: int = 500 * MS):
        """Send ``k`` timestamped PINGs and feed every answer into the clock."""
        remaining = [k]

        def answered(msg: Optional[ControlMessage], t3: int):
            if msg is not None and msg.ok and None not in (msg.t0, msg.t1, msg.t2):
                self.clock.add_sample(SyncSample(msg.t0, msg.t1, msg.t2, t3), k=k,
                                      at=self.runtime.now())
            remaining[0] -= 1
            if remaining[0] == 0 and on_done is not None:
                on_done()

        def probe():
            self.request(Method.PING, answered, timeout, t0=self.local_now())

        for index in range(k):
            self.runtime.call_later(index * spacing, probe, label="sync-ping")
