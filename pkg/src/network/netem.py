"""Deterministic network emulator.

Every datagram between entities goes through :class:`Netem`, which decides
loss and delivery time per path and replays scripted handovers (an outage
window followed by an address change of the affected node). In virtual mode
the emulator is also the event loop: entities schedule their timers on it and
:meth:`Netem.step_virtual` fires everything in timestamp order.
"""

import heapq
import itertools
import logging
import time
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.config import MS
from src.utils.errors import ScenarioError, UnknownAddress

logger = logging.getLogger(__name__)

Address = Tuple[str, int]
Handler = Callable[[bytes, Address, int], None]

MEDIA = "media"
CONTROL = "control"


@dataclass(frozen=True)
class NetworkProfile:
    one_way_delay: int
    jitter_stddev: int = 0
    loss_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ScenarioError(f"loss_rate {self.loss_rate} outside [0, 1]")
        if self.one_way_delay < 0 or self.jitter_stddev < 0:
            raise ScenarioError("delay and jitter must be >= 0")

    @classmethod
    def from_ms(cls, one_way_ms: float, jitter_ms: float = 0.0, loss_rate: float = 0.0,
                seed: int = 0) -> "NetworkProfile":
        return cls(round(one_way_ms * MS), round(jitter_ms * MS), loss_rate, seed)


# per-hop targets: sender->server->receiver sums to ~50 ms (fog); lte adds
# ~25 ms end to end on top of that
PROFILES = {
    "fog": NetworkProfile.from_ms(25.0, 1.0, 0.0),
    "lte": NetworkProfile.from_ms(37.5, 8.0, 0.0005),
    "control": NetworkProfile.from_ms(3.0, 0.0, 0.0),
}


@dataclass(frozen=True)
class HandoverEvent:
    at: int
    outage_duration: int
    new_address: str
    node: str = "receiver"

    @property
    def end(self) -> int:
        return self.at + self.outage_duration


def validate_schedule(events: Sequence[HandoverEvent]) -> List[HandoverEvent]:
    events = list(events)
    for prev, cur in zip(events, events[1:]):
        if cur.at < prev.at:
            raise ScenarioError("handover events must be time-ordered")
        if cur.node == prev.node and cur.at < prev.end:
            raise ScenarioError(
                f"handover at {cur.at} overlaps the outage [{prev.at}, {prev.end})"
            )
    for ev in events:
        if ev.outage_duration < 0:
            raise ScenarioError("outage_duration must be >= 0")
    return events


class TimeMode(str, Enum):
    WALL = "wall"
    VIRTUAL = "virtual"


class TimeSource:
    def __init__(self, mode: TimeMode = TimeMode.VIRTUAL, start: int = 0):
        self.mode = TimeMode(mode)
        self._now = start
        self._epoch = time.monotonic_ns() - start

    def now(self) -> int:
        if self.mode is TimeMode.WALL:
            self._now = max(self._now, time.monotonic_ns() - self._epoch)
        return self._now

    def advance_to(self, at: int):
        if self.mode is not TimeMode.VIRTUAL:
            raise ScenarioError("only virtual time can be stepped")
        if at < self._now:
            raise ScenarioError(f"time cannot move backwards ({self._now} -> {at})")
        self._now = at


@dataclass(order=True)
class _Scheduled:
    at: int
    order: int
    callback: Callable = field(compare=False)
    args: tuple = field(compare=False, default=())
    label: str = field(compare=False, default="")
    cancelled: bool = field(compare=False, default=False)

    def cancel(self):
        self.cancelled = True


@dataclass(frozen=True)
class FiredEvent:
    at: int
    label: str


@dataclass(frozen=True)
class TraceRecord:
    sent_at: int
    src: Address
    dst: Address
    size: int
    fate: str
    deliver_at: Optional[int]


@dataclass
class _Endpoint:
    node: str
    port: int
    handler: Handler
    channel: str


class Netem:
    def __init__(self, seed: int = 0, time_source: Optional[TimeSource] = None,
                 default_profiles: Optional[Dict[str, NetworkProfile]] = None,
                 keep_trace: bool = True):
        self.seed = seed
        self.time = time_source or TimeSource()
        self.default_profiles = {MEDIA: PROFILES["fog"], CONTROL: PROFILES["control"]}
        self.default_profiles.update(default_profiles or {})
        self.keep_trace = keep_trace
        self.trace: List[TraceRecord] = []
        self.handover_log: List[Tuple[int, HandoverEvent, str]] = []

        self._queue: List[_Scheduled] = []
        self._order = itertools.count()
        self._node_host: Dict[str, str] = {}
        self._host_node: Dict[str, str] = {}
        self._retired: Dict[str, str] = {}
        self._endpoints: Dict[Tuple[str, int], _Endpoint] = {}
        self._paths: Dict[Tuple[str, str, str], NetworkProfile] = {}
        self._rngs: Dict[tuple, np.random.Generator] = {}
        self._bursts: Dict[tuple, Tuple[int, int]] = {}
        self._outages: Dict[str, List[Tuple[int, int]]] = {}
        self._listeners: Dict[str, List[Callable[[str, str], None]]] = {}
        self._handovers: List[HandoverEvent] = []

    # -- clock & scheduling ------------------------------------------------

    def now(self) -> int:
        return self.time.now()

    def call_at(self, at: int, callback: Callable, *args, label: str = "") -> _Scheduled:
        item = _Scheduled(max(at, self.now()), next(self._order), callback, args, label)
        heapq.heappush(self._queue, item)
        return item

    def call_later(self, delay: int, callback: Callable, *args, label: str = "") -> _Scheduled:
        return self.call_at(self.now() + delay, callback, *args, label=label)

    def step_virtual(self, until: int) -> List[FiredEvent]:
        """Fire every scheduled item with ``at <= until`` in timestamp order."""
        fired = []
        while self._queue and self._queue[0].at <= until:
            item = heapq.heappop(self._queue)
            if item.cancelled:
                continue
            self.time.advance_to(item.at)
            item.callback(*item.args)
            fired.append(FiredEvent(item.at, item.label))
        if until > self.time.now():
            self.time.advance_to(until)
        return fired

    def pending(self) -> int:
        return sum(1 for item in self._queue if not item.cancelled)

    # -- registry ------------------------------------------------------------

    def add_node(self, node: str, host: Optional[str] = None):
        host = host or node
        self._node_host[node] = host
        self._host_node[host] = node

    def host_of(self, node: str) -> str:
        return self._node_host[node]

    def bind(self, node: str, port: int, handler: Handler, channel: str = MEDIA):
        if node not in self._node_host:
            self.add_node(node)
        self._endpoints[(node, port)] = _Endpoint(node, port, handler, channel)

    def set_path(self, src_node: str, dst_node: str, profile: NetworkProfile,
                 channel: str = MEDIA, symmetric: bool = False):
        self._paths[(src_node, dst_node, channel)] = profile
        if symmetric:
            self._paths[(dst_node, src_node, channel)] = profile

    def on_address_change(self, node: str, callback: Callable[[str, str], None]):
        self._listeners.setdefault(node, []).append(callback)

    def _node_for_host(self, host: str) -> Optional[str]:
        node = self._host_node.get(host)
        if node is not None and self._node_host.get(node) == host:
            return node
        return None

    def _resolve_profile(self, src_node: str, dst_node: str, channel: str) -> NetworkProfile:
        return self._paths.get((src_node, dst_node, channel), self.default_profiles[channel])

    # -- datagrams -----------------------------------------------------------

    def in_outage(self, node: str, at: int) -> bool:
        return any(start <= at < end for start, end in self._outages.get(node, ()))

    def _path_rng(self, key: tuple, profile: NetworkProfile) -> np.random.Generator:
        rng = self._rngs.get(key)
        if rng is None:
            salt = zlib.crc32("|".join(map(str, key)).encode())
            rng = np.random.default_rng([self.seed & 0xFFFFFFFF, profile.seed & 0xFFFFFFFF, salt])
            self._rngs[key] = rng
        return rng

    def transmit(self, datagram: bytes, src: Address, dst: Address,
                 profile: NetworkProfile, now: int) -> Optional[int]:
        """Decide the fate of one datagram: delivery time, or None when dropped."""
        if dst[0] not in self._host_node:
            raise UnknownAddress(f"destination {dst} was never registered")
        src_node = self._host_node.get(src[0], src[0])
        dst_node = self._host_node[dst[0]]
        key = (src_node, dst_node, src[0], dst[0])
        rng = self._path_rng(key, profile)

        lost = rng.random() < profile.loss_rate
        if self._node_for_host(dst[0]) is None:
            return None  # retired address: black hole
        if self.in_outage(dst_node, now) or self.in_outage(src_node, now):
            return None
        if lost:
            return None

        jitter = 0
        if profile.jitter_stddev > 0:
            # datagrams handed to one path at one instant share a queueing state
            burst = self._bursts.get(key)
            if burst is not None and burst[0] == now:
                jitter = burst[1]
            else:
                jitter = int(round(rng.normal(0.0, profile.jitter_stddev)))
                self._bursts[key] = (now, jitter)
        return now + max(0, profile.one_way_delay + jitter)

    def send(self, src_node: str, src_port: int, dst: Address, datagram: bytes):
        now = self.now()
        src = (self._node_host[src_node], src_port)
        dst_endpoint_node = self._host_node.get(dst[0])
        endpoint = self._endpoints.get((dst_endpoint_node, dst[1])) if dst_endpoint_node else None
        source_endpoint = self._endpoints.get((src_node, src_port))
        channel = (endpoint or source_endpoint).channel if (endpoint or source_endpoint) else MEDIA
        profile = self._resolve_profile(src_node, dst_endpoint_node or dst[0], channel)

        deliver_at = self.transmit(datagram, src, dst, profile, now)
        if deliver_at is None:
            self._record(now, src, dst, datagram, "dropped", None)
            return
        self.call_at(deliver_at, self._deliver, src, dst, datagram, now, label="deliver")

    def _deliver(self, src: Address, dst: Address, datagram: bytes, sent_at: int):
        now = self.now()
        node = self._node_for_host(dst[0])
        if node is None or self.in_outage(node, now):
            self._record(sent_at, src, dst, datagram, "dropped", None)
            return
        endpoint = self._endpoints.get((node, dst[1]))
        if endpoint is None:
            self._record(sent_at, src, dst, datagram, "unbound", None)
            return
        self._record(sent_at, src, dst, datagram, "delivered", now)
        endpoint.handler(datagram, src, now)

    def _record(self, sent_at, src, dst, datagram, fate, deliver_at):
        if self.keep_trace:
            self.trace.append(TraceRecord(sent_at, src, dst, len(datagram), fate, deliver_at))

    # -- handovers -----------------------------------------------------------

    def schedule_handovers(self, events: Sequence[HandoverEvent]):
        events = list(events)
        validate_schedule(self._handovers + events)
        for ev in events:
            self.call_at(ev.at, self.apply_handover, ev,
                         label=f"handover-{len(self._handovers)}")
            self._handovers.append(ev)

    def apply_handover(self, ev: HandoverEvent):
        """Start the outage of ``ev.node`` now and rebind it at the window's end."""
        if ev.node not in self._node_host:
            raise UnknownAddress(f"handover for unknown node {ev.node!r}")
        old_host = self._node_host[ev.node]
        self._outages.setdefault(ev.node, []).append((ev.at, ev.end))
        self.handover_log.append((ev.at, ev, old_host))
        logger.info("Handover of %s: outage %.1f ms, %s -> %s", ev.node,
                    ev.outage_duration / MS, old_host, ev.new_address)
        self.call_at(ev.end, self._finish_handover, ev, old_host, label="handover-end")

    def _finish_handover(self, ev: HandoverEvent, old_host: str):
        self._retired[old_host] = ev.node
        self._node_host[ev.node] = ev.new_address
        self._host_node[ev.new_address] = ev.node
        for callback in self._listeners.get(ev.node, []):
            callback(old_host, ev.new_address)

    def outage_starts(self) -> List[int]:
        return [at for at, _, _ in self.handover_log]
