import logging
import threading
import time
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from src.control.messages import (ControlMessage, Method, MessageKind, parse_message,
                                  render_message)
from src.control.session import SessionEvent, SessionPhase, SessionState, session_transition
from src.media.rtp import RtpPacket, decode_packet, encode_packet, packet_frame_tag, packet_starts_idr
from src.metrics.traces import Stage, TraceStore
from src.network.netem import CONTROL, MEDIA, Address
from src.utils.config import MS, Config, ServerSettings
from src.utils.errors import BadVersion, IllegalTransition, MalformedMessage, TruncatedPacket

logger = logging.getLogger(__name__)

SUPPORTED_METHODS = ", ".join(m.value for m in Method)
# frames remembered for stage probes; a full pre-roll burst must fit
FRAME_INDEX_LIMIT = 2048


@dataclass
class RelayCounters:
    ingested: int = 0
    forwarded: int = 0
    foreign_ssrc: int = 0
    gated: int = 0
    malformed: int = 0
    control_errors: int = 0


@dataclass
class RelayState:
    ingest_ssrcs: Tuple[int, ...]
    session_timeout: int = 2_000 * MS
    stream: str = Config.STREAM_NAME
    sessions: Dict[str, SessionState] = field(default_factory=dict)
    # ssrcs each session has been released for by the IDR gate
    released: Dict[str, Set[int]] = field(default_factory=dict)
    counters: RelayCounters = field(default_factory=RelayCounters)
    next_index: int = 0

    def __post_init__(self):
        # one writer at a time; fan-out reads a snapshot
        self.lock = threading.RLock()

    @property
    def ingest_ssrc(self) -> int:
        return self.ingest_ssrcs[0]

    def awaiting_idr(self, session_id: str, ssrc: Optional[int] = None) -> bool:
        return (ssrc if ssrc is not None else self.ingest_ssrc) not in self.released.get(session_id, ())

    def playing(self) -> List[SessionState]:
        with self.lock:
            return [s for s in self.sessions.values() if s.phase is SessionPhase.PLAYING]

    def _new_id(self, peer: Address, now: int) -> str:
        self.next_index += 1
        digest = zlib.crc32(f"{self.next_index}|{peer[0]}|{peer[1]}|{now}".encode())
        return f"{digest:08X}{self.next_index:04d}"


def _lookup(state: RelayState, req: ControlMessage, peer: Address,
            now: int) -> Tuple[Optional[SessionState], Optional[ControlMessage]]:
    session = state.sessions.get(req.session_id) if req.session_id else None
    if session is None or not session.alive:
        return None, req.reply(454, session_id=req.session_id)
    if session.peer_address != peer[0]:
        # the stale session of a client that changed address is never rebound
        state.sessions[session.id] = session_transition(session, SessionEvent.PEER_ADDRESS_CHANGED)
        logger.info("Session %s killed: peer moved %s -> %s", session.id,
                    session.peer_address, peer[0])
        return None, req.reply(454, session_id=req.session_id)
    return session, None


def handle_control(req: ControlMessage, state: RelayState, peer: Address,
                   now: int) -> ControlMessage:
    """Apply one control request to the session registry and build the response."""
    if not req.is_request:
        raise MalformedMessage("relay only accepts requests")
    with state.lock:
        try:
            return _handle(req, state, peer, now)
        except IllegalTransition as e:
            logger.debug("%s rejected: %s", req.method.value, e)
            return req.reply(455, session_id=req.session_id)


def _handle(req: ControlMessage, state: RelayState, peer: Address, now: int) -> ControlMessage:
    method = req.method
    timeout_ms = int(state.session_timeout // MS)

    if method is Method.OPTIONS:
        return req.reply(200, body=SUPPORTED_METHODS)

    if method is Method.PING:
        if req.session_id is None:
            return req.reply(200, t0=req.t0, t1=now, t2=now)
        session, error = _lookup(state, req, peer, now)
        if error is not None:
            return error
        state.sessions[session.id] = session.touched(now)
        return req.reply(200, session_id=session.id, timeout_ms=timeout_ms,
                         t0=req.t0, t1=now, t2=now)

    if method is Method.SETUP:
        if req.stream != state.stream:
            return req.reply(404)
        if req.transport is None:
            return req.reply(400)
        session = SessionState(state._new_id(peer, now), SessionPhase.INIT, peer[0],
                               req.transport.client_rtp_port, now, state.session_timeout)
        session = session_transition(session, SessionEvent.SETUP_OK)
        state.sessions[session.id] = session
        state.released[session.id] = set()
        logger.info("Session %s created for %s:%d", session.id, peer[0],
                    req.transport.client_rtp_port)
        return req.reply(200, session_id=session.id, timeout_ms=timeout_ms)

    session, error = _lookup(state, req, peer, now)
    if error is not None:
        return error

    if method is Method.PLAY:
        session = session_transition(session, SessionEvent.PLAY_OK).touched(now)
        state.sessions[session.id] = session
        logger.info("Session %s playing", session.id)
        return req.reply(200, session_id=session.id, timeout_ms=timeout_ms)

    # TEARDOWN
    state.sessions[session.id] = session_transition(session, SessionEvent.TEARDOWN)
    logger.info("Session %s torn down", session.id)
    return req.reply(200, session_id=session.id)


def ingest_and_fanout(pkt: RtpPacket, state: RelayState, now: int) -> List[Tuple[str, RtpPacket]]:
    if pkt.ssrc not in state.ingest_ssrcs:
        state.counters.foreign_ssrc += 1
        return []
    state.counters.ingested += 1
    starts_idr = packet_starts_idr(pkt.payload)
    out = []
    with state.lock:
        for session in state.playing():
            released = state.released.setdefault(session.id, set())
            if pkt.ssrc not in released:
                if not starts_idr:
                    state.counters.gated += 1
                    continue
                released.add(pkt.ssrc)
                logger.debug("Session %s released at IDR (ssrc %08x)", session.id, pkt.ssrc)
            out.append((session.id, pkt))
    state.counters.forwarded += len(out)
    return out


def expire_sessions(state: RelayState, now: int) -> List[str]:
    expired = []
    with state.lock:
        for session in list(state.sessions.values()):
            if session.alive and session.expired(now):
                state.sessions[session.id] = session_transition(session, SessionEvent.TIMEOUT)
                expired.append(session.id)
    for session_id in expired:
        logger.info("Session %s expired", session_id)
    return expired


class Relay:
    """Streaming server: control endpoint, RTP ingest and fan-out."""

    def __init__(self, runtime, settings: ServerSettings, ingest_ssrcs: Tuple[int, ...],
                 store: Optional[TraceStore] = None, node: str = "server",
                 stream: str = Config.STREAM_NAME):
        self.runtime = runtime
        self.settings = settings
        self.node = node
        self.store = store
        self.state = RelayState(tuple(ingest_ssrcs), round(settings.session_timeout_ms * MS),
                                stream)
        self.forward_delay = round(settings.forward_delay_ms * MS)
        # per-packet processing time on the host, ns
        self.wall_ns: List[int] = []
        self._frames: "OrderedDict[Tuple[int, int], Tuple[Optional[int], int]]" = OrderedDict()
        self._timer = None
        runtime.bind(node, settings.control_port, self._on_control, CONTROL)
        runtime.bind(node, settings.ingest_port, self._on_rtp, MEDIA)

    @property
    def counters(self) -> RelayCounters:
        return self.state.counters

    def start(self):
        self._timer = self.runtime.call_later(round(self.settings.expire_interval_ms * MS),
                                              self._expire_tick, label="relay-expire")

    def stop(self):
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def _expire_tick(self):
        expire_sessions(self.state, self.runtime.now())
        self.start()

    def _on_control(self, data: bytes, src: Address, now: int):
        try:
            req = parse_message(data)
            reply = handle_control(req, self.state, src, now)
        except MalformedMessage as e:
            self.counters.control_errors += 1
            logger.debug("Malformed control message from %s: %s", src, e)
            reply = ControlMessage(kind=MessageKind.RESPONSE, cseq=0, status=400,
                                   reason="Bad Request")
        self.runtime.send(self.node, self.settings.control_port, src, render_message(reply))

    def _on_rtp(self, data: bytes, src: Address, now: int):
        started = time.perf_counter_ns()
        try:
            pkt = decode_packet(data)
        except (TruncatedPacket, BadVersion) as e:
            self.counters.malformed += 1
            logger.debug("Dropping RTP datagram from %s: %s", src, e)
            return
        fanout = ingest_and_fanout(pkt, self.state, now)
        if pkt.ssrc in self.state.ingest_ssrcs:
            self._probe_in(pkt, now)
        if fanout:
            targets = [self.state.sessions[sid].rtp_destination for sid, _ in fanout]
            wire = encode_packet(pkt)
            self.wall_ns.append(time.perf_counter_ns() - started)
            self.runtime.call_later(self.forward_delay, self._forward, pkt, wire, targets,
                                    label="relay-forward")
        else:
            self.wall_ns.append(time.perf_counter_ns() - started)

    def _forward(self, pkt: RtpPacket, wire: bytes, targets: List[Address]):
        for target in targets:
            self.runtime.send(self.node, self.settings.ingest_port, target, wire)
        if pkt.marker:
            self._probe_out(pkt, self.runtime.now())

    # -- stage probes ----------------------------------------------------------

    def _probe_in(self, pkt: RtpPacket, now: int):
        if self.store is None:
            return
        key = (pkt.ssrc, pkt.rtp_timestamp)
        frame_id, first_in = self._frames.get(key, (None, now))
        if frame_id is None:
            tag = packet_frame_tag(pkt.payload)
            if tag is not None:
                frame_id = tag.frame_id
                if not self.store.has_stage(pkt.ssrc, frame_id, Stage.SERVER_IN):
                    self.store.record_stage(pkt.ssrc, frame_id, Stage.SERVER_IN, first_in)
        self._frames[key] = (frame_id, first_in)
        while len(self._frames) > FRAME_INDEX_LIMIT:
            self._frames.popitem(last=False)

    def _probe_out(self, pkt: RtpPacket, now: int):
        if self.store is None:
            return
        frame_id, _ = self._frames.get((pkt.ssrc, pkt.rtp_timestamp), (None, now))
        if frame_id is None:
            return  # untagged frame: no relay stages
        if not self.store.has_stage(pkt.ssrc, frame_id, Stage.SERVER_OUT):
            self.store.record_stage(pkt.ssrc, frame_id, Stage.SERVER_OUT, now)
