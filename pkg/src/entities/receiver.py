import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Union

from src.control.messages import ControlMessage, Method
from src.media.frames import verify_frame_payload
from src.media.rtp import (Depacketizer, FrameAssembly, FrameClock, decode_packet, reassemble,
                           ticks_per_frame)
from src.metrics.traces import Outcome, Stage, StageProbe, TraceStore
from src.network.clock_sync import LocalClock
from src.network.netem import MEDIA, Address
from src.utils.config import (MS, SECOND, NetworkSettings, ReceiverSettings, SenderSettings,
                              ServerSettings)
from src.utils.errors import BadVersion, ConfigError, RecoveryTimeout, TruncatedPacket

from .control_client import ControlClient
from .recovery import (ConnectivityPhase, ConnectivityState, HandshakePolicy, MonitorAction,
                       MonitorConfig, RecoveryRecord, monitor_step, on_address_change,
                       on_probe_result, on_rtp, on_session_established, reconnect)

logger = logging.getLogger(__name__)

MONITOR_TICK = 5 * MS


class PlayoutMode(str, Enum):
    DEADLINE = "deadline"
    # pre-roll history is shown in full, it is old by construction
    REPLAY = "replay"


@dataclass(frozen=True)
class PlayoutPolicy:
    target_latency: int = 150 * MS
    mode: PlayoutMode = PlayoutMode.DEADLINE

    def __post_init__(self):
        if self.target_latency <= 0:
            raise ConfigError("target_latency must be > 0")


@dataclass
class DecoderStubState:
    last_decoded_frame_id: Optional[int] = None
    need_idr: bool = True


@dataclass(frozen=True)
class Display:
    at: int
    outcome = Outcome.DISPLAYED


@dataclass(frozen=True)
class DropLate:
    outcome = Outcome.DROP_LATE


@dataclass(frozen=True)
class DropLoss:
    outcome = Outcome.DROP_LOSS


@dataclass(frozen=True)
class DropNeedIdr:
    outcome = Outcome.DROP_NEED_IDR


PlayoutDecision = Union[Display, DropLate, DropLoss, DropNeedIdr]


def playout_decide(asm: FrameAssembly, capture_ts_sender: int, clock_offset: float, now: int,
                   policy: PlayoutPolicy, dec: DecoderStubState) -> PlayoutDecision:
    """Decide the fate of one emitted frame at receiver-local time ``now``.

    ``capture_ts_sender`` is on the reference timeline and ``clock_offset`` is
    the receiver's estimate of reference minus local time.
    """
    if asm.loss_detected:
        dec.need_idr = True
        return DropLoss()
    if not asm.is_idr and dec.need_idr:
        return DropNeedIdr()
    deadline = now
    if policy.mode is PlayoutMode.DEADLINE:
        deadline = round(capture_ts_sender - clock_offset) + policy.target_latency
        if now > deadline:
            dec.need_idr = True
            return DropLate()
    if not verify_frame_payload(asm.nal_units):
        dec.need_idr = True
        return DropLoss()
    dec.last_decoded_frame_id = asm.frame_id
    if asm.is_idr:
        dec.need_idr = False
    return Display(max(now, deadline))


@dataclass
class ReceiverCounters:
    malformed: int = 0
    foreign_ssrc: int = 0
    stale_frames: int = 0
    keepalive_failures: int = 0


@dataclass
class _Stream:
    ssrc: int
    policy: PlayoutPolicy
    depacketizer: Depacketizer
    probe: StageProbe
    decoder: DecoderStubState = field(default_factory=DecoderStubState)
    last_frame_id: Optional[int] = None
    displayed: List[int] = field(default_factory=list)


class ReceiverPipeline:
    """Viewer side: subscribe, reassemble, play out and recover after handovers."""

    def __init__(self, runtime, settings: ReceiverSettings, server: ServerSettings,
                 sender: SenderSettings, network: NetworkSettings,
                 store: Optional[TraceStore] = None, clock: Optional[LocalClock] = None,
                 node: str = "receiver",
                 outage_truth: Optional[Callable[[int], Optional[int]]] = None):
        self.runtime = runtime
        self.settings = settings
        self.network = network
        self.node = node
        self.clock = clock or LocalClock()
        self.outage_truth = outage_truth
        self.counters = ReceiverCounters()

        frame_clock = FrameClock(sender.rtp_ts_base, ticks_per_frame(sender.fps))
        target = round(settings.target_latency_ms * MS)
        self.live_ssrc = sender.ssrc
        self.streams: Dict[int, _Stream] = {
            ssrc: _Stream(ssrc, PlayoutPolicy(target, mode), Depacketizer(frame_clock),
                          StageProbe(store, ssrc, self.clock, entity="receiver"))
            for ssrc, mode in ((sender.ssrc, PlayoutMode.DEADLINE),
                               (sender.preroll_ssrc, PlayoutMode.REPLAY))
        }

        self.monitor_cfg = MonitorConfig(round(settings.rtp_silence_timeout_ms * MS),
                                         round(settings.ping_interval_ms * MS),
                                         round(settings.recovery_cap_ms * MS))
        self.handshake = HandshakePolicy(round(settings.retry_backoff_ms * MS),
                                         round(settings.request_timeout_ms * MS),
                                         round(settings.recovery_cap_ms * MS))
        self.keepalive_interval = round(settings.keepalive_interval_ms * MS)
        self.connectivity = ConnectivityState()
        self.session_id: Optional[str] = None
        self.sessions_established = 0
        self.records: List[RecoveryRecord] = []
        self._pending_record: Optional[RecoveryRecord] = None
        self._reconnector = None
        self._media_seen = False
        self._running = False
        self._timers = []

        runtime.bind(node, settings.rtp_port, self._on_rtp, MEDIA)
        self.control = ControlClient(runtime, node, settings.control_port,
                                     (server.host, server.control_port), self.clock,
                                     stream=settings.stream)
        runtime.on_address_change(node, self._on_address_change)

    def local_now(self) -> int:
        return self.clock.local(self.runtime.now())

    def stream(self, ssrc: int) -> _Stream:
        return self.streams[ssrc]

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        self._running = True
        self.sync()
        self._reconnector = reconnect(self.control, self.settings.rtp_port, self.handshake,
                                      self.runtime.now(), self._on_first_session)
        self._schedule(self.keepalive_interval, self._keepalive, "receiver-keepalive")
        self._schedule(MONITOR_TICK, self._monitor_tick, "receiver-monitor")

    def stop(self):
        self._running = False
        for timer in self._timers:
            timer.cancel()
        self._timers.clear()
        if self._reconnector is not None:
            self._reconnector.cancel()
        self.control.cancel_all()

    def _schedule(self, delay: int, callback, label: str):
        if self._running:
            self._timers.append(self.runtime.call_later(delay, callback, label=label))
            if len(self._timers) > 64:
                self._timers = self._timers[-8:]

    def sync(self):
        if not self._running:
            return
        self.control.sync_round(self.network.sync_k)
        self._schedule(round(self.network.sync_interval_s * SECOND), self.sync, "receiver-sync")

    def _on_first_session(self, session_id: str, now: int):
        self.session_id = session_id
        self.sessions_established += 1
        self.connectivity = ConnectivityState(last_rtp_rx_ts=self.clock.local(now))
        logger.info("Receiver subscribed, session %s", session_id)

    # -- media path ------------------------------------------------------------

    def _on_rtp(self, data: bytes, src: Address, now: int):
        try:
            pkt = decode_packet(data)
        except (TruncatedPacket, BadVersion) as e:
            self.counters.malformed += 1
            logger.debug("Dropping RTP datagram from %s: %s", src, e)
            return
        stream = self.streams.get(pkt.ssrc)
        if stream is None:
            self.counters.foreign_ssrc += 1
            return
        local = self.clock.local(now)
        self._media_seen = True
        self.connectivity = on_rtp(self.connectivity, local)
        for asm in reassemble(pkt, stream.depacketizer, local):
            self._accept(stream, asm)

    def _accept(self, stream: _Stream, asm: FrameAssembly):
        frame_id = asm.frame_id
        if frame_id is None:
            self.counters.stale_frames += 1
            return
        if stream.last_frame_id is not None:
            if frame_id <= stream.last_frame_id:
                self.counters.stale_frames += 1
                return
            missing = range(stream.last_frame_id + 1, frame_id)
            for lost in missing:
                stream.probe.outcome(lost, Outcome.DROP_LOSS)
            if missing:
                stream.decoder.need_idr = True
                logger.debug("Frames %d..%d never arrived", missing[0], missing[-1])
        stream.last_frame_id = frame_id
        stream.probe.record(frame_id, Stage.RECEIVED, asm.last_arrival_ts)
        self.runtime.call_later(round(self.settings.depayload_delay_ms * MS), self._depayloaded,
                                stream, asm, label="receiver-depayload")

    def _depayloaded(self, stream: _Stream, asm: FrameAssembly):
        stream.probe.record(asm.frame_id, Stage.DEPAYLOAD_DONE, self.local_now())
        self.runtime.call_later(round(self.settings.decode_delay_ms * MS), self._decoded,
                                stream, asm, label="receiver-decode")

    def _decoded(self, stream: _Stream, asm: FrameAssembly):
        now = self.local_now()
        stream.probe.record(asm.frame_id, Stage.DECODE_DONE, now)
        capture = asm.capture_ts
        if capture is None:
            # untagged stream: no capture time travels with the frame
            capture = stream.probe.reference(asm.first_arrival_ts)
        decision = playout_decide(asm, capture, self.clock.estimate, now, stream.policy,
                                  stream.decoder)
        if isinstance(decision, Display):
            # the stub display adds nothing; the frame is shown at decision time
            stream.probe.record(asm.frame_id, Stage.DISPLAY, now)
            stream.displayed.append(asm.frame_id)
            if stream.ssrc == self.live_ssrc:
                self._first_display(asm, now)
        stream.probe.outcome(asm.frame_id, decision.outcome)
        logger.debug("Frame %d of %08x: %s", asm.frame_id, stream.ssrc, decision.outcome.value)

    def _first_display(self, asm: FrameAssembly, now: int):
        record = self._pending_record
        if record is None or record.session_established_ts is None:
            return
        record.first_display_ts = self.clock.to_reference(now)
        record.first_display_idr = asm.is_idr
        self._pending_record = None

    # -- monitoring and recovery -----------------------------------------------

    def _monitor_tick(self):
        if self.session_id is not None and self._media_seen:
            self.connectivity, actions = monitor_step(self.connectivity, self.local_now(),
                                                      self.monitor_cfg)
            self._execute(actions)
        self._schedule(MONITOR_TICK, self._monitor_tick, "receiver-monitor")

    def _execute(self, actions: List[MonitorAction]):
        for action in actions:
            if action is MonitorAction.SEND_PROBE:
                self.control.request(Method.PING, self._on_probe, self.monitor_cfg.ping_interval,
                                     session_id=self.session_id)
            elif action is MonitorAction.START_HANDSHAKE:
                self._start_recovery()
            elif action is MonitorAction.GIVE_UP:
                raise RecoveryTimeout(
                    f"connectivity lost for more than {self.settings.recovery_cap_ms:.0f} ms"
                )

    def _on_probe(self, reply: Optional[ControlMessage], local_now: int):
        if not self._running:
            return
        self.connectivity, actions = on_probe_result(self.connectivity, local_now,
                                                     reply is not None)
        self._execute(actions)

    def _on_address_change(self, old_host: str, new_host: str):
        logger.info("Receiver address changed %s -> %s", old_host, new_host)
        if self.session_id is None or not self._running:
            return
        self.connectivity, actions = on_address_change(self.connectivity, self.local_now())
        self._execute(actions)

    def _start_recovery(self):
        episode_start = self.connectivity.episode_start
        detected = self.clock.to_reference(episode_start)
        outage_start = self.outage_truth(detected) if self.outage_truth else None
        self._pending_record = RecoveryRecord(
            handover_id=len(self.records),
            outage_start_ts=outage_start if outage_start is not None else detected,
            detected_ts=detected,
        )
        logger.info("Connectivity restored; re-establishing session (outage began %.1f ms "
                    "before detection)", (detected - self._pending_record.outage_start_ts) / MS)
        # the cap counts from the first detection of the episode, on the reference clock
        reference_start = self.runtime.now() - (self.local_now() - episode_start)
        self._reconnector = reconnect(self.control, self.settings.rtp_port, self.handshake,
                                      reference_start, self._on_recovered)

    def _on_recovered(self, session_id: str, now: int):
        stale = self.session_id
        self.session_id = session_id
        self.sessions_established += 1
        local = self.clock.local(now)
        self.connectivity = on_session_established(self.connectivity, local)
        for stream in self.streams.values():
            stream.depacketizer.reset()
            stream.decoder.need_idr = True
        record = self._pending_record
        record.session_established_ts = self.clock.to_reference(local)
        self.records.append(record)
        logger.info("Recovered in %.1f ms: session %s replaces %s", record.recovery_ms,
                    session_id, stale)

    def _keepalive(self):
        if self.session_id is not None and self.connectivity.phase in (
                ConnectivityPhase.HEALTHY, ConnectivityPhase.RECOVERED):
            self.control.request(Method.PING, self._on_keepalive, self.handshake.request_timeout,
                                 session_id=self.session_id)
        self._schedule(self.keepalive_interval, self._keepalive, "receiver-keepalive")

    def _on_keepalive(self, reply: Optional[ControlMessage], _local_now: int):
        if reply is None or not reply.ok:
            self.counters.keepalive_failures += 1
            logger.debug("Keepalive failed: %s", "timeout" if reply is None else reply.status)
