import logging
from typing import List, Optional

from src.media.frames import (AnnexBFileSource, EncodedFrame, EncoderConfig, FrameRingBuffer,
                              SyntheticEncoder, ring_push, ring_snapshot)
from src.media.rtp import PacketizerState, RtpPacket, encode_packet, packetize_frame
from src.metrics.traces import Stage, StageProbe, TraceStore
from src.network.clock_sync import LocalClock
from src.network.netem import MEDIA
from src.utils.config import MS, SECOND, NetworkSettings, SenderSettings, ServerSettings

from .control_client import ControlClient

logger = logging.getLogger(__name__)


def sender_tick(now: int, encoder, packetizer: PacketizerState, probe: StageProbe,
                ring: FrameRingBuffer, fps: float, encode_delay: int = 0,
                payload_delay: int = 0) -> List[RtpPacket]:
    """Capture, encode and packetize one frame at local time ``now``.

    Stage timestamps follow the configured stub delays; the packets are due on
    the wire at ``now + encode_delay + payload_delay``.
    """
    frame: EncodedFrame = encoder.next_frame(probe.reference(now))
    ring_push(ring, frame)
    packets = packetize_frame(frame, packetizer, fps)

    encode_done = now + encode_delay
    payload_done = encode_done + payload_delay
    probe.record(frame.frame_id, Stage.CAPTURE, now)
    probe.record(frame.frame_id, Stage.ENCODE_DONE, encode_done)
    probe.record(frame.frame_id, Stage.PAYLOAD_DONE, payload_done)
    probe.record(frame.frame_id, Stage.SENT, payload_done)
    logger.debug("Frame %d (%s, %d B) -> %d packets", frame.frame_id, frame.kind.value,
                 frame.size, len(packets))
    return packets


def send_preroll(buffer: FrameRingBuffer, packetizer: PacketizerState,
                 fps: float) -> List[RtpPacket]:
    """Packetize the buffered history on the pre-roll stream, oldest first."""
    packets = []
    for frame in ring_snapshot(buffer):
        packets.extend(packetize_frame(frame, packetizer, fps))
    return packets


class SenderPipeline:
    """Camera side: periodic capture to RTP, pre-roll on request, clock sync."""

    def __init__(self, runtime, settings: SenderSettings, server: ServerSettings,
                 network: NetworkSettings, store: Optional[TraceStore] = None,
                 clock: Optional[LocalClock] = None, node: str = "sender"):
        self.runtime = runtime
        self.settings = settings
        self.network = network
        self.node = node
        self.clock = clock or LocalClock()
        self.ingest = (server.host, server.ingest_port)

        if settings.source_file:
            self.encoder = AnnexBFileSource(settings.source_file)
        else:
            self.encoder = SyntheticEncoder(EncoderConfig(
                fps=settings.fps, gop_length=settings.gop_length, idr_size=settings.idr_size,
                p_size=settings.p_size, seed=settings.seed,
            ))
        self.packetizer = PacketizerState(settings.ssrc, rtp_ts_base=settings.rtp_ts_base,
                                          max_payload=settings.max_payload,
                                          payload_type=settings.payload_type)
        self.preroll_packetizer = PacketizerState(settings.preroll_ssrc,
                                                  rtp_ts_base=settings.rtp_ts_base,
                                                  max_payload=settings.max_payload,
                                                  payload_type=settings.payload_type)
        self.ring = FrameRingBuffer(round(settings.ring_seconds * SECOND))
        self.probe = StageProbe(store, settings.ssrc, self.clock, entity="sender")
        self.preroll_probe = StageProbe(store, settings.preroll_ssrc, self.clock,
                                        entity="sender")

        self.encode_delay = round(settings.encode_delay_ms * MS)
        self.payload_delay = round(settings.payload_delay_ms * MS)
        self.interval = SECOND / settings.fps
        self.frames_sent = 0
        self.preroll_frames = 0
        self._started_at: Optional[int] = None
        self._tick_index = 0
        self._timers = []
        self._running = False

        runtime.bind(node, settings.rtp_port, self._ignore, MEDIA)
        self.control = ControlClient(runtime, node, settings.control_port,
                                     (server.host, server.control_port), self.clock)

    @staticmethod
    def _ignore(data: bytes, src, now: int):
        pass

    def start(self):
        self._running = True
        self.sync()
        media_start = self.runtime.now() + round(self.settings.start_at_ms * MS)
        self._started_at = media_start
        self._timers.append(self.runtime.call_at(media_start, self._tick, label="sender-tick"))
        if self.settings.preroll_at_s is not None:
            self._timers.append(self.runtime.call_at(
                media_start + round(self.settings.preroll_at_s * SECOND),
                self.request_remote_drive, label="remote-drive",
            ))
        logger.info("Sender streaming ssrc %08x at %.1f fps to %s:%d", self.settings.ssrc,
                    self.settings.fps, *self.ingest)

    def stop(self):
        self._running = False
        for timer in self._timers:
            timer.cancel()
        self._timers.clear()
        self.control.cancel_all()

    def sync(self):
        if not self._running:
            return
        self.control.sync_round(self.network.sync_k)
        self._timers.append(self.runtime.call_later(round(self.network.sync_interval_s * SECOND),
                                                    self.sync, label="sender-sync"))

    def _tick(self):
        if not self._running:
            return
        local = self.clock.local(self.runtime.now())
        packets = sender_tick(local, self.encoder, self.packetizer, self.probe, self.ring,
                              self.settings.fps, self.encode_delay, self.payload_delay)
        self.runtime.call_later(self.encode_delay + self.payload_delay, self._send, packets,
                                label="sender-send")
        self._tick_index += 1
        # frame k is captured at start + k / fps, without accumulating rounding
        next_at = self._started_at + round(self._tick_index * self.interval)
        self._timers.append(self.runtime.call_at(next_at, self._tick, label="sender-tick"))
        if len(self._timers) > 64:
            self._timers = self._timers[-8:]

    def _send(self, packets: List[RtpPacket]):
        for pkt in packets:
            self.runtime.send(self.node, self.settings.rtp_port, self.ingest, encode_packet(pkt))
        self.frames_sent += 1

    def request_remote_drive(self) -> int:
        """Send the buffered last seconds on the pre-roll stream; returns the frame count."""
        if self.preroll_frames:
            logger.warning("Pre-roll already sent (%d frames); ignoring request",
                           self.preroll_frames)
            return 0
        frames = ring_snapshot(self.ring)
        packets = send_preroll(self.ring, self.preroll_packetizer, self.settings.fps)
        local = self.clock.local(self.runtime.now())
        for frame in frames:
            self.preroll_probe.record(frame.frame_id, Stage.CAPTURE,
                                      round(frame.capture_ts - self.clock.estimate))
            self.preroll_probe.record(frame.frame_id, Stage.SENT, local)
        for pkt in packets:
            self.runtime.send(self.node, self.settings.rtp_port, self.ingest, encode_packet(pkt))
        self.preroll_frames = len(frames)
        span = (frames[-1].capture_ts - frames[0].capture_ts) / SECOND
        logger.info("Remote-drive request: sent %d pre-roll frames (%.2f s) as %d packets",
                    len(frames), span, len(packets))
        return len(frames)
