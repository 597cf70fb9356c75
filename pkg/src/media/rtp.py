"""RTP wire codec and H.264-style payloading (single NAL unit and FU-A)."""

import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from src.media.frames import EncodedFrame, NalUnit, NAL_TYPE_IDR, FrameTag, read_frame_tag
from src.utils.config import Config
from src.utils.errors import BadVersion, ConfigError, MalformedBitstream, TruncatedPacket

logger = logging.getLogger(__name__)

RTP_VERSION = 2
HEADER_SIZE = 12
HEADER_FORMAT = ">BBHII"
DEFAULT_PAYLOAD_TYPE = 96
DEFAULT_MAX_PAYLOAD = 1200

FU_A = 28
FU_START = 0x80
FU_END = 0x40

SEQ_MOD = 1 << 16
# sequence numbers remembered after their frame left, to tell duplicates from late packets
RECENT_SEQS = 4096
TS_MOD = 1 << 32


def seq_diff(a: int, b: int) -> int:
    """Signed distance a - b in 16-bit serial-number arithmetic."""
    return ((a - b + 0x8000) & 0xFFFF) - 0x8000


@dataclass(frozen=True)
class RtpPacket:
    seq: int
    rtp_timestamp: int
    ssrc: int
    payload: bytes = b""
    marker: bool = False
    payload_type: int = DEFAULT_PAYLOAD_TYPE
    version: int = RTP_VERSION


def encode_packet(pkt: RtpPacket) -> bytes:
    header = struct.pack(
        HEADER_FORMAT,
        (pkt.version & 0x03) << 6,
        (0x80 if pkt.marker else 0) | (pkt.payload_type & 0x7F),
        pkt.seq & 0xFFFF,
        pkt.rtp_timestamp & 0xFFFFFFFF,
        pkt.ssrc & 0xFFFFFFFF,
    )
    return header + pkt.payload


def decode_packet(data: bytes) -> RtpPacket:
    if len(data) < HEADER_SIZE:
        raise TruncatedPacket(f"RTP packet of {len(data)} bytes is shorter than the header")
    b0, b1, seq, timestamp, ssrc = struct.unpack_from(HEADER_FORMAT, data)
    version = b0 >> 6
    if version != RTP_VERSION:
        raise BadVersion(f"RTP version {version}")
    return RtpPacket(
        seq=seq,
        rtp_timestamp=timestamp,
        ssrc=ssrc,
        payload=bytes(data[HEADER_SIZE:]),
        marker=bool(b1 & 0x80),
        payload_type=b1 & 0x7F,
        version=version,
    )


def packet_starts_idr(payload: bytes) -> bool:
    """True when the payload is the first piece of an IDR NAL unit."""
    if not payload:
        return False
    nal_type = payload[0] & 0x1F
    if nal_type == NAL_TYPE_IDR:
        return True
    if nal_type == FU_A and len(payload) >= 2:
        return bool(payload[1] & FU_START) and (payload[1] & 0x1F) == NAL_TYPE_IDR
    return False


def _nal_start_payload(payload: bytes) -> Optional[bytes]:
    """NAL payload bytes carried by a packet that begins a NAL unit, else None."""
    if not payload:
        return None
    nal_type = payload[0] & 0x1F
    if nal_type == FU_A:
        if len(payload) >= 2 and payload[1] & FU_START:
            return payload[2:]
        return None
    if 1 <= nal_type <= 23:
        return payload[1:]
    return None


def packet_frame_tag(payload: bytes) -> Optional[FrameTag]:
    return read_frame_tag(_nal_start_payload(payload) or b"")


@dataclass
class PacketizerState:
    ssrc: int
    next_seq: int = 0
    rtp_ts_base: int = 0
    max_payload: int = DEFAULT_MAX_PAYLOAD
    payload_type: int = DEFAULT_PAYLOAD_TYPE

    def __post_init__(self):
        if self.max_payload < 3:
            raise ConfigError("max_payload must be >= 3")
        self.next_seq &= 0xFFFF

    def take_seq(self) -> int:
        seq = self.next_seq
        self.next_seq = (seq + 1) & 0xFFFF
        return seq


def ticks_per_frame(fps: float) -> int:
    return round(Config.RTP_CLOCK_RATE / fps)


def _payloads_for(nal: NalUnit, max_payload: int) -> List[bytes]:
    data = nal.to_bytes()
    if len(data) <= max_payload:
        return [data]
    indicator = (nal.header_byte & 0x60) | FU_A
    chunk = max_payload - 2
    body = nal.payload
    fragments = []
    for offset in range(0, len(body), chunk):
        flags = 0
        if offset == 0:
            flags |= FU_START
        if offset + chunk >= len(body):
            flags |= FU_END
        fragments.append(bytes([indicator, flags | nal.nal_unit_type]) + body[offset:offset + chunk])
    return fragments


def packetize_frame(frame: EncodedFrame, state: PacketizerState, fps: float) -> List[RtpPacket]:
    timestamp = (state.rtp_ts_base + frame.frame_id * ticks_per_frame(fps)) % TS_MOD
    payloads = [p for nal in frame.nal_units for p in _payloads_for(nal, state.max_payload)]
    last = len(payloads) - 1
    return [
        RtpPacket(
            seq=state.take_seq(),
            rtp_timestamp=timestamp,
            ssrc=state.ssrc,
            payload=payload,
            marker=index == last,
            payload_type=state.payload_type,
        )
        for index, payload in enumerate(payloads)
    ]


@dataclass(frozen=True)
class FrameClock:
    """Maps RTP timestamps back to frame ids for streams without frame tags."""
    rtp_ts_base: int
    ticks: int

    def frame_id(self, rtp_timestamp: int) -> int:
        return ((rtp_timestamp - self.rtp_ts_base) % TS_MOD) // self.ticks


@dataclass
class FrameAssembly:
    ssrc: int
    rtp_timestamp: int
    frame_id: Optional[int]
    capture_ts: Optional[int]
    nal_units: Tuple[NalUnit, ...]
    complete: bool
    loss_detected: bool
    first_arrival_ts: int
    last_arrival_ts: int
    packet_count: int

    @property
    def is_idr(self) -> bool:
        return bool(self.nal_units) and self.nal_units[0].nal_unit_type == NAL_TYPE_IDR


@dataclass
class DepacketizerCounters:
    duplicates: int = 0
    late_packets: int = 0
    frames_complete: int = 0
    frames_lost: int = 0


class Depacketizer:
    """Reorders packets of one stream and emits frames in sequence order.

    A frame is emitted complete once its marker packet and every packet from the
    frame start up to the marker are present. An incomplete frame is emitted with
    ``loss_detected`` once packets of two newer frames have arrived.
    """

    def __init__(self, frame_clock: Optional[FrameClock] = None, max_pending_frames: int = 64):
        self.frame_clock = frame_clock
        self.max_pending_frames = max_pending_frames
        self.counters = DepacketizerCounters()
        self._pending: Dict[int, Dict[int, Tuple[RtpPacket, int]]] = {}
        self._next_seq: Optional[int] = None
        self._origin: Optional[int] = None
        self._recent: deque = deque(maxlen=RECENT_SEQS)
        self._recent_set: Set[int] = set()

    def reset(self):
        self._pending.clear()
        self._next_seq = None
        self._origin = None
        self._recent.clear()
        self._recent_set.clear()

    def push(self, pkt: RtpPacket, arrival_ts: int) -> List[FrameAssembly]:
        if self._origin is None:
            self._origin = pkt.seq
        if self._next_seq is not None and seq_diff(pkt.seq, self._next_seq) < 0:
            if pkt.seq in self._recent_set:
                self.counters.duplicates += 1
            else:
                self.counters.late_packets += 1
            return []
        packets = self._pending.setdefault(pkt.rtp_timestamp, {})
        if pkt.seq in packets:
            self.counters.duplicates += 1
            return []
        packets[pkt.seq] = (pkt, arrival_ts)

        emitted = []
        while self._pending:
            assembly = self._try_emit()
            if assembly is None:
                break
            emitted.append(assembly)
        return emitted

    def _rel(self, seq: int) -> int:
        ref = self._next_seq if self._next_seq is not None else self._origin
        return seq_diff(seq, ref)

    def _ordered_frames(self) -> List[Tuple[int, Dict[int, Tuple[RtpPacket, int]]]]:
        return sorted(self._pending.items(), key=lambda item: min(self._rel(s) for s in item[1]))

    def _try_emit(self) -> Optional[FrameAssembly]:
        frames = self._ordered_frames()
        timestamp, packets = frames[0]
        newer = frames[1:]
        seqs = sorted(packets, key=self._rel)
        first_seq = seqs[0]
        marker_seq = next((s for s in seqs if packets[s][0].marker), None)
        head_ok = _nal_start_payload(packets[first_seq][0].payload) is not None

        if self._next_seq is None:
            start = first_seq if head_ok else None
        elif first_seq == self._next_seq:
            start = first_seq
        else:
            start = None

        if marker_seq is not None:
            end = marker_seq
        elif newer:
            end = (min((s for _, p in newer for s in p), key=self._rel) - 1) & 0xFFFF
        else:
            end = None

        if start is not None and end is not None and marker_seq is not None:
            span = seq_diff(end, start) + 1
            if span == len(packets):
                return self._emit(timestamp, packets, start, end, complete=True)

        force = len(self._pending) > self.max_pending_frames
        if len(newer) < 2 and not force:
            # a reordered packet may still fill the hole
            return None

        if start is None and self._next_seq is not None and head_ok and marker_seq is not None:
            # the hole is whole earlier frames; they are accounted by the receiver
            span = seq_diff(marker_seq, first_seq) + 1
            if span == len(packets):
                self._next_seq = first_seq
                return self._emit(timestamp, packets, first_seq, marker_seq, complete=True)

        lost_start = start if start is not None else (self._next_seq if self._next_seq is not None
                                                      else first_seq)
        lost_end = end if end is not None else seqs[-1]
        return self._emit(timestamp, packets, lost_start, lost_end, complete=False)

    def _remember(self, seq: int):
        if len(self._recent) == self._recent.maxlen:
            self._recent_set.discard(self._recent[0])
        self._recent.append(seq)
        self._recent_set.add(seq)

    def _emit(self, timestamp, packets, start, end, complete: bool) -> FrameAssembly:
        del self._pending[timestamp]
        for seq in packets:
            self._remember(seq)
        self._next_seq = (end + 1) & 0xFFFF
        ordered = sorted(packets.values(), key=lambda item: seq_diff(item[0].seq, start))
        arrivals = [arrival for _, arrival in ordered]
        nal_units: Tuple[NalUnit, ...] = ()
        if complete:
            try:
                nal_units = _depayload([pkt for pkt, _ in ordered])
            except MalformedBitstream as e:
                logger.debug("Malformed payload in frame ts=%d: %s", timestamp, e)
                complete = False

        frame_id = capture_ts = None
        head = ordered[0][0]
        if head.seq == start:
            tag = packet_frame_tag(head.payload)
            if tag is not None:
                frame_id, capture_ts = tag.frame_id, tag.capture_ts
        if frame_id is None and self.frame_clock is not None:
            frame_id = self.frame_clock.frame_id(timestamp)

        if complete:
            self.counters.frames_complete += 1
        else:
            self.counters.frames_lost += 1
        return FrameAssembly(
            ssrc=head.ssrc,
            rtp_timestamp=timestamp,
            frame_id=frame_id,
            capture_ts=capture_ts,
            nal_units=nal_units,
            complete=complete,
            loss_detected=not complete,
            first_arrival_ts=min(arrivals),
            last_arrival_ts=max(arrivals),
            packet_count=len(ordered),
        )


def _depayload(packets: List[RtpPacket]) -> Tuple[NalUnit, ...]:
    nal_units = []
    fragment: Optional[bytearray] = None
    fragment_header = 0
    for pkt in packets:
        payload = pkt.payload
        if not payload:
            raise MalformedBitstream("empty RTP payload")
        nal_type = payload[0] & 0x1F
        if nal_type == FU_A:
            if len(payload) < 3:
                raise MalformedBitstream("short FU-A fragment")
            flags = payload[1]
            if flags & FU_START:
                if fragment is not None:
                    raise MalformedBitstream("FU-A start inside an open fragment")
                fragment = bytearray(payload[2:])
                fragment_header = (payload[0] & 0x60) | (flags & 0x1F)
            elif fragment is None:
                raise MalformedBitstream("FU-A continuation without start")
            else:
                fragment.extend(payload[2:])
            if flags & FU_END:
                nal_units.append(NalUnit(fragment_header, bytes(fragment)))
                fragment = None
        elif 1 <= nal_type <= 23:
            if fragment is not None:
                raise MalformedBitstream("single NAL packet inside an open fragment")
            nal_units.append(NalUnit.from_bytes(payload))
        else:
            raise MalformedBitstream(f"unsupported RTP payload type {nal_type}")
    if fragment is not None:
        raise MalformedBitstream("unterminated FU-A fragment")
    return tuple(nal_units)


def reassemble(pkt: RtpPacket, state: Depacketizer, arrival_ts: int = 0) -> List[FrameAssembly]:
    return state.push(pkt, arrival_ts)
