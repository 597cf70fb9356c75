"""Synthetic H.264-shaped media: NAL units, frames, the stub encoder, Annex-B
framing and the rolling pre-roll buffer."""

import logging
import threading
import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Deque, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import ConfigError, EmptyBuffer, MalformedBitstream, OutOfOrderFrame

logger = logging.getLogger(__name__)

START_CODE_3 = b"\x00\x00\x01"
START_CODE_4 = b"\x00\x00\x00\x01"

NAL_TYPE_SLICE = 1
NAL_TYPE_IDR = 5
SLICE_TYPES = (NAL_TYPE_SLICE, NAL_TYPE_IDR)

IDR_HEADER = 0x65  # nal_ref_idc 3, type 5
P_HEADER = 0x41  # nal_ref_idc 2, type 1

# frame_id, capture_ts and the CRC of the remaining payload as 10 bytes of 7-bit
# groups each; every byte has bit 7 set so the tag can never form a start code
TAG_FIELD_BYTES = 10
TAG_BYTES = 3 * TAG_FIELD_BYTES


class FrameKind(str, Enum):
    IDR = "IDR"
    P = "P"


@dataclass(frozen=True)
class NalUnit:
    header_byte: int
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.header_byte <= 0xFF:
            raise MalformedBitstream(f"NAL header out of range: {self.header_byte}")
        if self.header_byte & 0x80:
            raise MalformedBitstream("forbidden_zero_bit is set")

    @property
    def nal_ref_idc(self) -> int:
        return (self.header_byte >> 5) & 0x03

    @property
    def nal_unit_type(self) -> int:
        return self.header_byte & 0x1F

    @property
    def size(self) -> int:
        return 1 + len(self.payload)

    def to_bytes(self) -> bytes:
        return bytes([self.header_byte]) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "NalUnit":
        if not data:
            raise MalformedBitstream("zero-length NAL unit")
        return cls(header_byte=data[0], payload=bytes(data[1:]))


def payload_checksum(nal_units: Sequence[NalUnit]) -> int:
    crc = 0
    for nal in nal_units:
        crc = zlib.crc32(nal.payload, crc)
    return crc & 0xFFFFFFFF


@dataclass(frozen=True)
class EncodedFrame:
    frame_id: int
    kind: FrameKind
    capture_ts: int
    nal_units: Tuple[NalUnit, ...]
    payload_checksum: int

    @property
    def size(self) -> int:
        return sum(nal.size for nal in self.nal_units)

    @property
    def is_idr(self) -> bool:
        return self.kind is FrameKind.IDR

    def verify(self) -> bool:
        return payload_checksum(self.nal_units) == self.payload_checksum

    @classmethod
    def from_nal_units(cls, frame_id: int, capture_ts: int,
                       nal_units: Sequence[NalUnit]) -> "EncodedFrame":
        if not nal_units:
            raise MalformedBitstream("a frame needs at least one NAL unit")
        nal_units = tuple(nal_units)
        kind = (FrameKind.IDR if any(n.nal_unit_type == NAL_TYPE_IDR for n in nal_units)
                else FrameKind.P)
        return cls(frame_id, kind, capture_ts, nal_units, payload_checksum(nal_units))


def _pack_septets(value: int) -> bytes:
    out = bytearray()
    for shift in range(7 * (TAG_FIELD_BYTES - 1), -1, -7):
        out.append(0x80 | ((value >> shift) & 0x7F))
    return bytes(out)


def _unpack_septets(data: bytes) -> int:
    value = 0
    for byte in data:
        value = (value << 7) | (byte & 0x7F)
    return value


class FrameTag(NamedTuple):
    frame_id: int
    capture_ts: int
    body_crc: int


def encode_frame_tag(frame_id: int, capture_ts: int, body_crc: int) -> bytes:
    return (_pack_septets(frame_id) + _pack_septets(max(0, capture_ts))
            + _pack_septets(body_crc))


def read_frame_tag(payload: bytes) -> Optional[FrameTag]:
    """Return the frame tag if ``payload`` starts with one."""
    if len(payload) < TAG_BYTES or not all(b & 0x80 for b in payload[:TAG_BYTES]):
        return None
    return FrameTag(_unpack_septets(payload[:TAG_FIELD_BYTES]),
                    _unpack_septets(payload[TAG_FIELD_BYTES:2 * TAG_FIELD_BYTES]),
                    _unpack_septets(payload[2 * TAG_FIELD_BYTES:TAG_BYTES]))


def _body_crc(nal_units: Sequence[NalUnit]) -> int:
    crc = zlib.crc32(nal_units[0].payload[TAG_BYTES:])
    for nal in nal_units[1:]:
        crc = zlib.crc32(nal.payload, crc)
    return crc & 0xFFFFFFFF


def verify_frame_payload(nal_units: Sequence[NalUnit]) -> bool:
    """Stub decode check: a tagged frame must match the CRC it carries.

    Untagged frames (file sources) carry nothing to check against and pass.
    """
    if not nal_units:
        return False
    tag = read_frame_tag(nal_units[0].payload)
    if tag is None:
        return True
    return tag.body_crc == _body_crc(nal_units)


@dataclass(frozen=True)
class EncoderConfig:
    fps: float = 30.0
    gop_length: int = 30
    idr_size: int = 20_000
    p_size: int = 4_000
    seed: int = 1

    def __post_init__(self):
        if self.fps <= 0:
            raise ConfigError("fps must be > 0")
        if self.gop_length < 1:
            raise ConfigError("gop_length must be >= 1")
        if self.idr_size < 2 or self.p_size < 2:
            raise ConfigError("idr_size and p_size must be >= 2")

    @property
    def frame_interval_ns(self) -> int:
        return round(1e9 / self.fps)


@dataclass
class EncoderState:
    next_frame_id: int = 0


def generate_frame(state: EncoderState, config: EncoderConfig, now: int) -> EncodedFrame:
    frame_id = state.next_frame_id
    state.next_frame_id += 1

    is_idr = frame_id % config.gop_length == 0
    size = config.idr_size if is_idr else config.p_size
    rng = np.random.default_rng([config.seed & 0xFFFFFFFFFFFFFFFF, frame_id])
    # no zero bytes, so the payload never emulates a start code
    payload = rng.integers(1, 256, size=size - 1, dtype=np.uint8).tobytes()
    if len(payload) >= TAG_BYTES:
        crc = zlib.crc32(payload[TAG_BYTES:]) & 0xFFFFFFFF
        payload = encode_frame_tag(frame_id, now, crc) + payload[TAG_BYTES:]

    nal = NalUnit(IDR_HEADER if is_idr else P_HEADER, payload)
    return EncodedFrame(frame_id, FrameKind.IDR if is_idr else FrameKind.P, now,
                        (nal,), payload_checksum((nal,)))


class SyntheticEncoder:
    """Deterministic stand-in for camera + hardware encoder."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self.state = EncoderState()

    def next_frame(self, now: int) -> EncodedFrame:
        return generate_frame(self.state, self.config, now)


def serialize_annex_b(nal_units: Sequence[NalUnit]) -> bytes:
    return b"".join(START_CODE_4 + nal.to_bytes() for nal in nal_units)


def parse_annex_b(bitstream: bytes) -> List[NalUnit]:
    data = bytes(bitstream)
    if data.startswith(START_CODE_4):
        pos = len(START_CODE_4)
    elif data.startswith(START_CODE_3):
        pos = len(START_CODE_3)
    else:
        raise MalformedBitstream("bitstream does not begin with a start code")

    nal_units = []
    while True:
        nxt = data.find(START_CODE_3, pos)
        end = len(data) if nxt < 0 else nxt
        if nxt >= 0 and end > pos and data[end - 1] == 0:
            end -= 1  # leading zero of a 4-byte start code
        chunk = data[pos:end]
        if not chunk:
            raise MalformedBitstream(f"zero-length NAL unit at offset {pos}")
        nal_units.append(NalUnit.from_bytes(chunk))
        if nxt < 0:
            return nal_units
        pos = nxt + len(START_CODE_3)


class AnnexBFileSource:
    """Replays a raw Annex-B file as a frame source, looping at end of file.

    Non-slice NAL units are carried with the next slice; every slice NAL closes
    a frame.
    """

    def __init__(self, path):
        nal_units = parse_annex_b(Path(path).read_bytes())
        self._frames: List[Tuple[NalUnit, ...]] = []
        pending: List[NalUnit] = []
        for nal in nal_units:
            pending.append(nal)
            if nal.nal_unit_type in SLICE_TYPES:
                self._frames.append(tuple(pending))
                pending = []
        if not self._frames:
            raise MalformedBitstream(f"{path}: no slice NAL units")
        self._next_frame_id = 0
        logger.info("Loaded %d frames from %s", len(self._frames), path)

    def next_frame(self, now: int) -> EncodedFrame:
        nal_units = self._frames[self._next_frame_id % len(self._frames)]
        frame = EncodedFrame.from_nal_units(self._next_frame_id, now, nal_units)
        self._next_frame_id += 1
        return frame


@dataclass
class FrameRingBuffer:
    capacity_duration: int = 15_000_000_000
    frames: Deque[EncodedFrame] = field(default_factory=deque)

    def __post_init__(self):
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.frames)

    def push(self, frame: EncodedFrame):
        ring_push(self, frame)

    def snapshot(self) -> List[EncodedFrame]:
        return ring_snapshot(self)


def ring_push(buffer: FrameRingBuffer, frame: EncodedFrame) -> None:
    with buffer._lock:
        if buffer.frames and frame.capture_ts < buffer.frames[-1].capture_ts:
            raise OutOfOrderFrame(
                f"frame {frame.frame_id} captured at {frame.capture_ts} is older than "
                f"newest buffered frame ({buffer.frames[-1].capture_ts})"
            )
        buffer.frames.append(frame)
        horizon = frame.capture_ts - buffer.capacity_duration
        while buffer.frames[0].capture_ts < horizon:
            buffer.frames.popleft()


def ring_snapshot(buffer: FrameRingBuffer) -> List[EncodedFrame]:
    with buffer._lock:
        frames = list(buffer.frames)
    for index, frame in enumerate(frames):
        if frame.is_idr:
            return sorted(frames[index:], key=lambda f: f.frame_id)
    raise EmptyBuffer("no IDR frame retained in the pre-roll buffer")
