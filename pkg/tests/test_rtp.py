import numpy as np
import pytest

from src.media.frames import IDR_HEADER, P_HEADER, EncodedFrame, EncoderConfig, NalUnit, SyntheticEncoder
from src.media.rtp import (FU_A, FU_END, FU_START, Depacketizer, FrameClock, PacketizerState,
                           RtpPacket, decode_packet, encode_packet, packet_frame_tag,
                           packet_starts_idr, packetize_frame, reassemble, seq_diff,
                           ticks_per_frame)
from src.utils.errors import BadVersion, ConfigError, TruncatedPacket

FPS = 30.0


def _frame(frame_id: int, size: int, idr: bool, rng) -> EncodedFrame:
    payload = rng.integers(0, 256, size=size - 1, dtype=np.uint8).tobytes()
    return EncodedFrame.from_nal_units(frame_id, frame_id, [NalUnit(IDR_HEADER if idr else P_HEADER,
                                                                    payload)])


def _depacketizer() -> Depacketizer:
    return Depacketizer(FrameClock(0, ticks_per_frame(FPS)))


def test_packet_header_bytes():
    pkt = RtpPacket(seq=1, rtp_timestamp=3000, ssrc=0xDEADBEEF, payload=b"\x65", marker=True,
                    payload_type=96)
    wire = encode_packet(pkt)
    assert wire == bytes.fromhex("80 E0 00 01 00 00 0B B8 DE AD BE EF 65")
    assert decode_packet(wire) == pkt


def test_packet_codec_identity():
    rng = np.random.default_rng(21)
    for _ in range(1000):
        pkt = RtpPacket(seq=int(rng.integers(0, 1 << 16)),
                        rtp_timestamp=int(rng.integers(0, 1 << 32)),
                        ssrc=int(rng.integers(0, 1 << 32)),
                        payload=rng.integers(0, 256, size=int(rng.integers(0, 1400)),
                                             dtype=np.uint8).tobytes(),
                        marker=bool(rng.integers(0, 2)),
                        payload_type=int(rng.integers(0, 128)))
        wire = encode_packet(pkt)
        assert len(wire) == 12 + len(pkt.payload)
        assert decode_packet(wire) == pkt


def test_truncated_and_bad_version():
    with pytest.raises(TruncatedPacket):
        decode_packet(b"\x80\x60\x00")
    wire = bytearray(encode_packet(RtpPacket(1, 2, 3, b"x")))
    wire[0] = 0x40
    with pytest.raises(BadVersion):
        decode_packet(bytes(wire))


def test_seq_diff_wraps():
    assert seq_diff(0, 65535) == 1
    assert seq_diff(65535, 0) == -1
    assert seq_diff(10, 5) == 5


def test_packetizer_rejects_tiny_payload():
    with pytest.raises(ConfigError):
        PacketizerState(1, max_payload=2)


def test_small_frame_is_single_nal_packet():
    frame = _frame(0, 500, True, np.random.default_rng(1))
    packets = packetize_frame(frame, PacketizerState(7), FPS)
    assert len(packets) == 1
    assert packets[0].marker
    assert packets[0].payload == frame.nal_units[0].to_bytes()


def test_fu_a_fragmentation_flags():
    frame = _frame(3, 20_000, True, np.random.default_rng(2))
    state = PacketizerState(7, next_seq=65530, max_payload=1200)
    packets = packetize_frame(frame, state, FPS)
    assert all(p.payload[0] & 0x1F == FU_A for p in packets)
    assert all(len(p.payload) <= 1200 for p in packets)
    assert sum(bool(p.payload[1] & FU_START) for p in packets) == 1
    assert sum(bool(p.payload[1] & FU_END) for p in packets) == 1
    assert packets[0].payload[1] & FU_START and packets[-1].payload[1] & FU_END
    assert [p.marker for p in packets] == [False] * (len(packets) - 1) + [True]
    assert {p.rtp_timestamp for p in packets} == {3 * ticks_per_frame(FPS)}
    assert [p.seq for p in packets[:7]] == [65530, 65531, 65532, 65533, 65534, 65535, 0]
    assert packet_starts_idr(packets[0].payload)
    assert not packet_starts_idr(packets[1].payload)


def test_p_frame_does_not_start_idr():
    frame = _frame(1, 3000, False, np.random.default_rng(3))
    packets = packetize_frame(frame, PacketizerState(7), FPS)
    assert not any(packet_starts_idr(p.payload) for p in packets)


def test_randomized_round_trip_with_reordering():
    rng = np.random.default_rng(42)
    state = PacketizerState(0x1234, next_seq=int(rng.integers(0, 65536)))
    depack = _depacketizer()
    emitted = []
    frames = []
    for frame_id in range(1000):
        frame = _frame(frame_id, int(rng.integers(2, 6000)), frame_id % 30 == 0, rng)
        frames.append(frame)
        packets = packetize_frame(frame, state, FPS)
        for index in rng.permutation(len(packets)):
            emitted.extend(reassemble(packets[index], depack, frame_id))

    assert len(emitted) == len(frames)
    for frame, asm in zip(frames, emitted):
        assert asm.complete and not asm.loss_detected
        assert asm.frame_id == frame.frame_id
        assert [n.to_bytes() for n in asm.nal_units] == [n.to_bytes() for n in frame.nal_units]
        assert EncodedFrame.from_nal_units(asm.frame_id, 0, asm.nal_units).payload_checksum \
            == frame.payload_checksum
    assert depack.counters.duplicates == 0
    assert depack.counters.frames_lost == 0


def test_missing_packet_marks_frame_lost():
    rng = np.random.default_rng(5)
    state = PacketizerState(9)
    depack = _depacketizer()
    out = []
    for frame_id in range(4):
        packets = packetize_frame(_frame(frame_id, 4000, frame_id == 0, rng), state, FPS)
        if frame_id == 1:
            del packets[1]
        for pkt in packets:
            out.extend(depack.push(pkt, 0))
    assert [a.frame_id for a in out] == [0, 1, 2, 3]
    assert [a.loss_detected for a in out] == [False, True, False, False]
    assert out[1].nal_units == ()


def test_duplicate_and_late_packets_are_counted():
    rng = np.random.default_rng(6)
    state = PacketizerState(9)
    depack = _depacketizer()
    first = packetize_frame(_frame(0, 3000, True, rng), state, FPS)
    second = packetize_frame(_frame(1, 3000, False, rng), state, FPS)
    for pkt in first:
        depack.push(pkt, 0)
    depack.push(second[0], 0)
    depack.push(second[0], 0)
    assert depack.counters.duplicates == 1
    # the first frame already left the depacketizer
    depack.push(first[0], 0)
    assert depack.counters.duplicates == 2
    assert depack.counters.late_packets == 0


def test_packet_after_its_frame_was_given_up_is_late():
    rng = np.random.default_rng(7)
    state = PacketizerState(9)
    depack = _depacketizer()
    frames = [packetize_frame(_frame(i, 3000, i == 0, rng), state, FPS) for i in range(3)]
    held = frames[0][1]
    out = []
    for pkt in [p for packets in frames for p in packets if p is not held]:
        out.extend(depack.push(pkt, 0))
    assert [a.loss_detected for a in out][:1] == [True]
    assert depack.push(held, 0) == []
    assert depack.counters.late_packets == 1
    assert depack.counters.duplicates == 0


def test_reordering_across_frames_is_not_loss():
    rng = np.random.default_rng(9)
    state = PacketizerState(9)
    depack = _depacketizer()
    f0, f1, f2 = (packetize_frame(_frame(i, 3000, i == 0, rng), state, FPS) for i in range(3))
    assert len(f0) == len(f1) == 3
    order = f0[:2] + f1[:1] + f0[2:] + f1[1:] + f2
    out = [a for pkt in order for a in depack.push(pkt, 0)]
    assert [(a.frame_id, a.loss_detected) for a in out] == [(0, False), (1, False), (2, False)]
    assert depack.counters.late_packets == 0
    assert depack.counters.frames_lost == 0


def test_frame_tag_surfaces_through_depacketizer():
    enc = SyntheticEncoder(EncoderConfig())
    frame = enc.next_frame(123_456)
    packets = packetize_frame(frame, PacketizerState(1), FPS)
    assert packet_frame_tag(packets[0].payload).capture_ts == 123_456
    assert packet_frame_tag(packets[1].payload) is None
    depack = Depacketizer()
    out = [a for p in packets for a in depack.push(p, 0)]
    assert len(out) == 1
    assert out[0].capture_ts == 123_456
    assert out[0].frame_id == 0
    assert out[0].is_idr


def test_untagged_frames_use_frame_clock():
    frame = EncodedFrame.from_nal_units(17, 0, [NalUnit(P_HEADER, b"\x11" * 10)])
    packets = packetize_frame(frame, PacketizerState(1, rtp_ts_base=1000), FPS)
    depack = Depacketizer(FrameClock(1000, ticks_per_frame(FPS)))
    (asm,) = depack.push(packets[0], 0)
    assert asm.frame_id == 17
    assert asm.capture_ts is None


def test_reset_starts_a_new_sequence():
    rng = np.random.default_rng(8)
    depack = _depacketizer()
    for pkt in packetize_frame(_frame(0, 100, True, rng), PacketizerState(1, next_seq=10), FPS):
        depack.push(pkt, 0)
    depack.reset()
    (asm,) = depack.push(packetize_frame(_frame(5, 100, True, rng),
                                         PacketizerState(1, next_seq=3), FPS)[0], 0)
    assert asm.frame_id == 5
