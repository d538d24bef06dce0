import numpy as np
import pytest

from corridorsim.v2x.bsm import (
    FRAME_SIZE,
    MSG_BSM,
    MSG_SPAT,
    BsmFrame,
    FrameError,
    decode_bsm,
    encode_bsm,
)


def test_worked_example_roundtrip():
    # 13.4 m/s = code 670, merging time 11.2 s, 52.3 m to the zone, zone 1
    frame = BsmFrame(vehicle_id=42, speed_code=670, tm_ms=11200,
                     dist_dm=523, cz=1, seq=9, timestamp_ms=60000)
    wire = encode_bsm(frame)
    assert len(wire) == FRAME_SIZE == 28
    back = decode_bsm(wire)
    assert back == frame
    assert back.speed_mps == pytest.approx(13.4)
    assert back.dist_m == pytest.approx(52.3)
    assert back.tm_s == pytest.approx(11.2)


def test_layout_is_pinned():
    # field order and widths must never drift; hex spelled out by hand
    frame = BsmFrame(vehicle_id=42, speed_code=670, tm_ms=11200,
                     dist_dm=523, cz=1, seq=9, timestamp_ms=60000)
    expected = bytes.fromhex(
        "14" "0000002a" "00000000" "00000000" "029e"
        "00002bc0" "020b" "0001" "09" "0000ea60")
    assert encode_bsm(frame) == expected


def test_zero_fields_roundtrip():
    frame = BsmFrame()
    assert decode_bsm(encode_bsm(frame)) == frame


def test_all_zero_buffer_rejected():
    # msg_id 0 is not a known type
    with pytest.raises(FrameError):
        decode_bsm(bytes(28))


def test_zone_id_range_checked_both_ways():
    with pytest.raises(FrameError):
        encode_bsm(BsmFrame(cz=7))
    wire = bytearray(encode_bsm(BsmFrame(cz=3)))
    wire[22] = 7  # low byte of the zone field
    with pytest.raises(FrameError):
        decode_bsm(bytes(wire))


def test_short_frame_rejected():
    wire = encode_bsm(BsmFrame())
    with pytest.raises(FrameError):
        decode_bsm(wire[:27])
    with pytest.raises(FrameError):
        decode_bsm(wire + b"\x00")


def test_unknown_msg_id_rejected():
    with pytest.raises(FrameError):
        encode_bsm(BsmFrame(msg_id=0x20))
    wire = bytearray(encode_bsm(BsmFrame()))
    wire[0] = 0x20
    with pytest.raises(FrameError):
        decode_bsm(bytes(wire))


def test_phase_marker_keeps_only_id_and_timestamp():
    # a 0x13 frame is parsed as a marker even if the body carries junk
    junk = BsmFrame(msg_id=MSG_SPAT, vehicle_id=99, speed_code=500,
                    tm_ms=1234, dist_dm=10, cz=2, seq=7, timestamp_ms=5000)
    back = decode_bsm(encode_bsm(junk))
    assert back.msg_id == MSG_SPAT
    assert back.timestamp_ms == 5000
    assert back.vehicle_id == 0 and back.speed_code == 0 and back.cz == 0


def test_encode_range_checks():
    for bad in [
        BsmFrame(vehicle_id=-1),
        BsmFrame(vehicle_id=2**32),
        BsmFrame(speed_code=-5),
        BsmFrame(speed_code=70000),
        BsmFrame(dist_dm=-1),
        BsmFrame(seq=256),
        BsmFrame(timestamp_ms=2**32),
        BsmFrame(latitude=2**31),
    ]:
        with pytest.raises(FrameError):
            encode_bsm(bad)


def test_from_state_quantizes():
    frame = BsmFrame.from_state(vehicle_id=1, speed=13.407, tm=11.2004,
                                dist=52.34, cz=1, seq=300, timestamp=0.1)
    assert frame.speed_code == 670
    assert frame.tm_ms == 11200
    assert frame.dist_dm == 523
    assert frame.seq == 300 & 0xFF
    # negative kinematics clamp to zero rather than wrapping
    clamped = BsmFrame.from_state(vehicle_id=1, speed=-0.3, tm=0.0,
                                  dist=-2.0, cz=0, seq=0, timestamp=0.0)
    assert clamped.speed_code == 0 and clamped.dist_dm == 0


def test_ten_thousand_random_roundtrips():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        frame = BsmFrame(
            msg_id=MSG_BSM,
            vehicle_id=int(rng.integers(0, 2**32)),
            latitude=int(rng.integers(-(2**31), 2**31)),
            longitude=int(rng.integers(-(2**31), 2**31)),
            speed_code=int(rng.integers(0, 2**16)),
            tm_ms=int(rng.integers(-(2**31), 2**31)),
            dist_dm=int(rng.integers(0, 2**16)),
            cz=int(rng.integers(0, 4)),
            seq=int(rng.integers(0, 256)),
            timestamp_ms=int(rng.integers(0, 2**32)),
        )
        assert decode_bsm(encode_bsm(frame)) == frame
