"""Fixed-layout basic safety message codec.

Every frame is exactly 28 bytes, big-endian, in this field order:

====== ====  ======  ==============================================
offset size  type    field
====== ====  ======  ==============================================
0      1     u8      msg_id: 0x14 safety message, 0x13 phase marker
1      4     u32     vehicle_id
5      4     i32     latitude, 1e-7 degree units
9      4     i32     longitude, 1e-7 degree units
13     2     u16     speed, 0.02 m/s units
15     4     i32     merging time, milliseconds
19     2     u16     distance to coordination zone entry, decimeters
21     2     u16     coordination zone id, 0 through 3
23     1     u8      sequence number
24     4     u32     frame timestamp, milliseconds
====== ====  ======  ==============================================

Speed, distance, and position fields are stored in their wire units so a
decode(encode(frame)) round trip is exact; helpers convert to SI.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MSG_BSM = 0x14
MSG_SPAT = 0x13

FRAME_SIZE = 28
_LAYOUT = struct.Struct(">BIiiHiHHBI")
assert _LAYOUT.size == FRAME_SIZE

SPEED_UNIT = 0.02  # m/s per speed count
DIST_UNIT = 0.1  # meters per decimeter

_U16_MAX = 0xFFFF
_U32_MAX = 0xFFFFFFFF
_I32_MIN, _I32_MAX = -(2**31), 2**31 - 1
_CZ_MAX = 3


class FrameError(ValueError):
    """Raised when a frame cannot be encoded or decoded."""


@dataclass(frozen=True)
class BsmFrame:
    msg_id: int = MSG_BSM
    vehicle_id: int = 0
    latitude: int = 0
    longitude: int = 0
    speed_code: int = 0
    tm_ms: int = 0
    dist_dm: int = 0
    cz: int = 0
    seq: int = 0
    timestamp_ms: int = 0

    @property
    def speed_mps(self) -> float:
        return self.speed_code * SPEED_UNIT

    @property
    def dist_m(self) -> float:
        return self.dist_dm * DIST_UNIT

    @property
    def tm_s(self) -> float:
        return self.tm_ms / 1000.0

    @staticmethod
    def from_state(
        vehicle_id: int,
        speed: float,
        tm: float,
        dist: float,
        cz: int,
        seq: int,
        timestamp: float,
        latitude: int = 0,
        longitude: int = 0,
    ) -> "BsmFrame":
        """Quantize SI values (m/s, s, m) into wire units."""
        return BsmFrame(
            msg_id=MSG_BSM,
            vehicle_id=vehicle_id,
            latitude=latitude,
            longitude=longitude,
            speed_code=int(round(max(speed, 0.0) / SPEED_UNIT)),
            tm_ms=int(round(tm * 1000.0)),
            dist_dm=int(round(max(dist, 0.0) / DIST_UNIT)),
            cz=cz,
            seq=seq & 0xFF,
            timestamp_ms=int(round(timestamp * 1000.0)),
        )


def _check(cond: bool, what: str) -> None:
    if not cond:
        raise FrameError(what)


def encode_bsm(frame: BsmFrame) -> bytes:
    _check(frame.msg_id in (MSG_BSM, MSG_SPAT), f"unknown msg_id {frame.msg_id:#x}")
    _check(0 <= frame.vehicle_id <= _U32_MAX, "vehicle_id out of u32 range")
    _check(_I32_MIN <= frame.latitude <= _I32_MAX, "latitude out of i32 range")
    _check(_I32_MIN <= frame.longitude <= _I32_MAX, "longitude out of i32 range")
    _check(0 <= frame.speed_code <= _U16_MAX, "speed out of u16 range")
    _check(_I32_MIN <= frame.tm_ms <= _I32_MAX, "merging time out of i32 range")
    _check(0 <= frame.dist_dm <= _U16_MAX, "distance out of u16 range")
    _check(0 <= frame.cz <= _CZ_MAX, f"zone id {frame.cz} out of range 0..{_CZ_MAX}")
    _check(0 <= frame.seq <= 0xFF, "seq out of u8 range")
    _check(0 <= frame.timestamp_ms <= _U32_MAX, "timestamp out of u32 range")
    return _LAYOUT.pack(
        frame.msg_id,
        frame.vehicle_id,
        frame.latitude,
        frame.longitude,
        frame.speed_code,
        frame.tm_ms,
        frame.dist_dm,
        frame.cz,
        frame.seq,
        frame.timestamp_ms,
    )


def decode_bsm(data: bytes) -> BsmFrame:
    _check(
        len(data) == FRAME_SIZE,
        f"frame is {len(data)} bytes, expected {FRAME_SIZE}",
    )
    msg_id, vid, lat, lon, speed, tm_ms, dist, cz, seq, ts = _LAYOUT.unpack(data)
    if msg_id == MSG_SPAT:
        # Phase markers carry only their id and timestamp; body is ignored.
        return BsmFrame(msg_id=MSG_SPAT, timestamp_ms=ts)
    _check(msg_id == MSG_BSM, f"unknown msg_id {msg_id:#x}")
    _check(cz <= _CZ_MAX, f"zone id {cz} out of range 0..{_CZ_MAX}")
    return BsmFrame(
        msg_id=msg_id,
        vehicle_id=vid,
        latitude=lat,
        longitude=lon,
        speed_code=speed,
        tm_ms=tm_ms,
        dist_dm=dist,
        cz=cz,
        seq=seq,
        timestamp_ms=ts,
    )
