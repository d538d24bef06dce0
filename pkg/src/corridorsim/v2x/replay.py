"""Replay a recorded trace as a stream of safety-message frames.

Each trace row becomes one frame published on topic ``bsm/<zone>``.  Frames
are emitted sequentially in trace order (which is time order); the publisher
is open loop and never waits for consumers.  ``rate`` paces publishes against
the wall clock at that many frames per second; a rate of zero publishes as
fast as the socket accepts, which keeps the frame *content* identical since
timestamps come from the trace, not the clock.
"""

from __future__ import annotations

import time
from typing import Iterable, Iterator

from corridorsim.core import CorridorConfig
from corridorsim.metrics import read_schedule, read_trace
from corridorsim.v2x.broker import BrokerClient
from corridorsim.v2x.bsm import BsmFrame, encode_bsm


def _mz_positions(config: CorridorConfig) -> dict[tuple[str, int], float]:
    out = {}
    for route in config.routes:
        for zone, ap in config.zones_on(route.name):
            out[(route.name, zone.index)] = ap.mz_start
    return out


def frames_from_trace(
    rows: Iterable[tuple],
    config: CorridorConfig,
    schedule: list[dict] | None = None,
) -> Iterator[BsmFrame]:
    """Yield one frame per trace row, in row order.

    Merging times come from the schedule sidecar keyed by (vehicle, zone);
    rows without a schedule entry (baseline traces, rows outside any zone)
    carry a zero merging time.
    """
    mz_at = _mz_positions(config)
    tm_at: dict[tuple[int, int], float] = {}
    for rec in schedule or ():
        tm_at[(rec["vehicle"], rec["zone"])] = rec["tm"]
    seq: dict[int, int] = {}
    for t, vid, route, s, v, _u, zone in rows:
        if zone > 0:
            dist = max(mz_at[(route, zone)] - s, 0.0)
            tm = tm_at.get((vid, zone), 0.0)
        else:
            dist = 0.0
            tm = 0.0
        n = seq.get(vid, 0)
        seq[vid] = n + 1
        yield BsmFrame.from_state(
            vehicle_id=vid,
            speed=v,
            tm=tm,
            dist=dist,
            cz=zone,
            seq=n,
            timestamp=t,
        )


def publish_frames(
    frames: Iterable[BsmFrame],
    address: tuple[str, int],
    rate: float = 100.0,
) -> int:
    """Publish frames to a broker at ``rate`` per second; returns the count."""
    sent = 0
    with BrokerClient(address) as client:
        start = time.monotonic()
        for frame in frames:
            if rate > 0:
                target = start + sent / rate
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            client.publish(f"bsm/{frame.cz}", encode_bsm(frame))
            sent += 1
    return sent


def replay_publish(
    trace_path: str,
    address: tuple[str, int],
    config: CorridorConfig,
    rate: float = 100.0,
    schedule_path: str | None = None,
) -> int:
    rows = read_trace(trace_path)
    schedule = read_schedule(schedule_path) if schedule_path else None
    return publish_frames(frames_from_trace(rows, config, schedule), address, rate)
