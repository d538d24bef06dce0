"""Command-line front end.

Subcommands:

* ``run``      simulate one or both control modes over a seed list and write
               trace/schedule/events files plus a comparison report.
* ``verify``   re-run the safety checks against a recorded trace.
* ``bench``    replay a trace through the broker into a head unit and compare
               its command stream with an in-process twin.
* ``broker``   stand-alone message broker.
* ``replay``   publish a recorded trace as safety-message frames.
* ``headunit`` subscribe to a broker and stream speed commands.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import threading
import time

from corridorsim.core import ConfigError, CorridorConfig, load_config_file
from corridorsim import sim
from corridorsim.metrics import (
    Metrics,
    compute_metrics,
    occupancy_from_trace,
    read_schedule,
    read_trace,
    render_report,
    rear_end_check,
    write_events,
    write_schedule,
    write_trace,
)

log = logging.getLogger("corridorsim")


def _parse_seeds(text: str | None, default: int) -> list[int]:
    """'3' -> [3]; '1,4,9' -> [1,4,9]; '1..10' -> [1..10]; None -> [default]."""
    if not text:
        return [default]
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _load(path: str) -> CorridorConfig:
    try:
        return load_config_file(path)
    except (OSError, ConfigError) as exc:
        raise SystemExit(f"error: {exc}")


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


# ---------------------------------------------------------------------------
# run


def _run_one(cfg: CorridorConfig, mode: str, seed: int, out: str) -> Metrics:
    run_cfg = dataclasses.replace(cfg, mode=mode, seed=seed)
    result = sim.run(run_cfg)
    tag = f"{mode}_{seed}"
    write_trace(os.path.join(out, f"trace_{tag}.csv"), result.rows)
    write_schedule(os.path.join(out, f"schedule_{tag}.csv"), result.schedule)
    write_events(os.path.join(out, f"events_{tag}.json"), result.events)
    return compute_metrics(result.rows, run_cfg, mode=mode, seed=seed)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    seeds = _parse_seeds(args.seeds, cfg.seed)
    modes = ["baseline", "optimal"] if args.mode == "both" else [args.mode]
    os.makedirs(args.out, exist_ok=True)
    by_mode: dict[str, list[Metrics]] = {}
    for mode in modes:
        for seed in seeds:
            log.info("running mode=%s seed=%d", mode, seed)
            by_mode.setdefault(mode, []).append(_run_one(cfg, mode, seed, args.out))
    report = render_report(cfg, by_mode)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(report)
    print(report, end="")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = _load(args.config)
    try:
        rows = read_trace(args.trace)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rear = rear_end_check(rows, cfg)
    lateral = occupancy_from_trace(rows, cfg)
    print(f"rear-end violations:  {len(rear)}")
    for t, follower, leader, gap, need in rear[:20]:
        print(f"  t={t:.1f}s vehicle {follower} behind {leader}: "
              f"gap {gap:.3f} m < required {need:.3f} m")
    print(f"lateral overlaps:     {len(lateral)}")
    for pair in lateral[:20]:
        print(f"  zone {pair.zone}: vehicles {pair.vehicle_a}/{pair.vehicle_b} "
              f"overlap [{pair.overlap_start:.2f}, {pair.overlap_end:.2f}] s")
    clean = not rear and not lateral
    print("clean" if clean else "VIOLATIONS FOUND")
    return 0 if clean else 1


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args: argparse.Namespace) -> int:
    from corridorsim.v2x.broker import Broker
    from corridorsim.v2x.bsm import decode_bsm, encode_bsm
    from corridorsim.v2x.headunit import HeadUnitCore, command_stream, run_over_socket
    from corridorsim.v2x.replay import frames_from_trace, publish_frames

    cfg = _load(args.config)
    try:
        rows = read_trace(args.trace)
        schedule = read_schedule(args.schedule) if args.schedule else None
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    frames = list(frames_from_trace(rows, cfg, schedule))
    if not frames:
        print("error: trace produced no frames", file=sys.stderr)
        return 2

    broker = Broker(port=args.port, latency_ms=args.latency_ms,
                    drop_prob=args.drop_prob).start()
    core = HeadUnitCore(cfg, route=args.route, stale_after=args.stale_after)
    stream = run_over_socket(broker.address, core, rate=args.tick_rate,
                             idle_timeout=args.idle_timeout)
    socket_cmds: list[tuple[float, float]] = []
    consumer = threading.Thread(target=lambda: socket_cmds.extend(stream))
    consumer.start()
    t_start = time.monotonic()
    published = publish_frames(frames, broker.address, rate=args.rate)
    consumer.join()
    wall = time.monotonic() - t_start
    broker.stop()

    twin_core = HeadUnitCore(cfg, route=args.route, stale_after=args.stale_after)
    twin_cmds = list(command_stream(
        (decode_bsm(encode_bsm(f)) for f in frames), twin_core, args.tick_rate))

    n = min(len(socket_cmds), len(twin_cmds))
    worst = max((abs(a[1] - b[1]) for a, b in zip(socket_cmds, twin_cmds)),
                default=float("inf") if socket_cmds or twin_cmds else 0.0)
    if len(socket_cmds) != len(twin_cmds):
        worst = float("inf")

    if args.out:
        with open(args.out, "w") as fh:
            fh.write("t,command\n")
            for t, v in socket_cmds:
                fh.write(f"{t:.3f},{v:.9f}\n")
    print(f"frames published:    {published} in {wall:.1f} s wall")
    print(f"commands (socket):   {len(socket_cmds)}")
    print(f"commands (twin):     {len(twin_cmds)}")
    print(f"worst |dv|:          {worst:.3e} m/s over {n} shared ticks")
    print(f"decode errors:       {core.decode_errors}")
    print(f"stale ticks:         {core.stale_ticks}")
    ok = worst <= args.tolerance
    print("equivalent" if ok else "DIVERGED")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# long-running network verbs


def cmd_broker(args: argparse.Namespace) -> int:
    from corridorsim.v2x.broker import Broker

    broker = Broker(host=args.host, port=args.port, latency_ms=args.latency_ms,
                    drop_prob=args.drop_prob, seed=args.seed).start()
    host, port = broker.address
    print(f"broker listening on {host}:{port}", flush=True)
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    from corridorsim.v2x.replay import replay_publish

    cfg = _load(args.config)
    try:
        sent = replay_publish(args.trace, _address(args.address), cfg,
                              rate=args.rate, schedule_path=args.schedule)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"published {sent} frames")
    return 0


def cmd_headunit(args: argparse.Namespace) -> int:
    from corridorsim.v2x.headunit import HeadUnitCore, run_over_socket

    cfg = _load(args.config)
    core = HeadUnitCore(cfg, route=args.route, stale_after=args.stale_after)
    sink = sys.stdout if args.out in (None, "-") else open(args.out, "w")
    try:
        sink.write("t,command\n")
        for t, v in run_over_socket(_address(args.address), core,
                                    rate=args.tick_rate,
                                    idle_timeout=args.idle_timeout):
            sink.write(f"{t:.3f},{v:.9f}\n")
            sink.flush()
    except KeyboardInterrupt:
        pass
    finally:
        if sink is not sys.stdout:
            sink.close()
    print(f"decode errors: {core.decode_errors}, stale ticks: {core.stale_ticks}",
          file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corridorsim",
                                 description="corridor coordination simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate and write traces plus a report")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["baseline", "optimal", "both"],
                   default="both")
    p.add_argument("--seeds", help="e.g. 7 or 1,2,3 or 1..10 (default: config seed)")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="safety checks on a recorded trace")
    p.add_argument("--config", required=True)
    p.add_argument("trace")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="socket replay vs in-process twin")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--schedule")
    p.add_argument("--route", help="ego route (default: config main route)")
    p.add_argument("--rate", type=float, default=0.0,
                   help="publish pacing in frames/s; 0 floods (default)")
    p.add_argument("--tick-rate", type=float, default=100.0)
    p.add_argument("--stale-after", type=float, default=1.0)
    p.add_argument("--idle-timeout", type=float, default=2.0)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.add_argument("--drop-prob", type=float, default=0.0)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--out", help="write the socket command stream as CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("broker", help="run a stand-alone broker")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7700)
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.add_argument("--drop-prob", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("replay", help="publish a trace as message frames")
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--schedule")
    p.add_argument("--address", default="127.0.0.1:7700")
    p.add_argument("--rate", type=float, default=100.0)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("headunit", help="stream speed commands from a broker")
    p.add_argument("--config", required=True)
    p.add_argument("--address", default="127.0.0.1:7700")
    p.add_argument("--route")
    p.add_argument("--tick-rate", type=float, default=100.0)
    p.add_argument("--stale-after", type=float, default=1.0)
    p.add_argument("--idle-timeout", type=float, default=2.0)
    p.add_argument("--out", help="command CSV path, - for stdout")
    p.set_defaults(func=cmd_headunit)

    return ap


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("CORRIDORSIM_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
