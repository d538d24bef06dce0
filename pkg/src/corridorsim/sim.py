"""Deterministic fixed-step corridor simulation.

Two driving modes share one integrator. Baseline vehicles run an
intelligent-driver car follower with anticipatory limit braking and
yield-at-the-line priority rules. Optimal vehicles register with the zone
coordinators at control-zone entry, receive a merging time, and track the
closed-form minimum-energy plan; outside control zones they fall back to
the baseline follower with yielding disabled.

Every step: spawn due arrivals, register new control-zone entrants (optimal
mode), compute all controls from one state snapshot, emit trace rows, then
integrate semi-implicitly (v first, then p with the new v). Time is always
step * dt computed from the integer step, never accumulated.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from corridorsim.core import (
    Approach,
    BaselineParams,
    Bounds,
    ConflictZoneSpec,
    CorridorConfig,
    VehicleState,
)
from corridorsim.coordinator import ScheduleEntry, ZoneCoordinator
from corridorsim.trajectory import (
    BoundaryConditions,
    DegenerateHorizonError,
    InfeasibleHorizonError,
    TrajectoryCoefficients,
    evaluate,
    solve_bounded,
    solve_unconstrained,
    terminal_speed,
)

__all__ = [
    "Spawner",
    "StepContext",
    "baseline_step",
    "optimal_step",
    "SimResult",
    "Simulation",
    "run",
]

log = logging.getLogger(__name__)

TM_RELAX_STEP = 0.1
TM_RELAX_LIMIT = 50
REANCHOR_TOLERANCE = 0.3   # m of tracking drift before a replan
MIN_SCHED_SPEED = 0.5      # floor for the scheduling speed of a crawling entrant
YIELD_CROSS_MARGIN = 1.0   # s added to the kinematic crossing time at a yield line
LINE_SETBACK = 0.2         # m short of the merging-zone line a yielder stops
GOVERNOR_MARGIN = 0.01     # m kept above the headway envelope by the governor


# ---------------------------------------------------------------------------
# spawning


class Spawner:
    """Pre-generated Poisson arrival streams, one independent seeded stream
    per route so adding a route never perturbs the others."""

    def __init__(self, config: CorridorConfig):
        self.config = config
        self._pending: dict[str, list[float]] = {}
        for idx, route in enumerate(config.routes):
            if config.spawn.probe_only:
                times = [0.0] if route.name == config.main_route else []
            else:
                times = self._draw(config.seed, idx, route.flow_vps, config.horizon)
            self._pending[route.name] = times

    @staticmethod
    def _draw(seed: int, route_index: int, rate: float, horizon: float) -> list[float]:
        if rate <= 0:
            return []
        rng = np.random.default_rng(np.random.SeedSequence([seed, route_index]))
        times = []
        t = float(rng.exponential(1.0 / rate))
        while t < horizon:
            times.append(t)
            t += float(rng.exponential(1.0 / rate))
        return times

    def arrival_times(self, route: str) -> list[float]:
        return list(self._pending[route])

    def due(self, route: str, t: float) -> bool:
        q = self._pending[route]
        return bool(q) and q[0] <= t

    def pop(self, route: str) -> float:
        return self._pending[route].pop(0)


# ---------------------------------------------------------------------------
# baseline controller


@dataclass(frozen=True)
class StepContext:
    """Per-vehicle snapshot data the baseline follower needs beyond its own
    route leader: desired speed, upcoming limit drops, the projected
    cross-route leader inside a shared-lane merging zone, and yield state."""

    v_des: float
    dt: float
    bounds: Bounds
    limit_cuts: tuple[tuple[float, float], ...] = ()   # (distance, lower limit)
    projected: Optional[tuple[float, float]] = None     # (gap, leader speed)
    yield_blocked: bool = False
    line_gap: Optional[float] = None                    # distance to the stop point


def _idm(v: float, v_des: float, params: BaselineParams,
         gap: Optional[float] = None, dv: float = 0.0) -> float:
    a = params.max_accel
    free = a * (1.0 - (v / max(v_des, 0.1)) ** params.speed_exponent)
    if gap is None:
        return free
    s_star = params.min_gap + v * params.headway \
        + v * dv / (2.0 * math.sqrt(a * params.comfort_decel))
    s_star = max(s_star, params.min_gap)
    return free - a * (s_star / max(gap, 0.1)) ** 2


def baseline_step(vehicle: VehicleState, leader: Optional[VehicleState],
                  params: BaselineParams, ctx: StepContext) -> float:
    """Car-following acceleration for one step, clipped to the global bounds."""
    v = vehicle.v
    u = _idm(v, ctx.v_des, params)
    if leader is not None:
        gap = leader.s - vehicle.s
        u = min(u, _idm(v, ctx.v_des, params, gap, v - leader.v))
    if ctx.projected is not None:
        gap, v_lead = ctx.projected
        u = min(u, _idm(v, ctx.v_des, params, gap, v - v_lead))
    b = params.comfort_decel
    for dist, lim in ctx.limit_cuts:
        if v > lim + 1e-9 and dist <= (v * v - lim * lim) / (2.0 * b) + v * ctx.dt:
            u = min(u, max(-b, (lim - v) / ctx.dt))
    if ctx.yield_blocked and ctx.line_gap is not None:
        u = min(u, _idm(v, ctx.v_des, params, max(ctx.line_gap, 0.01), v))
    return min(max(u, ctx.bounds.u_min), ctx.bounds.u_max)


def _time_to_cover(dist: float, v: float, accel: float, v_cap: float) -> float:
    """Time to cover dist starting at v, accelerating at accel up to v_cap."""
    if dist <= 0:
        return 0.0
    v = min(v, v_cap)
    if accel <= 0 or v >= v_cap - 1e-9:
        return dist / max(v_cap, 0.1)
    d_acc = (v_cap * v_cap - v * v) / (2.0 * accel)
    if dist <= d_acc:
        return (-v + math.sqrt(v * v + 2.0 * accel * dist)) / accel
    return (v_cap - v) / accel + (dist - d_acc) / v_cap


# ---------------------------------------------------------------------------
# optimal controller


def optimal_step(vehicle: VehicleState, entry: ScheduleEntry,
                 coeffs: TrajectoryCoefficients, t: float, dt: float,
                 bounds: Bounds, v_hold: float) -> tuple[float, bool]:
    """Position-tracking realization of a planned trajectory.

    The command targets the plan position at the end of the step, which
    makes the integrated gridpoint positions exact and keeps the executed
    control at the midpoint sample of the planned linear control. Past tm
    the target extrapolates at the held merging speed. Returns (u, clamped).
    """
    tm = coeffs.tm
    if t + dt <= tm + 1e-12:
        p_target = evaluate(coeffs, t + dt)[2]
    else:
        p_end = evaluate(coeffs, tm)[2]
        p_target = p_end + v_hold * (t + dt - tm)
    v_target = max((p_target - vehicle.s) / dt, 0.0)
    u = (v_target - vehicle.v) / dt
    u_clipped = min(max(u, bounds.u_min), bounds.u_max)
    return u_clipped, abs(u - u_clipped) > 1e-9


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SimResult:
    rows: list[tuple]                 # (t, id, route, s, v, u, zone)
    schedule: list[dict]
    events: Counter
    spawned: int
    exited: int
    active_at_end: int

    @property
    def conserved(self) -> bool:
        return self.spawned == self.exited + self.active_at_end


@dataclass
class _Passage:
    """Progress of one vehicle through one zone."""

    zone: ConflictZoneSpec
    approach: Approach
    phase: str                        # cz | mz
    coeffs: Optional[TrajectoryCoefficients] = None
    v_hold: float = 0.0
    exhausted: bool = False           # relaxation gave up; drift is expected


class Simulation:
    def __init__(self, config: CorridorConfig):
        self.cfg = config
        self.bounds = config.bounds
        self.dt = config.dt
        self.spawner = Spawner(config)
        self.vehicles: dict[int, VehicleState] = {}
        self.route_order: dict[str, list[int]] = {r.name: [] for r in config.routes}
        self.bindings: dict[str, tuple[tuple[ConflictZoneSpec, Approach], ...]] = {
            r.name: config.zones_on(r.name) for r in config.routes}
        self.coordinators = {z.index: ZoneCoordinator(z, config.bounds, config.headway)
                             for z in config.zones}
        self.passages: dict[int, _Passage] = {}
        self.rows: list[tuple] = []
        self.schedule_log: dict[tuple[int, int], dict] = {}
        self.events: Counter = Counter()
        self._next_id = 1
        self._spawned = 0
        self._exited = 0
        # limit-drop boundaries per route, precomputed once
        self._cuts: dict[str, tuple[tuple[float, float], ...]] = {}
        for r in config.routes:
            cuts = []
            bnds = r.limit_boundaries()
            for (pos, lim), (_, prev_lim) in zip(bnds[1:], bnds):
                if lim < prev_lim:
                    cuts.append((pos, lim))
            self._cuts[r.name] = tuple(cuts)

    # -- spawning ----------------------------------------------------------

    def _spawn_due(self, t: float) -> None:
        b = -self.bounds.u_min
        h = self.cfg.headway
        for route in self.cfg.routes:
            while self.spawner.due(route.name, t):
                v0 = route.limit_at(0.0)
                order = self.route_order[route.name]
                if order:
                    # insertion speed capped so the new vehicle starts inside
                    # the headway envelope and could still stop behind the
                    # back of the queue at full braking
                    back = self.vehicles[order[-1]]
                    headroom = back.s - self.cfg.spawn.min_lead \
                        + back.v * back.v / (2.0 * b)
                    if headroom <= 0.0:
                        self.events["spawn_withheld"] += 1
                        break
                    v_quad = b * (-h + math.sqrt(h * h + 2.0 * headroom / b))
                    v_env = (back.s - self.cfg.spawn.min_lead) / h
                    v_safe = min(v_quad, v_env)
                    if v_safe < 0.5:
                        self.events["spawn_withheld"] += 1
                        break
                    v0 = min(v0, v_safe)
                self.spawner.pop(route.name)
                vid = self._next_id
                self._next_id += 1
                self.vehicles[vid] = VehicleState(vehicle_id=vid, route=route.name,
                                                  s=0.0, v=v0)
                order.append(vid)
                self._spawned += 1

    # -- optimal-mode planning ----------------------------------------------

    def _register_entrants(self, t: float) -> None:
        entrants = []
        for vid, state in self.vehicles.items():
            if vid in self.passages:
                continue
            for zone, ap in self.bindings[state.route]:
                if ap.cz_start <= state.s < ap.mz_start:
                    entrants.append((state.route != self.cfg.main_route,
                                     state.route, vid, zone, ap))
                    break
        entrants.sort(key=lambda e: (e[0], e[1], e[2]))
        for _, _, vid, zone, ap in entrants:
            self._plan(vid, zone, ap, t)

    def _plan(self, vid: int, zone: ConflictZoneSpec, ap: Approach, t: float) -> None:
        state = self.vehicles[vid]
        coord = self.coordinators[zone.index]
        entry = coord.register_arrival(vid, t0=t, v0=max(state.v, MIN_SCHED_SPEED),
                                       lane=ap.lane)
        if entry.truncated:
            self.events["gap_truncations"] += 1
        coeffs, exhausted = self._solve_with_relaxation(vid, state, zone, ap,
                                                        coord, entry, t)
        v_end = max(terminal_speed(coeffs), 0.05)
        coord.set_terminal_speed(vid, v_end)
        self.passages[vid] = _Passage(zone=zone, approach=ap, phase="cz",
                                      coeffs=coeffs, v_hold=v_end,
                                      exhausted=exhausted)
        self.schedule_log[(vid, zone.index)] = {
            "vehicle": vid, "zone": zone.index, "t0": entry.t0, "tm": entry.tm,
            "tf": entry.tf, "v_at_tm": v_end, "relation": entry.relation,
            "lane": entry.lane, "truncated": int(entry.truncated),
        }

    def _solve_with_relaxation(self, vid: int, state: VehicleState,
                               zone: ConflictZoneSpec, ap: Approach,
                               coord: ZoneCoordinator, entry: ScheduleEntry,
                               t: float) -> tuple[TrajectoryCoefficients, bool]:
        vt = zone.mz_speed if zone.terminal_rule == "mz_speed" else None
        fallback = None
        for attempt in range(TM_RELAX_LIMIT + 1):
            bc = BoundaryConditions(p0=state.s, v0=state.v, t0=t,
                                    p_mz=ap.mz_start, tm=entry.tm,
                                    terminal_speed=vt)
            try:
                return solve_bounded(bc, self.bounds), False
            except DegenerateHorizonError:
                pass
            except InfeasibleHorizonError as exc:
                if exc.partial is not None:
                    fallback = exc.partial
            if attempt == TM_RELAX_LIMIT:
                break
            entry = coord.adjust_merging_time(vid, entry.tm + TM_RELAX_STEP)
            self.events["tm_relaxations"] += 1
        self.events["relax_exhausted"] += 1
        log.warning("vehicle %d zone %d: no clean plan after %d relaxations; "
                    "executing with control clamped", vid, zone.index, TM_RELAX_LIMIT)
        if fallback is None:
            fallback = solve_unconstrained(
                BoundaryConditions(p0=state.s, v0=state.v, t0=t, p_mz=ap.mz_start,
                                   tm=entry.tm, terminal_speed=vt))
        return fallback, True

    def _replan(self, vid: int, t: float) -> None:
        passage = self.passages[vid]
        state = self.vehicles[vid]
        coord = self.coordinators[passage.zone.index]
        entry = coord.entry(vid)
        if entry.tm - t < 2 * self.dt:
            return   # too close to the merge to re-pose the problem
        self.events["replans"] += 1
        coeffs, exhausted = self._solve_with_relaxation(vid, state, passage.zone,
                                                        passage.approach, coord,
                                                        entry, t)
        passage.coeffs = coeffs
        passage.exhausted = exhausted
        passage.v_hold = max(terminal_speed(coeffs), 0.05)
        coord.set_terminal_speed(vid, passage.v_hold)
        rec = self.schedule_log[(vid, passage.zone.index)]
        rec["tm"] = coord.entry(vid).tm
        rec["v_at_tm"] = passage.v_hold

    # -- per-step neighbour queries ------------------------------------------

    def _zone_frames(self) -> dict[int, dict[str, list[tuple[float, float, bool]]]]:
        """Per zone, per route: (x, v, priority) for vehicles inside the zone
        window, x measured from the merging-zone line of that route."""
        frames: dict[int, dict[str, list[tuple[float, float, bool]]]] = {}
        for zone in self.cfg.zones:
            per_route: dict[str, list[tuple[float, float, bool]]] = {}
            for ap in zone.approaches:
                rows = []
                for vid in self.route_order[ap.route]:
                    st = self.vehicles[vid]
                    x = st.s - ap.mz_start
                    if -zone.cz_length <= x < zone.mz_length:
                        rows.append((x, st.v, ap.priority))
                per_route[ap.route] = rows
            frames[zone.index] = per_route
        return frames

    def _context_for(self, state: VehicleState, frames, yielding: bool) -> StepContext:
        route = self.cfg.route(state.route)
        v_des = route.limit_at(state.s)
        cuts = tuple((pos - state.s, lim) for pos, lim in self._cuts[state.route]
                     if pos > state.s)
        projected = None
        blocked = False
        line_gap = None
        for zone, ap in self.bindings[state.route]:
            x = state.s - ap.mz_start
            if not (-zone.cz_length <= x < zone.mz_length):
                continue
            same_lane = any(o.lane == ap.lane for o in zone.approaches if o.route != ap.route)
            others = [(ox, ov, opri)
                      for r, rows in frames[zone.index].items() if r != ap.route
                      for ox, ov, opri in rows]
            if same_lane:
                ahead = [(ox, ov) for ox, ov, _ in others if 0.0 <= ox and ox > x]
                if ahead:
                    ox, ov = min(ahead)
                    projected = (ox - x, ov)
                if yielding and not ap.priority and x < 0.0:
                    blocked = self._same_lane_blocked(state, x, others)
            else:
                if yielding and x < 0.0:
                    if ap.priority:
                        blocked = any(0.0 <= ox and not opri for ox, _, opri in others)
                    else:
                        blocked = self._conflict_blocked(state, x, zone, ap, others)
            if blocked:
                # virtual stopped leader just past the line; the follower's
                # equilibrium gap then puts its nose a step short of the line
                line_gap = (ap.mz_start + self.cfg.baseline.min_gap
                            - LINE_SETBACK) - state.s
            break
        return StepContext(v_des=v_des, dt=self.dt, bounds=self.bounds,
                           limit_cuts=cuts, projected=projected,
                           yield_blocked=blocked, line_gap=line_gap)

    def _same_lane_blocked(self, state, x, others) -> bool:
        p = self.cfg.baseline
        tau_me = -x / max(state.v, 0.3)
        for ox, ov, _ in others:
            if ox >= 0.0:
                # someone just past the join, too close to slot in behind
                if ox < p.headway * state.v + p.min_gap:
                    return True
            else:
                tau_o = -ox / max(ov, 0.3)
                if abs(tau_o - tau_me) < p.headway:
                    return True
        return False

    def _conflict_blocked(self, state, x, zone, ap, others) -> bool:
        p = self.cfg.baseline
        if any(0.0 <= ox for ox, _, _ in others):
            return True
        route = self.cfg.route(state.route)
        v_cap = min(route.limit_at(ap.mz_start - 1e-6), self.bounds.v_max)
        crossing = _time_to_cover(-x + zone.mz_length, state.v, p.max_accel, v_cap)
        window = max(p.yield_gap, crossing + YIELD_CROSS_MARGIN)
        for ox, ov, _ in others:
            if ox < 0.0 and -ox / max(ov, 0.3) < window:
                return True
        return False

    # -- safety governor -----------------------------------------------------

    def _govern(self, u: float, state: VehicleState, order: list[int], pos: int,
                controls: dict[int, float], frames) -> float:
        """Headway barrier over the planned control: never accelerate past the
        ceiling that keeps the gap at least headway * own speed (plus a small
        margin) after the step. Inactive in correctly scheduled traffic; binds
        only while a degraded plan would otherwise compress the gap."""
        cap = math.inf
        if pos:
            lead = self.vehicles[order[pos - 1]]
            u_lead = controls.get(order[pos - 1], self.bounds.u_min)
            cap = self._headway_ceiling(lead.s - state.s, state.v, lead.v, u_lead)
        proj = self._mz_projected_leader(state, frames)
        if proj is not None:
            gap, v_lead = proj
            # cross-route leader's control is unknown here; assume full braking
            cap = min(cap, self._headway_ceiling(gap, state.v, v_lead,
                                                 self.bounds.u_min))
        if u > cap:
            self.events["governor_caps"] += 1
            u = max(cap, self.bounds.u_min)
        return u

    def _headway_ceiling(self, gap: float, v_f: float, v_lead: float,
                         u_lead: float) -> float:
        """Largest control that keeps the pair safe after this step: the gap
        must stay above headway * own speed (instantaneous envelope) and above
        the braking differential (v_f^2 - v_l^2) / 2b on top of it, so the
        envelope remains achievable even if the leader brakes to a stop at
        the hardest rate anyone can."""
        dt = self.dt
        h = self.cfg.headway
        b = -self.bounds.u_min
        v_lead_next = max(v_lead + u_lead * dt, 0.0)
        avail = gap + v_lead_next * dt - GOVERNOR_MARGIN
        v_linear = avail / (h + dt)
        disc = (h + dt) ** 2 + 2.0 * (avail + v_lead_next ** 2 / (2.0 * b)) / b
        v_quad = b * (-(h + dt) + math.sqrt(max(disc, 0.0)))
        return (min(v_linear, v_quad) - v_f) / dt

    def _mz_projected_leader(self, state: VehicleState, frames):
        """Nearest vehicle from the other route of a shared-lane zone that is
        already inside the merging zone and ahead of us, as (gap, speed)."""
        for zone, ap in self.bindings[state.route]:
            x = state.s - ap.mz_start
            if not (-zone.cz_length <= x < zone.mz_length):
                continue
            if not any(o.lane == ap.lane for o in zone.approaches
                       if o.route != ap.route):
                return None
            best = None
            for r, rows in frames[zone.index].items():
                if r == ap.route:
                    continue
                for ox, ov, _ in rows:
                    if ox >= 0.0 and ox > x and (best is None or ox < best[0]):
                        best = (ox, ov)
            return None if best is None else (best[0] - x, best[1])
        return None

    # -- main loop -----------------------------------------------------------

    def run(self) -> SimResult:
        optimal = self.cfg.mode == "optimal"
        n_steps = int(round(self.cfg.horizon / self.dt))
        for step in range(n_steps):
            t = step * self.dt
            self._spawn_due(t)
            if optimal:
                self._register_entrants(t)
            frames = self._zone_frames()

            controls: dict[int, float] = {}
            for route in self.cfg.routes:
                order = self.route_order[route.name]
                for pos, vid in enumerate(order):
                    state = self.vehicles[vid]
                    passage = self.passages.get(vid) if optimal else None
                    if passage is not None and passage.phase == "mz":
                        u = (passage.v_hold - state.v) / self.dt
                        u = min(max(u, self.bounds.u_min), self.bounds.u_max)
                        if state.v < 0.3 and passage.v_hold < 0.3:
                            u = min(self.bounds.u_max, 0.5)
                            self.events["mz_crawl_steps"] += 1
                    elif passage is not None:
                        drift = abs(state.s - evaluate(passage.coeffs,
                                                       min(max(t, passage.coeffs.t0),
                                                           passage.coeffs.tm))[2])
                        if drift > REANCHOR_TOLERANCE and not passage.exhausted:
                            self._replan(vid, t)
                            passage = self.passages[vid]
                        entry = self.coordinators[passage.zone.index].entry(vid)
                        u, clamped = optimal_step(state, entry, passage.coeffs, t,
                                                  self.dt, self.bounds, passage.v_hold)
                        if clamped:
                            self.events["control_clamps"] += 1
                    else:
                        leader = self.vehicles[order[pos - 1]] if pos else None
                        ctx = self._context_for(state, frames, yielding=not optimal)
                        u = baseline_step(state, leader, self.cfg.baseline, ctx)
                    if optimal:
                        u = self._govern(u, state, order, pos, controls, frames)
                    controls[vid] = u

            for route in self.cfg.routes:
                for vid in self.route_order[route.name]:
                    st = self.vehicles[vid]
                    self.rows.append((t, vid, st.route, st.s, st.v, controls[vid],
                                      self._zone_at(st)))

            t_next = (step + 1) * self.dt
            despawned: list[int] = []
            for route in self.cfg.routes:
                spec = self.cfg.route(route.name)
                for vid in self.route_order[route.name]:
                    st = self.vehicles[vid]
                    u = controls[vid]
                    v_new = max(st.v + u * self.dt, 0.0)
                    st.s += v_new * self.dt
                    st.v = v_new
                    st.u = u
                    st.dist_traveled += v_new * self.dt
                    if optimal:
                        self._advance_passage(vid, st, t_next)
                    if st.s >= spec.length - 1e-9:
                        self.rows.append((t_next, vid, st.route, st.s, st.v, u,
                                          self._zone_at(st)))
                        despawned.append(vid)
            for vid in despawned:
                st = self.vehicles.pop(vid)
                self.route_order[st.route].remove(vid)
                self.passages.pop(vid, None)
                self._exited += 1

        schedule = [self.schedule_log[k] for k in sorted(self.schedule_log)]
        return SimResult(rows=self.rows, schedule=schedule, events=self.events,
                         spawned=self._spawned, exited=self._exited,
                         active_at_end=len(self.vehicles))

    def _advance_passage(self, vid: int, st: VehicleState, t_next: float) -> None:
        passage = self.passages.get(vid)
        if passage is None:
            return
        ap, zone = passage.approach, passage.zone
        if passage.phase == "cz" and st.s >= ap.mz_start - 1e-9:
            passage.phase = "mz"
        if passage.phase == "mz" and st.s >= ap.mz_start + zone.mz_length - 1e-9:
            self.coordinators[zone.index].release(vid, t_next)
            self.schedule_log[(vid, zone.index)]["tf"] = t_next
            del self.passages[vid]

    def _zone_at(self, st: VehicleState) -> int:
        for zone, ap in self.bindings[st.route]:
            if ap.cz_start <= st.s < ap.mz_start + zone.mz_length:
                return zone.index
        return 0


def run(config: CorridorConfig) -> SimResult:
    """Run one seeded simulation to the horizon."""
    return Simulation(config).run()
