"""Closed-form minimum-energy trajectories for a double integrator.

A vehicle entering a control zone gets a control law u(t) = a*(t-t0) + b
minimizing (1/2) * integral of u^2 between entry and its scheduled merging
time. The four integration constants follow from the boundary conditions;
the terminal condition is either u(tm) = 0 (free terminal speed) or
v(tm) = terminal_speed. When the unconstrained solution leaves the speed
envelope, the trajectory is pieced with a constant-speed arc riding the
violated bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from corridorsim.core import Bounds

__all__ = [
    "BoundaryConditions",
    "ArcSegment",
    "TrajectoryCoefficients",
    "Violation",
    "DegenerateHorizonError",
    "InfeasibleHorizonError",
    "EvaluationWindowError",
    "solve_unconstrained",
    "evaluate",
    "check_feasibility",
    "solve_with_speed_arc",
    "solve_bounded",
    "control_effort",
    "terminal_speed",
]

ARC_UNCONSTRAINED = "unconstrained"
ARC_VMAX = "v_max_cruise"
ARC_VMIN = "v_min_cruise"

_MIN_HORIZON = 1e-6
_SPEED_EPS = 1e-9
_TIME_EPS = 1e-9
_POS_TOL = 1e-6


class DegenerateHorizonError(ValueError):
    """Planning window too short to pose the boundary-value problem."""


class InfeasibleHorizonError(ValueError):
    """No arc layout meets the boundary conditions; the merging time must
    be adjusted upstream.

    ``partial`` carries the best-effort plan found before giving up, when
    one exists, so a caller out of relaxation budget can execute it with
    the control clamped rather than having nothing at all.
    """

    def __init__(self, msg: str, partial: "TrajectoryCoefficients | None" = None):
        super().__init__(msg)
        self.partial = partial


class EvaluationWindowError(ValueError):
    """Trajectory evaluated outside [t0, tm]."""


@dataclass(frozen=True)
class BoundaryConditions:
    """Endpoint data for one control-zone plan, absolute times in seconds."""

    p0: float
    v0: float
    t0: float
    p_mz: float
    tm: float
    terminal_speed: Optional[float] = None

    def __post_init__(self):
        if not self.tm > self.t0:
            raise ValueError("tm must exceed t0")
        if not self.p_mz > self.p0:
            raise ValueError("p_mz must exceed p0")
        if self.v0 < 0:
            raise ValueError("v0 must be non-negative")

    @property
    def horizon(self) -> float:
        return self.tm - self.t0

    @property
    def distance(self) -> float:
        return self.p_mz - self.p0


@dataclass(frozen=True)
class ArcSegment:
    """One polynomial piece; coefficients are local to tau = t - t_start."""

    kind: str
    t_start: float
    t_end: float
    a: float
    b: float
    c: float
    d: float

    @property
    def span(self) -> float:
        return self.t_end - self.t_start

    def control(self, tau: float) -> float:
        return self.a * tau + self.b

    def speed(self, tau: float) -> float:
        return 0.5 * self.a * tau * tau + self.b * tau + self.c

    def position(self, tau: float) -> float:
        return ((self.a * tau / 6.0 + 0.5 * self.b) * tau + self.c) * tau + self.d

    def effort(self) -> float:
        ts = self.span
        return 0.5 * (self.a ** 2 * ts ** 3 / 3.0 + self.a * self.b * ts ** 2 + self.b ** 2 * ts)


@dataclass(frozen=True)
class TrajectoryCoefficients:
    """Solved plan: first-arc constants plus the full arc chain.

    a, b, c, d duplicate segments[0] so single-arc consumers can read the
    constants directly; arcs lists (kind, switch_time) pairs with the
    absolute start time of each arc.
    """

    a: float
    b: float
    c: float
    d: float
    t0: float
    tm: float
    segments: tuple[ArcSegment, ...]

    @property
    def arcs(self) -> tuple[tuple[str, float], ...]:
        return tuple((seg.kind, seg.t_start) for seg in self.segments)

    @property
    def horizon(self) -> float:
        return self.tm - self.t0


@dataclass(frozen=True)
class Violation:
    """Closed interval [t_start, t_end] where a bound is exceeded."""

    constraint: str   # u_min | u_max | v_min | v_max
    t_start: float
    t_end: float
    peak: float


def _single(bc: BoundaryConditions, a: float, b: float) -> TrajectoryCoefficients:
    seg = ArcSegment(ARC_UNCONSTRAINED, bc.t0, bc.tm, a, b, bc.v0, bc.p0)
    return TrajectoryCoefficients(a=a, b=b, c=bc.v0, d=bc.p0,
                                  t0=bc.t0, tm=bc.tm, segments=(seg,))


def solve_unconstrained(bc: BoundaryConditions) -> TrajectoryCoefficients:
    """Solve the 4x4 boundary system in closed form.

    Times are shifted to tau = t - t0 before solving; absolute seconds make
    the cubic terms ill-conditioned.
    """
    t = bc.horizon
    if t < _MIN_HORIZON:
        raise DegenerateHorizonError(f"horizon {t:.3g} s below {_MIN_HORIZON} s")
    dp = bc.distance
    if bc.terminal_speed is None:
        # terminal condition u(tm) = 0
        a = 3.0 * (bc.v0 * t - dp) / t ** 3
        b = -a * t
    else:
        p = dp - bc.v0 * t
        v = bc.terminal_speed - bc.v0
        a = 6.0 * v / t ** 2 - 12.0 * p / t ** 3
        b = 6.0 * p / t ** 2 - 2.0 * v / t
    return _single(bc, a, b)


def _segment_at(coeffs: TrajectoryCoefficients, t: float) -> ArcSegment:
    for seg in coeffs.segments:
        if t <= seg.t_end + _TIME_EPS:
            return seg
    return coeffs.segments[-1]


def evaluate(coeffs: TrajectoryCoefficients, t: float) -> tuple[float, float, float]:
    """Return (u, v, p) at absolute time t within [t0, tm]."""
    if t < coeffs.t0 - _TIME_EPS or t > coeffs.tm + _TIME_EPS:
        raise EvaluationWindowError(
            f"t={t:.6f} outside plan window [{coeffs.t0:.6f}, {coeffs.tm:.6f}]")
    t = min(max(t, coeffs.t0), coeffs.tm)
    seg = _segment_at(coeffs, t)
    tau = min(max(t - seg.t_start, 0.0), seg.span)
    return seg.control(tau), seg.speed(tau), seg.position(tau)


def terminal_speed(coeffs: TrajectoryCoefficients) -> float:
    last = coeffs.segments[-1]
    return last.speed(last.span)


def control_effort(coeffs: TrajectoryCoefficients) -> float:
    """Integral of u^2/2 over the plan window."""
    return sum(seg.effort() for seg in coeffs.segments)


# ---------------------------------------------------------------------------
# feasibility


def _intervals_above(qa: float, qb: float, qc: float, span: float,
                     tol: float) -> list[tuple[float, float]]:
    """Sub-intervals of [0, span] where qa*x^2 + qb*x + qc > tol."""
    out: list[tuple[float, float]] = []
    if abs(qa) < 1e-15:
        if abs(qb) < 1e-15:
            if qc > tol:
                out.append((0.0, span))
            return out
        root = -qc / qb
        if qb > 0:
            lo, hi = max(root, 0.0), span
        else:
            lo, hi = 0.0, min(root, span)
        if hi - lo > 1e-12 and (qa * 0 + qb * (0.5 * (lo + hi)) + qc) > 0:
            out.append((lo, hi))
        return out
    disc = qb * qb - 4.0 * qa * qc
    if disc <= 0:
        if qa > 0 and qc > tol:
            out.append((0.0, span))
        return out
    sq = math.sqrt(disc)
    r1 = (-qb - sq) / (2.0 * qa)
    r2 = (-qb + sq) / (2.0 * qa)
    lo_r, hi_r = min(r1, r2), max(r1, r2)
    if qa > 0:
        candidates = [(0.0, lo_r), (hi_r, span)]
    else:
        candidates = [(lo_r, hi_r)]
    for lo, hi in candidates:
        lo, hi = max(lo, 0.0), min(hi, span)
        if hi - lo > 1e-12:
            mid = 0.5 * (lo + hi)
            if qa * mid * mid + qb * mid + qc > 0:
                out.append((lo, hi))
    return out


def _peak_quad(qa: float, qb: float, qc: float, lo: float, hi: float) -> float:
    vals = [qa * x * x + qb * x + qc for x in (lo, hi)]
    if abs(qa) > 1e-15:
        vx = -qb / (2.0 * qa)
        if lo < vx < hi:
            vals.append(qa * vx * vx + qb * vx + qc)
    return max(vals)


def _merge_adjacent(violations: list[Violation]) -> list[Violation]:
    merged: list[Violation] = []
    for v in sorted(violations, key=lambda x: (x.constraint, x.t_start)):
        if merged and merged[-1].constraint == v.constraint \
                and v.t_start - merged[-1].t_end <= 1e-9:
            prev = merged.pop()
            merged.append(Violation(v.constraint, prev.t_start, max(prev.t_end, v.t_end),
                                    max(prev.peak, v.peak)))
        else:
            merged.append(v)
    return merged


def check_feasibility(coeffs: TrajectoryCoefficients, bounds: Bounds,
                      tol: float = 1e-9) -> list[Violation]:
    """All (constraint, interval) pairs where u or v exits the envelope.

    Intervals come from polynomial roots per arc, not sampling, so boundary
    grazes at exactly the limit are not violations.
    """
    found: list[Violation] = []
    for seg in coeffs.segments:
        span = seg.span
        if span <= 0:
            continue
        # each check is the exceedance polynomial qa*tau^2 + qb*tau + qc > 0,
        # with sign +1 when the peak sits above the bound and -1 below it
        checks = [
            ("u_max", 0.0, seg.a, seg.b - bounds.u_max, bounds.u_max, +1.0),
            ("u_min", 0.0, -seg.a, bounds.u_min - seg.b, bounds.u_min, -1.0),
            ("v_max", 0.5 * seg.a, seg.b, seg.c - bounds.v_max, bounds.v_max, +1.0),
            ("v_min", -0.5 * seg.a, -seg.b, bounds.v_min - seg.c, bounds.v_min, -1.0),
        ]
        for name, qa, qb, qc, bound, sign in checks:
            for lo, hi in _intervals_above(qa, qb, qc, span, tol):
                excess = _peak_quad(qa, qb, qc, lo, hi)
                if excess <= tol:
                    continue
                found.append(Violation(name, seg.t_start + lo, seg.t_start + hi,
                                       bound + sign * excess))
    return _merge_adjacent(found)


# ---------------------------------------------------------------------------
# speed-arc piecing


def _entry_arc(bc: BoundaryConditions, v_b: float, t1: float) -> ArcSegment:
    a1 = 2.0 * (bc.v0 - v_b) / (t1 * t1)
    return ArcSegment(ARC_UNCONSTRAINED, bc.t0, bc.t0 + t1, a1, -a1 * t1, bc.v0, bc.p0)


def solve_with_speed_arc(bc: BoundaryConditions, bounds: Bounds,
                         which: str) -> TrajectoryCoefficients:
    """Piece the plan with a constant-speed arc riding v_max or v_min.

    Junctions are smooth: v equals the bound and u equals zero where the
    unconstrained arcs meet the cruise arc, and the entry/exit control
    slopes are equal (the position costate is constant across arcs). Raises
    InfeasibleHorizonError when no switch times fit the window; the caller
    adjusts tm and retries.
    """
    if which not in ("v_max", "v_min"):
        raise ValueError("which must be 'v_max' or 'v_min'")
    v_b = bounds.v_max if which == "v_max" else bounds.v_min
    cruise_kind = ARC_VMAX if which == "v_max" else ARC_VMIN
    t = bc.horizon
    if t < _MIN_HORIZON:
        raise DegenerateHorizonError(f"horizon {t:.3g} s below {_MIN_HORIZON} s")
    dp = bc.distance
    v0_off = bc.v0 - v_b
    vt = bc.terminal_speed
    vt_off = None if vt is None else vt - v_b

    def cruise_only() -> TrajectoryCoefficients:
        if abs(dp - v_b * t) > _POS_TOL:
            raise InfeasibleHorizonError(
                f"cruise at {v_b:.3f} m/s covers {v_b * t:.3f} m, needs {dp:.3f} m")
        seg = ArcSegment(cruise_kind, bc.t0, bc.tm, 0.0, 0.0, v_b, bc.p0)
        return TrajectoryCoefficients(a=0.0, b=0.0, c=v_b, d=bc.p0,
                                      t0=bc.t0, tm=bc.tm, segments=(seg,))

    entry_flat = abs(v0_off) < _SPEED_EPS
    exit_flat = vt_off is None or abs(vt_off) < _SPEED_EPS

    if entry_flat and exit_flat:
        return cruise_only()

    if entry_flat:
        # cruise from t0, single exit arc to the fixed terminal speed
        t3 = 3.0 * (dp - v_b * t) / vt_off
        if t3 < -_TIME_EPS or t3 > t + _TIME_EPS:
            raise InfeasibleHorizonError(f"exit arc span {t3:.3f} s outside window {t:.3f} s")
        t3 = min(max(t3, _MIN_HORIZON), t)
        d_cruise = v_b * (t - t3)
        a3 = 2.0 * vt_off / (t3 * t3)
        cruise = ArcSegment(cruise_kind, bc.t0, bc.tm - t3, 0.0, 0.0, v_b, bc.p0)
        exit_arc = ArcSegment(ARC_UNCONSTRAINED, bc.tm - t3, bc.tm,
                              a3, 0.0, v_b, bc.p0 + d_cruise)
        return TrajectoryCoefficients(a=0.0, b=0.0, c=v_b, d=bc.p0,
                                      t0=bc.t0, tm=bc.tm, segments=(cruise, exit_arc))

    if exit_flat:
        # entry arc, then cruise rides the bound to tm (free terminal lands
        # on the bound; fixed terminal equal to the bound is the same shape)
        t1 = 3.0 * (dp - v_b * t) / v0_off
        if t1 < -_TIME_EPS or t1 > t + _TIME_EPS:
            raise InfeasibleHorizonError(f"entry arc span {t1:.3f} s outside window {t:.3f} s")
        t1 = min(max(t1, _MIN_HORIZON), t)
        entry = _entry_arc(bc, v_b, t1)
        d_entry = t1 * (bc.v0 + 2.0 * v_b) / 3.0
        cruise = ArcSegment(cruise_kind, bc.t0 + t1, bc.tm, 0.0, 0.0, v_b, bc.p0 + d_entry)
        return TrajectoryCoefficients(a=entry.a, b=entry.b, c=bc.v0, d=bc.p0,
                                      t0=bc.t0, tm=bc.tm, segments=(entry, cruise))

    ratio = vt_off / v0_off
    if ratio < 0:
        raise InfeasibleHorizonError(
            "boundary speeds straddle the bound; no single cruise arc fits")
    k = math.sqrt(ratio)
    t1 = 3.0 * (dp - v_b * t) / (v0_off + k * vt_off)
    t3 = k * t1
    if t1 < _TIME_EPS or t3 < 0 or t1 + t3 > t + _TIME_EPS:
        raise InfeasibleHorizonError(
            f"arc spans T1={t1:.3f} s, T3={t3:.3f} s do not fit window {t:.3f} s")
    cruise_span = max(t - t1 - t3, 0.0)
    entry = _entry_arc(bc, v_b, t1)
    d_entry = t1 * (bc.v0 + 2.0 * v_b) / 3.0
    d_cruise = v_b * cruise_span
    a3 = 2.0 * vt_off / (t3 * t3)
    cruise = ArcSegment(cruise_kind, bc.t0 + t1, bc.t0 + t1 + cruise_span,
                        0.0, 0.0, v_b, bc.p0 + d_entry)
    exit_arc = ArcSegment(ARC_UNCONSTRAINED, bc.tm - t3, bc.tm,
                          a3, 0.0, v_b, bc.p0 + d_entry + d_cruise)
    return TrajectoryCoefficients(a=entry.a, b=entry.b, c=bc.v0, d=bc.p0,
                                  t0=bc.t0, tm=bc.tm, segments=(entry, cruise, exit_arc))


def solve_bounded(bc: BoundaryConditions, bounds: Bounds) -> TrajectoryCoefficients:
    """One full solve attempt: unconstrained shape, then a cruise arc if a
    single speed bound binds.

    Returns a plan with no bound violations. Raises InfeasibleHorizonError
    when the window cannot be met cleanly; its ``partial`` attribute holds
    the least-bad plan (arc-pieced if that step succeeded, otherwise the
    unconstrained shape) for callers that must execute something anyway.
    """
    coeffs = solve_unconstrained(bc)
    speed_hits = {h.constraint for h in check_feasibility(coeffs, bounds)
                  if h.constraint in ("v_max", "v_min")}
    try:
        if speed_hits == {"v_max"}:
            coeffs = solve_with_speed_arc(bc, bounds, "v_max")
        elif speed_hits == {"v_min"}:
            coeffs = solve_with_speed_arc(bc, bounds, "v_min")
        elif speed_hits:
            raise InfeasibleHorizonError("both speed bounds violated")
    except InfeasibleHorizonError as exc:
        if exc.partial is None:
            exc.partial = coeffs
        raise
    if check_feasibility(coeffs, bounds):
        raise InfeasibleHorizonError("control bound binds over the window",
                                     partial=coeffs)
    return coeffs
