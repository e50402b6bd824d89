"""Closed-loop intersection simulation: arrivals, control, auditing, scores.

The simulator advances the eight-movement intersection in fixed steps of
``t_s`` seconds.  Each step it admits Poisson arrivals at the control-zone
boundary, rebuilds the per-movement planning problems from the nearest
tracked vehicles, invokes the configured controller (joint timing and
trajectory coordination, or a fixed-cycle plan with trajectory choice only),
and applies the first planned input of every tracked vehicle.  Vehicles
behind the tracked set follow a worst-case car-following governor.  Vehicles
past the stop line first finish the input tail of their last plan (the
trajectory the optimizer certified against the signal and the vehicle
ahead, which settles at the desired speed), then hold the desired speed
with a saturating tracker until they leave the zone; executing the
certified tail rather than a bare speed tracker keeps the headway audit
valid for platoons that cross nose to tail at different speeds.

Every step an audit re-checks what the planner is supposed to guarantee:
headway gaps at the new states, stop-line crossings only inside green
intervals, the executed timing against the ring constraint system, and the
stability of committed phases across replans.  A violation raises
:class:`AuditError` with a diagnostic dump; it indicates a bug, not an
expected runtime condition.

Determinism: all randomness flows from one seeded generator consumed in a
fixed order inside the sequential loop, so identical scenarios (including
the seed) reproduce bit-identical records and output files.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .coordinator import SQPConfig, choose_trajectories, coordinate
from .dynamics import VehicleParams, VehicleState, VehicleTrack, step_dynamics
from .movement import MovementProblem, PlannedVehicle
from .qp import IPSettings
from .ring import (
    PhaseCommit,
    RingConfig,
    TimingConstraintSystem,
    assemble_timing_constraints,
    baseline_fixed_cycle_timing,
    committed_phases,
    roll_horizon,
    validate_timing,
    write_signal_csv,
)
from .scenario import Scenario, scenario_hash

logger = logging.getLogger(__name__)

__all__ = [
    "AuditError",
    "Scores",
    "SimRecord",
    "VehicleLog",
    "GRAVITY",
    "DEFAULT_HORIZON",
    "TRACKED_CAP",
    "fuel_rate",
    "brake_curve",
    "admission_speed",
    "simulate",
    "verify_record",
    "compute_scores",
    "write_trajectories_csv",
    "write_scores_document",
    "write_signal_csv",
]

GRAVITY = 9.8066  # m/s^2; the constant the fuel model was calibrated with
DEFAULT_HORIZON = 55  # knots at t_s = 2 s cover the latest referenced signal instant
TRACKED_CAP = 10  # nearest vehicles per movement handed to the trajectory planner

# The governor and the admission rule plan to these padded limits so that a
# vehicle promoted into the tracked set always satisfies the planner's own
# margined rows; the audit checks the unpadded limits with a small slack.
HEADWAY_MARGIN = 1e-4
LINE_MARGIN = 1e-4
AUDIT_GAP_TOL = 1e-6  # m
AUDIT_LINE_TOL = 1e-6  # m
AUDIT_TIMING_TOL = 1e-9


class AuditError(RuntimeError):
    """The executed state violates a property the planner must guarantee."""


# --- fuel model ---------------------------------------------------------------

def fuel_rate(v: float, u: float, sc: Scenario) -> float:
    """Instantaneous fuel use (fuel units per second) of the power model.

    Resistance sums the aerodynamic, rolling, and grade terms; wheel power
    adds the inertial term with a 1.04 rotating-mass factor and converts
    through the driveline efficiency.  Negative power burns the idle rate.
    """
    R = (
        0.5 * sc.rho_kgpm3 * sc.c_d * sc.a_f_m2 * v * v
        + (sc.c_r / 1000.0) * sc.m_kg * GRAVITY * (sc.c1 * v + sc.c2)
        + sc.m_kg * GRAVITY * math.tan(sc.theta_rad)
    )
    P = (R + 1.04 * sc.m_kg * u) * v / (1000.0 * sc.eta)
    if P < 0:
        return sc.alpha0
    return sc.alpha0 + sc.alpha1 * P + sc.alpha2 * P * P


# --- worst-case car-following kinematics ---------------------------------------

def _brake_step(state: VehicleState, params: VehicleParams, dt: float) -> VehicleState:
    """One hardest-braking step that cannot push the speed below zero."""
    return step_dynamics(state, max(params.u_min, -state.v / dt), dt)


def _brake_horizon(params: VehicleParams, dt: float) -> int:
    """Steps after which any admissible speed has braked to a standstill."""
    return int(math.ceil(params.v_max / (-params.u_min * dt))) + 1


def brake_curve(state: VehicleState, params: VehicleParams, dt: float, steps: int) -> list[float]:
    """Knot positions under non-reversing maximum braking; nondecreasing."""
    out = [state.p]
    s = state
    for _ in range(steps):
        s = _brake_step(s, params, dt)
        out.append(s.p)
    return out


def _safe_behind(
    follower: VehicleState,
    leader: VehicleState,
    params: VehicleParams,
    dt: float,
    gap: float,
) -> bool:
    """True when simultaneous hardest braking keeps ``gap`` at every knot.

    This is the exact discrete-time counterpart of the stopping-distance
    rule: it is preserved when the follower brakes hardest no matter what
    the leader does, because braking curves are monotone in the start state
    and one admissible step followed by braking dominates braking outright.
    """
    m = _brake_horizon(params, dt)
    bf = brake_curve(follower, params, dt, m)
    bl = brake_curve(leader, params, dt, m)
    return all(f <= l - gap for f, l in zip(bf, bl))


def admission_speed(
    draw: float, gap: float, v_lead: float, params: VehicleParams, dt: float
) -> float:
    """Largest admissible entry speed not exceeding the drawn one.

    The continuous stopping-distance rule caps the speed so the entrant's
    maximum-braking stopping point stays a headway behind the leader's; the
    executed dynamics brake in whole steps and stop up to ``|u_min| dt^2/8``
    later, so the cap is tightened to the largest speed whose knot-wise
    braking curve keeps the padded gap everywhere (found by bisection; the
    check is monotone in the speed).
    """
    a = -params.u_min
    h_eff = params.headway + 2.0 * HEADWAY_MARGIN
    cont = math.sqrt(max(2.0 * a * (gap - h_eff) + v_lead * v_lead, 0.0))
    hi = min(draw, cont, params.v_max)
    leader = VehicleState(gap, v_lead)  # the entrant sits at the origin
    if _safe_behind(VehicleState(0.0, hi), leader, params, dt, h_eff):
        return hi
    lo = 0.0  # always safe: the gap is at least the padded headway
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _safe_behind(VehicleState(0.0, mid), leader, params, dt, h_eff):
            lo = mid
        else:
            hi = mid
    return lo


def _tracker_input(state: VehicleState, params: VehicleParams, dt: float) -> float:
    """Saturating proportional control toward the desired speed."""
    return min(max((params.v_desired - state.v) / dt, params.u_min), params.u_max)


def _tracker_rollout(
    state: VehicleState, params: VehicleParams, dt: float, steps: int
) -> tuple[float, ...]:
    """Knot positions of the desired-speed tracker; exact for downstream cars."""
    out = [state.p]
    s = state
    for _ in range(steps):
        s = step_dynamics(s, _tracker_input(s, params, dt), dt)
        out.append(s.p)
    return tuple(out)


def _governor_input(
    state: VehicleState,
    leader: VehicleState,
    params: VehicleParams,
    dt: float,
    stop_line: float,
) -> float:
    """Queue-hold input for vehicles behind the tracked set.

    Picks the largest non-reversing acceleration toward the desired speed
    whose next state stays safe against a hardest-braking leader and whose
    own braking curve stops short of the line.  Both checks are monotone in
    the input, so bisection finds the boundary; the hardest-braking fallback
    is always feasible because the same invariants held one step earlier.
    """
    h_eff = params.headway + 2.0 * HEADWAY_MARGIN
    line = stop_line - 2.0 * LINE_MARGIN
    lead_next = _brake_step(leader, params, dt)
    m = _brake_horizon(params, dt)
    bl = brake_curve(lead_next, params, dt, m)

    def ok(u: float) -> bool:
        bf = brake_curve(step_dynamics(state, u, dt), params, dt, m)
        if bf[-1] > line:  # the curve is nondecreasing, the limit settles it
            return False
        return all(f <= l - h_eff for f, l in zip(bf, bl))

    lo = max(params.u_min, -state.v / dt)
    hi = min(params.u_max, max((params.v_desired - state.v) / dt, lo))
    if ok(hi):
        return hi
    if not ok(lo):
        raise AuditError(
            f"queue-hold invariant lost: follower {state} cannot brake clear of "
            f"leader {leader} / line {stop_line}"
        )
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


# --- record types ---------------------------------------------------------------

@dataclass
class VehicleLog:
    """Knot-wise trace of one vehicle: state at each step plus the input held
    from it.  Event times are interpolated along the exact step quadratics."""

    vid: int
    movement: int
    entry_time: float
    drawn_speed: float  # pre-admission uniform draw
    entry_speed: float
    times: list[float] = field(default_factory=list)
    positions: list[float] = field(default_factory=list)
    speeds: list[float] = field(default_factory=list)
    inputs: list[float] = field(default_factory=list)
    cross_time: float | None = None
    exit_time: float | None = None


@dataclass
class SimRecord:
    """Everything one run produced: per-vehicle traces, realized greens, and
    bookkeeping needed for conservation checks and deterministic replay."""

    scenario: Scenario
    steps: int
    vehicles: list[VehicleLog]
    realized: list[tuple[int, int, float, float]]  # movement, cycle, start, end
    deferred: int  # arrivals drawn but never admitted before the end
    active: list[int]  # vehicle ids still inside the zone at the end
    stats: dict[str, float] = field(default_factory=dict)  # not serialized

    def trajectory_rows(self) -> list[tuple[float, int, int, float, float, float]]:
        rows = [
            (t, log.movement, log.vid, p, v, u)
            for log in self.vehicles
            for t, p, v, u in zip(log.times, log.positions, log.speeds, log.inputs)
        ]
        rows.sort(key=lambda r: (r[0], r[1], r[2]))
        return rows


@dataclass(frozen=True)
class Scores:
    """Per-vehicle means over the scoring window of completed vehicles."""

    s_c: float
    s_t: float
    s_e: float
    vehicle_count: int
    window: str
    score_range_m: float | None


# --- controllers ---------------------------------------------------------------

@dataclass
class PlanStep:
    """One step's decisions plus the evidence the audit checks them against."""

    T: np.ndarray
    tracks: dict[int, list[VehicleTrack]]
    chosen_b: dict[int, int]
    system: TimingConstraintSystem
    frozen: dict[tuple[int, int], PhaseCommit]


class _ControllerBase:
    """Plan vector upkeep shared by both controllers: rolling the horizon and
    recording greens as they finish, with stable absolute cycle numbers."""

    def __init__(self, sc: Scenario, cfg: RingConfig, T0: np.ndarray):
        self.sc = sc
        self.cfg = cfg
        self.T = T0
        self.cycle_base = 0
        self.realized: dict[tuple[int, int], tuple[float, float]] = {}
        # ring-first starts pinned to (last recorded green end + clearance)
        # after a roll, until those greens start; without this the optimizer
        # could slide the fresh cycle over the clearance after history that
        # the timing vector no longer carries
        self._pin: dict[int, float] = {}

    def _record_ended(self, now: float) -> None:
        cfg = self.cfg
        for j in cfg.movements:
            for l in range(1, cfg.cycles + 1):
                s = float(self.T[cfg.index(j, "s", l)])
                e = float(self.T[cfg.index(j, "e", l)])
                if e > now + 1e-9:
                    continue
                key = (j, self.cycle_base + l)
                prev = self.realized.get(key)
                if prev is not None and prev != (s, e):
                    raise AuditError(f"realized green {key} rewritten: {prev} -> {(s, e)}")
                self.realized[key] = (s, e)

    def advance(self, now: float) -> None:
        cfg = self.cfg
        self._record_ended(now)
        ended = sum(
            1
            for l in range(1, cfg.cycles + 1)
            if max(self.T[cfg.index(j, "e", l)] for j in cfg.movements) <= now + 1e-9
        )
        if ended >= cfg.cycles:
            raise AuditError("plan fell behind by a whole horizon of cycles")
        if ended:
            # the plan's own wrap row made this start equal the rolled-off
            # cycle's last green end plus the clearance; keep that promise
            for ring in (cfg.ring1, cfg.ring2):
                self._pin[ring[0]] = float(self.T[cfg.index(ring[0], "s", 1 + ended)])
        self.T, _ = roll_horizon(cfg, self.T, now, self.sc.t_clr_s)
        self.cycle_base += ended

    def frozen_phases(self, now: float) -> dict[tuple[int, int], PhaseCommit]:
        """Started phases plus the pinned first starts of freshly rolled cycles."""
        frozen = committed_phases(self.cfg, self.T, now)
        for j in list(self._pin):
            if (j, 1) in frozen:
                del self._pin[j]  # started; the commitment now carries the value
            else:
                frozen[(j, 1)] = PhaseCommit(self._pin[j])
        return frozen

    def realized_rows(self, now: float) -> list[tuple[int, int, float, float]]:
        """All greens started by ``now``; still-open ones carry the planned end."""
        self._record_ended(now)
        rows = [(j, c, s, e) for (j, c), (s, e) in self.realized.items()]
        cfg = self.cfg
        for j in cfg.movements:
            for l in range(1, cfg.cycles + 1):
                s = float(self.T[cfg.index(j, "s", l)])
                e = float(self.T[cfg.index(j, "e", l)])
                if s <= now + 1e-9 < e:
                    rows.append((j, self.cycle_base + l, s, e))
        rows.sort(key=lambda r: (r[0], r[1]))
        return rows


class CoordinatedController(_ControllerBase):
    """Joint timing/trajectory replanning from the rolled previous plan."""

    def __init__(
        self,
        sc: Scenario,
        cfg: RingConfig,
        settings: IPSettings | None = None,
        sqp: SQPConfig | None = None,
        map_fn=map,
    ):
        # feasible warm start: demand-proportional greens at a mid-range cycle
        cycle0 = 4.0 * sc.t_clr_s + 2.0 * (sc.g_min_s + sc.g_max_s)
        timing = baseline_fixed_cycle_timing(
            cfg, sc.demand_by_movement, cycle0, sc.g_min_s, sc.g_max_s, sc.t_clr_s
        )
        super().__init__(sc, cfg, timing.to_vector(cfg))
        self.settings = settings
        self.sqp = sqp or SQPConfig()
        self.map_fn = map_fn
        self.iterations = 0

    def plan(self, now: float, problems: dict[int, MovementProblem]) -> PlanStep:
        self.advance(now)
        sc = self.sc
        frozen = self.frozen_phases(now)
        system = assemble_timing_constraints(
            self.cfg, sc.g_min_s, sc.g_max_s, sc.t_clr_s, now=now, frozen=frozen
        )
        result = coordinate(
            problems, system, self.T, now,
            config=self.sqp, settings=self.settings, map_fn=self.map_fn,
        )
        self.iterations += result.iterations
        self.T = result.T
        return PlanStep(result.T, result.tracks, result.chosen_b, system, frozen)


class FixedCycleController(_ControllerBase):
    """Fixed demand-proportional cycle; only the trajectories are chosen."""

    def __init__(
        self,
        sc: Scenario,
        cfg: RingConfig,
        settings: IPSettings | None = None,
        beta: float = 10.0,
        map_fn=map,
    ):
        timing = baseline_fixed_cycle_timing(
            cfg, sc.demand_by_movement, sc.cycle_length_s,
            sc.g_min_s, sc.g_max_s, sc.t_clr_s,
        )
        super().__init__(sc, cfg, timing.to_vector(cfg))
        self.settings = settings
        self.beta = beta
        self.map_fn = map_fn

    def plan(self, now: float, problems: dict[int, MovementProblem]) -> PlanStep:
        self.advance(now)
        sc = self.sc
        frozen = self.frozen_phases(now)
        system = assemble_timing_constraints(
            self.cfg, sc.g_min_s, sc.g_max_s, sc.t_clr_s, now=now, frozen=frozen
        )
        tracks, chosen = choose_trajectories(
            problems, self.cfg, self.T, now,
            beta=self.beta, settings=self.settings, map_fn=self.map_fn,
        )
        return PlanStep(self.T.copy(), tracks, chosen, system, frozen)


# --- in-loop audit helpers -------------------------------------------------------

def _crossing_offset(p: float, v: float, u: float, target: float, dt: float) -> float | None:
    """First offset in [0, dt] at which ``p + v t + u t^2/2`` reaches target.

    Uses the subtraction-free root form, exact for any sign of ``u``; None
    when the quadratic stays below the target for the whole step.
    """
    c = p - target
    if c >= 0:
        return 0.0
    disc = v * v - 2.0 * u * c
    if disc < 0:
        return None
    denom = v + math.sqrt(disc)
    if denom <= 0:
        return None
    tau = -2.0 * c / denom
    return tau if tau <= dt + 1e-9 else None


def _red_excess(
    t_x: float,
    now: float,
    p: float,
    v: float,
    u: float,
    dt: float,
    stop_line: float,
    intervals: list[tuple[float, float]],
) -> float:
    """Meters by which a crossing outside every green misses the nearest
    boundary, measured along the vehicle's own step quadratic."""
    best = math.inf
    for s, e in intervals:
        if s - 1e-12 <= t_x <= e + 1e-12:
            return 0.0
        tb = min(max(s if t_x < s else e, now), now + dt)
        tau = tb - now
        pos = p + v * tau + 0.5 * u * tau * tau
        best = min(best, abs(pos - stop_line))
    return best


def _realized_violations(
    rows: list[tuple[int, int, float, float]],
    cfg: RingConfig,
    g_min: float,
    g_max: float,
    t_clr: float,
    tol: float = AUDIT_TIMING_TOL,
) -> list[str]:
    """Ring-relation violations within the realized green record.

    Duration bounds per green; exact clearance between consecutive greens in
    a ring (including the cycle wrap); equal ends across each barrier pair.
    Relations are checked only between greens that are both on record.
    """
    by = {(j, c): (s, e) for j, c, s, e in rows}
    out = []
    for (j, c), (s, e) in sorted(by.items()):
        if not g_min - tol <= e - s <= g_max + tol:
            out.append(f"green duration movement {j} cycle {c}: {e - s!r}")
    cycles = sorted({c for _, c in by})
    for ring in (cfg.ring1, cfg.ring2):
        for c in cycles:
            for pred, succ in zip(ring, ring[1:]):
                if (pred, c) in by and (succ, c) in by:
                    gap = by[(succ, c)][0] - by[(pred, c)][1]
                    if abs(gap - t_clr) > tol:
                        out.append(f"clearance {pred}->{succ} cycle {c}: {gap!r}")
            if (ring[-1], c) in by and (ring[0], c + 1) in by:
                gap = by[(ring[0], c + 1)][0] - by[(ring[-1], c)][1]
                if abs(gap - t_clr) > tol:
                    out.append(f"clearance {ring[-1]}->{ring[0]} wrap cycle {c}: {gap!r}")
    for a, b in cfg.barrier_pairs:
        for c in cycles:
            if (a, c) in by and (b, c) in by:
                d = by[(a, c)][1] - by[(b, c)][1]
                if abs(d) > tol:
                    out.append(f"barrier ({a},{b}) cycle {c} ends differ by {d!r}")
    return out


# --- the simulation loop ---------------------------------------------------------

@dataclass
class _Car:
    vid: int
    movement: int
    state: VehicleState
    log: VehicleLog
    # remaining inputs of the last plan; consumed downstream of the stop line
    tail: tuple[float, ...] | None = None
    tail_next: int = 0


def _future_positions(car: _Car, params: VehicleParams, dt: float, steps: int) -> tuple[float, ...]:
    """Exact knot positions a downstream vehicle will realize: the rest of
    its certified plan, then the desired-speed tracker."""
    out = [car.state.p]
    s = car.state
    i = car.tail_next
    for _ in range(steps):
        if car.tail is not None and i < len(car.tail):
            u = car.tail[i]
            i += 1
        else:
            u = _tracker_input(s, params, dt)
        s = step_dynamics(s, u, dt)
        out.append(s.p)
    return tuple(out)


def simulate(
    sc: Scenario,
    *,
    horizon: int = DEFAULT_HORIZON,
    tracked_cap: int = TRACKED_CAP,
    cfg: RingConfig | None = None,
    settings: IPSettings | None = None,
    sqp: SQPConfig | None = None,
    map_fn=map,
) -> SimRecord:
    """Run the closed loop for the scenario's duration and return the record.

    Raises :class:`AuditError` on any safety-audit failure and propagates
    solver failures; both indicate bugs rather than expected outcomes.
    """
    cfg = cfg or RingConfig()
    params = sc.vehicle_params()
    dt = sc.t_s_s
    X = sc.x_zone_m
    h_eff = params.headway + 2.0 * HEADWAY_MARGIN
    steps = int(round(sc.duration_s / dt))
    rng = np.random.default_rng(sc.seed)
    if sc.controller == "coordinated":
        controller: _ControllerBase = CoordinatedController(
            sc, cfg, settings=settings, sqp=sqp, map_fn=map_fn
        )
    else:
        controller = FixedCycleController(sc, cfg, settings=settings, map_fn=map_fn)

    active: list[_Car] = []
    logs: list[VehicleLog] = []
    queues: dict[int, deque[float]] = {j: deque() for j in cfg.movements}
    next_vid = 0
    plan_seconds = 0.0

    for k in range(steps):
        now = k * dt

        # arrivals: draw in fixed movement order, then admit while the entry
        # is clear; blocked arrivals wait in FIFO order with their drawn speed
        for j in cfg.movements:
            lam = sc.demand[j - 1] * dt / 3600.0
            if lam > 0:
                for _ in range(int(rng.poisson(lam))):
                    queues[j].append(float(rng.uniform(sc.v_desired_mps - 5.0, sc.v_max_mps)))
            while queues[j]:
                rear = min(
                    (c for c in active if c.movement == j),
                    key=lambda c: c.state.p,
                    default=None,
                )
                if rear is not None and rear.state.p < h_eff:
                    break
                draw = queues[j][0]
                if rear is None:
                    v0 = min(draw, params.v_max)
                else:
                    v0 = admission_speed(draw, rear.state.p, rear.state.v, params, dt)
                queues[j].popleft()
                log = VehicleLog(next_vid, j, now, draw, v0)
                active.append(_Car(next_vid, j, VehicleState(0.0, v0), log))
                logs.append(log)
                next_vid += 1

        # tracked sets and planning problems, front to back
        tracked: dict[int, list[_Car]] = {}
        governed: list[tuple[_Car, _Car]] = []
        problems: dict[int, MovementProblem] = {}
        for j in cfg.movements:
            cars = sorted(
                (c for c in active if c.movement == j), key=lambda c: -c.state.p
            )
            approach = [c for c in cars if c.state.p < X]
            lead = approach[:tracked_cap]
            tracked[j] = lead
            governed += [
                (approach[i], approach[i - 1])
                for i in range(tracked_cap, len(approach))
            ]
            ghost = None
            if lead:
                downstream = [c for c in cars if c.state.p >= X]
                if downstream:
                    ghost = _future_positions(downstream[-1], params, dt, horizon)
            problems[j] = MovementProblem(
                movement=j,
                vehicles=tuple(PlannedVehicle(c.state, params) for c in lead),
                horizon=horizon,
                t_s=dt,
                stop_line=X,
                q_u=sc.q_u,
                q_v=sc.q_v,
                leader_positions=ghost,
                headway_margin=HEADWAY_MARGIN,
                line_margin=LINE_MARGIN,
            )

        t0 = time.perf_counter()
        plan = controller.plan(now, problems)
        plan_seconds += time.perf_counter() - t0

        bad = validate_timing(plan.T, plan.system, tol=AUDIT_TIMING_TOL)
        if bad:
            raise AuditError(f"t={now}: plan violates timing rows {[str(b) for b in bad]}")
        for (j, l), commit in plan.frozen.items():
            s = plan.T[cfg.index(j, "s", l)]
            e = plan.T[cfg.index(j, "e", l)]
            if s != commit.start or (commit.end is not None and e != commit.end):
                raise AuditError(
                    f"t={now}: committed phase ({j},{l}) rewritten: "
                    f"({commit.start},{commit.end}) -> ({s},{e})"
                )

        # inputs: planned for tracked, queue-hold governor behind the cap,
        # certified plan tail (then the tracker) past the line
        inputs: dict[int, float] = {}
        for j in cfg.movements:
            plan_tracks = plan.tracks.get(j, [])
            if len(plan_tracks) != len(tracked[j]):
                raise AuditError(
                    f"t={now}: movement {j} returned {len(plan_tracks)} tracks "
                    f"for {len(tracked[j])} vehicles"
                )
            for car, track in zip(tracked[j], plan_tracks):
                inputs[car.vid] = float(track.inputs[0])
                car.tail = tuple(float(u) for u in track.inputs)
                car.tail_next = 1
        for car, leader in governed:
            inputs[car.vid] = _governor_input(car.state, leader.state, params, dt, X)
        for car in active:
            if car.vid not in inputs:
                if car.tail is not None and car.tail_next < len(car.tail):
                    inputs[car.vid] = car.tail[car.tail_next]
                    car.tail_next += 1
                else:
                    inputs[car.vid] = _tracker_input(car.state, params, dt)

        # advance one step, log the applied inputs, fire the crossing audits
        gone: list[_Car] = []
        for car in active:
            u = inputs[car.vid]
            pre = car.state
            post = step_dynamics(pre, u, dt)
            car.log.times.append(now)
            car.log.positions.append(pre.p)
            car.log.speeds.append(pre.v)
            car.log.inputs.append(u)
            if pre.p < X <= post.p:
                tau = _crossing_offset(pre.p, pre.v, u, X, dt)
                if tau is None:
                    raise AuditError(f"t={now}: vehicle {car.vid} crossing root lost")
                t_x = now + tau
                greens = [
                    (float(plan.T[cfg.index(car.movement, "s", l)]),
                     float(plan.T[cfg.index(car.movement, "e", l)]))
                    for l in range(1, cfg.cycles + 1)
                ]
                excess = _red_excess(t_x, now, pre.p, pre.v, u, dt, X, greens)
                if excess > AUDIT_LINE_TOL:
                    raise AuditError(
                        f"t={now}: vehicle {car.vid} movement {car.movement} crossed "
                        f"the line at t={t_x:.6f} outside every green {greens} "
                        f"(excess {excess:.3e} m, state p={pre.p:.6f} v={pre.v:.6f} u={u:.6f})"
                    )
                car.log.cross_time = t_x
            if post.p >= 2.0 * X:
                tau = _crossing_offset(pre.p, pre.v, u, 2.0 * X, dt)
                car.log.exit_time = now + (dt if tau is None else tau)
                gone.append(car)
            car.state = post
        for car in gone:
            active.remove(car)

        # headway audit at the new knot
        for j in cfg.movements:
            cars = sorted(
                (c for c in active if c.movement == j), key=lambda c: -c.state.p
            )
            for front, rear in zip(cars, cars[1:]):
                gap = front.state.p - rear.state.p
                if gap < params.headway - AUDIT_GAP_TOL:
                    raise AuditError(
                        f"t={now + dt}: movement {j} gap {gap:.9f} m between "
                        f"vehicles {front.vid} and {rear.vid} (need {params.headway})"
                    )

    end = steps * dt
    realized = controller.realized_rows(end)
    ring_bad = _realized_violations(realized, cfg, sc.g_min_s, sc.g_max_s, sc.t_clr_s)
    if ring_bad:
        raise AuditError("realized signal record inconsistent: " + "; ".join(ring_bad))

    exited = sum(log.exit_time is not None for log in logs)
    if exited + len(active) != len(logs):
        raise AuditError(
            f"conservation broken: {len(logs)} admitted, {exited} exited, "
            f"{len(active)} still active"
        )

    stats = {"plan_seconds": plan_seconds, "steps": float(steps)}
    if isinstance(controller, CoordinatedController):
        stats["sqp_iterations"] = float(controller.iterations)
    return SimRecord(
        scenario=sc,
        steps=steps,
        vehicles=logs,
        realized=realized,
        deferred=sum(len(q) for q in queues.values()),
        active=sorted(c.vid for c in active),
        stats=stats,
    )


# --- independent record verification ---------------------------------------------

def verify_record(record: SimRecord, cfg: RingConfig | None = None) -> list[str]:
    """Re-derive the safety properties from the raw record alone.

    Returns human-readable violations (empty certifies the run).  The checks
    mirror the in-loop audit but consume only the logged data, so they also
    catch bookkeeping errors in the logs themselves: kinematic consistency
    of every trace, event ordering, knot-wise headways, stop-line crossings
    against the realized greens, ring relations of the realized record, and
    vehicle conservation.
    """
    sc = record.scenario
    cfg = cfg or RingConfig()
    dt = sc.t_s_s
    X = sc.x_zone_m
    h = sc.h_m
    out: list[str] = []

    states: dict[tuple[int, int], list[tuple[float, int]]] = {}
    for log in record.vehicles:
        n = len(log.times)
        for i in range(n):
            t, p, v, u = log.times[i], log.positions[i], log.speeds[i], log.inputs[i]
            p2 = p + v * dt + 0.5 * u * dt * dt
            v2 = v + u * dt
            if i + 1 < n:
                if abs(log.positions[i + 1] - p2) > 1e-9 or abs(log.speeds[i + 1] - v2) > 1e-9:
                    out.append(f"vehicle {log.vid}: log breaks the dynamics at t={t}")
                if abs(log.times[i + 1] - (t + dt)) > 1e-9:
                    out.append(f"vehicle {log.vid}: non-contiguous log at t={t}")
            states.setdefault((round(t / dt), log.movement), []).append((p, log.vid))
            if i + 1 == n and p2 < 2.0 * X:  # still in the zone at the next knot
                states.setdefault((round(t / dt) + 1, log.movement), []).append((p2, log.vid))
        if log.cross_time is not None and not log.entry_time < log.cross_time:
            out.append(f"vehicle {log.vid}: crossing does not follow entry")
        if log.exit_time is not None:
            ref = log.cross_time if log.cross_time is not None else log.entry_time
            if not ref < log.exit_time:
                out.append(f"vehicle {log.vid}: exit does not follow {ref}")

    for (_, movement), cars in sorted(states.items()):
        cars.sort(key=lambda s: -s[0])
        for (pf, vf), (pr, vr) in zip(cars, cars[1:]):
            if pf - pr < h - AUDIT_GAP_TOL:
                out.append(
                    f"movement {movement}: gap {pf - pr:.9f} m between {vf} and {vr}"
                )

    greens: dict[int, list[tuple[float, float]]] = {}
    for j, _, s, e in record.realized:
        greens.setdefault(j, []).append((s, e))
    for log in record.vehicles:
        if log.cross_time is None:
            continue
        i = int(log.cross_time / dt)
        i = min(max(i, 0), len(log.times) - 1)
        excess = _red_excess(
            log.cross_time, log.times[i], log.positions[i], log.speeds[i],
            log.inputs[i], dt, X, greens.get(log.movement, []),
        )
        if excess > AUDIT_LINE_TOL:
            out.append(
                f"vehicle {log.vid} crossed at t={log.cross_time:.6f} outside the "
                f"realized greens of movement {log.movement} (excess {excess:.3e} m)"
            )

    out += _realized_violations(record.realized, cfg, sc.g_min_s, sc.g_max_s, sc.t_clr_s)

    exited = sum(log.exit_time is not None for log in record.vehicles)
    if exited + len(record.active) != len(record.vehicles):
        out.append("conservation: admitted != exited + active")
    return out


# --- scores ----------------------------------------------------------------------

def _boundary_time(log: VehicleLog, boundary: float, dt: float) -> float | None:
    """Interpolated instant the logged trajectory first reaches ``boundary``."""
    for t, p, v, u in zip(log.times, log.positions, log.speeds, log.inputs):
        if p >= boundary:
            return t
        tau = _crossing_offset(p, v, u, boundary, dt)
        if tau is not None:
            return t + tau
    return None


def compute_scores(
    record: SimRecord,
    window: str | None = None,
    score_range: float | None = None,
) -> Scores | None:
    """Average tracking cost, travel time, and fuel over completed vehicles.

    The scoring window of a vehicle runs from its zone entry (or from where
    it crossed ``x_zone - score_range``) to its stop-line crossing, or to its
    zone exit under the ``zone`` window.  Per-step cost terms are prorated by
    the fraction of the step inside the window; fuel integrates the rate over
    the seconds inside it.  ``None`` when no vehicle completed its window.
    """
    sc = record.scenario
    window = window or sc.score_window
    rng_m = sc.score_range_m if score_range is None else score_range
    dt = sc.t_s_s
    vd = sc.v_desired_mps
    boundary = None if rng_m is None else sc.x_zone_m - rng_m

    cost_t_fuel: list[tuple[float, float, float]] = []
    for log in record.vehicles:
        t_out = log.cross_time if window == "stopline" else log.exit_time
        if t_out is None:
            continue
        t_in = log.entry_time if boundary is None else _boundary_time(log, boundary, dt)
        if t_in is None or t_out <= t_in:
            continue
        cost = fuel = 0.0
        for t, v, u in zip(log.times, log.speeds, log.inputs):
            w = min(t + dt, t_out) - max(t, t_in)
            if w <= 0.0:
                continue
            cost += (sc.q_u * u * u + sc.q_v * (v - vd) ** 2) * (w / dt)
            fuel += fuel_rate(v, u, sc) * w
        cost_t_fuel.append((cost, t_out - t_in, fuel))

    if not cost_t_fuel:
        return None
    n = len(cost_t_fuel)
    return Scores(
        s_c=sum(c for c, _, _ in cost_t_fuel) / n,
        s_t=sum(t for _, t, _ in cost_t_fuel) / n,
        s_e=sum(f for _, _, f in cost_t_fuel) / n,
        vehicle_count=n,
        window=window,
        score_range_m=rng_m,
    )


# --- output files -----------------------------------------------------------------

def write_trajectories_csv(record: SimRecord, path) -> None:
    """Knot-wise vehicle states and applied inputs, 6-decimal fixed point."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "movement", "vehicle_id", "position_m", "speed_mps", "accel_mps2"])
        for t, j, vid, p, v, u in record.trajectory_rows():
            w.writerow([f"{t:.6f}", j, vid, f"{p:.6f}", f"{v:.6f}", f"{u:.6f}"])


def write_scores_document(scores: Scores | None, sc: Scenario, path) -> None:
    """Scores as a small TOML document; score fields are absent when no
    vehicle completed its window rather than reported as zero."""
    lines = []
    if scores is not None:
        lines += [
            f"s_c = {scores.s_c!r}",
            f"s_t = {scores.s_t!r}",
            f"s_e = {scores.s_e!r}",
        ]
    lines += [
        f"vehicle_count = {scores.vehicle_count if scores else 0}",
        f'scenario_hash = "{scenario_hash(sc)}"',
        f"seed = {sc.seed}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
