"""Per-movement trajectory optimization for one candidate crossing count.

For one movement the planner decides, for each candidate count ``b``, the
jointly optimal trajectories of all tracked vehicles given that exactly the
first ``b`` of them cross the stop line during the currently served green
window.  Each candidate is a convex QP over the stacked vehicle decision
vectors; the signal instants (green start, green end, next green start) enter
only through a handful of inequality rows, whose coefficients are the
quadratic position interpolants at those instants.  Recording the rows'
parameter derivatives lets the QP solver return the value function's gradient
and Hessian with respect to the movement's timing entries, which is what the
upper-level timing optimizer consumes.

Times here are relative to the planning instant: the horizon is ``[0, M*t_s]``
and signal instants are offsets into it.  Shifting all instants by a constant
does not change derivatives, so the caller may hold absolute timings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .dynamics import (
    VehicleParams,
    VehicleState,
    VehicleTrack,
    box_constraint_rows,
    input_col,
    position_col,
    slot_size,
    speed_col,
)
from .qp import IPSettings, QPInstance, RowParamDep, solve_qp, value_gradient, value_hessian

__all__ = [
    "PlannedVehicle",
    "MovementProblem",
    "SignalWindow",
    "MovementQP",
    "ValueFunctionSample",
    "SolverFailure",
    "NoFeasibleCrossing",
    "assemble_movement_qp",
    "solve_movement",
    "enumerate_b",
    "enumerate_batch",
    "branch_lower_bound",
    "crossing_jobs",
    "finalize_samples",
    "tracks_from_solution",
    "max_position",
    "min_position",
]

SURROGATE_MARGIN = 10.0  # infeasible branches sit this many e-foldings above the best
PRUNE_GAP = 40.0  # branches certified this many e-foldings above the best carry no fp weight


class SolverFailure(RuntimeError):
    """The QP solver stopped without either converging or proving infeasibility."""


class NoFeasibleCrossing(RuntimeError):
    """Every candidate crossing count for a movement is infeasible."""


class _HorizonInfeasible(Exception):
    """A must-cross instant lies beyond the planning horizon."""


@dataclass(frozen=True)
class PlannedVehicle:
    state: VehicleState
    params: VehicleParams


@dataclass(frozen=True)
class MovementProblem:
    """Static data of one movement's planning problem at one instant.

    ``vehicles`` are ordered front to back and must all be upstream of the
    stop line with at least their headway between consecutive pairs.
    ``leader_positions``, when given, is the already-committed knot-wise
    position sequence of the nearest downstream vehicle (one that crossed
    earlier); the front vehicle keeps headway to it like to any leader.
    """

    movement: int
    vehicles: tuple[PlannedVehicle, ...]
    horizon: int
    t_s: float
    stop_line: float
    q_u: float = 2.5
    q_v: float = 0.0153
    leader_positions: tuple[float, ...] | None = None
    # plans keep this much extra clearance beyond the hard limits so that
    # solver-tolerance-sized constraint slack can never be mistaken for a
    # safety violation when the executed trajectory is audited
    headway_margin: float = 1e-4
    line_margin: float = 1e-4

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.t_s <= 0:
            raise ValueError("need a positive horizon and step")
        if self.headway_margin < 0 or self.line_margin < 0:
            raise ValueError("margins must be nonnegative")
        if self.q_u < 0 or self.q_v < 0:
            raise ValueError("objective weights must be nonnegative")
        prev = None
        for veh in self.vehicles:
            p, v = veh.state.p, veh.state.v
            if p >= self.stop_line:
                raise ValueError("planned vehicles must start upstream of the stop line")
            if not veh.params.v_min - 1e-9 <= v <= veh.params.v_max + 1e-9:
                raise ValueError("initial speed outside the vehicle's speed bounds")
            if prev is not None and p > prev - veh.params.headway + 1e-9:
                raise ValueError("initial positions must leave at least the headway gap")
            prev = p
        if self.leader_positions is not None and len(self.leader_positions) != self.horizon + 1:
            raise ValueError("leader_positions must cover every knot")

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicles)


@dataclass(frozen=True)
class SignalWindow:
    """Signal instants of the served green, as offsets from the planning instant.

    ``start``/``end`` bound the green currently served; ``next_start`` is the
    following green's start (None when the plan holds no later green).  The
    ``*_index`` fields locate each instant inside the movement's timing
    sub-vector of size ``n_params``, which fixes the gradient/Hessian layout.
    """

    start: float
    end: float
    next_start: float | None
    start_index: int
    end_index: int
    next_start_index: int | None
    n_params: int

    def __post_init__(self) -> None:
        idx = [self.start_index, self.end_index]
        if self.next_start is not None:
            if self.next_start_index is None:
                raise ValueError("next_start needs an index")
            idx.append(self.next_start_index)
        if len(set(idx)) != len(idx) or not all(0 <= i < self.n_params for i in idx):
            raise ValueError("window indices must be distinct and within n_params")
        if self.end <= 0:
            raise ValueError("the served green must not have ended yet")


@dataclass
class MovementQP:
    """Assembled QP plus the parameter layout the sensitivities refer to."""

    qp: QPInstance
    param_names: tuple[str, ...]
    n_params: int


@dataclass
class ValueFunctionSample:
    b: int
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    feasible: bool
    tracks: list[VehicleTrack] | None = None
    diagnostic: str = ""
    pruned: bool = False  # skipped QP: certified lower bound stands in for the value


# --- kinematic reachability bounds -------------------------------------------

def max_position(p: float, v: float, tau: float, params: VehicleParams) -> float:
    """Largest position reachable at ``tau``: full throttle, then cruise at v_max."""
    t_sat = max((params.v_max - v) / params.u_max, 0.0)
    if tau <= t_sat:
        return p + v * tau + 0.5 * params.u_max * tau * tau
    reach = p + v * t_sat + 0.5 * params.u_max * t_sat * t_sat
    return reach + params.v_max * (tau - t_sat)


def min_position(p: float, v: float, tau: float, params: VehicleParams) -> float:
    """Smallest position reachable at ``tau``: full braking, then hold v_min."""
    t_sat = max((params.v_min - v) / params.u_min, 0.0)
    if tau <= t_sat:
        return p + v * tau + 0.5 * params.u_min * tau * tau
    reach = p + v * t_sat + 0.5 * params.u_min * t_sat * t_sat
    return reach + params.v_min * (tau - t_sat)


# --- assembly -----------------------------------------------------------------

@dataclass(frozen=True)
class _Skeleton:
    """Signal-independent part of the QP, shared across all (b, window)."""

    H: sp.csc_matrix
    f: np.ndarray
    A: sp.csc_matrix
    a: np.ndarray
    G0: sp.csc_matrix
    g0: np.ndarray
    kinds0: tuple[str, ...]
    constant: float
    n: int


@lru_cache(maxsize=64)
def _skeleton(prob: MovementProblem) -> _Skeleton:
    M, dt = prob.horizon, prob.t_s
    N = prob.n_vehicles
    slot = slot_size(M)
    n = N * slot

    h_diag = np.zeros(n)
    f = np.zeros(n)
    constant = 0.0
    for i, veh in enumerate(prob.vehicles):
        off = i * slot
        vd = veh.params.v_desired
        for k in range(M):
            h_diag[off + speed_col(k)] = 2.0 * prob.q_v
            f[off + speed_col(k)] = -2.0 * prob.q_v * vd
            h_diag[off + input_col(M, k)] = 2.0 * prob.q_u
        constant += M * prob.q_v * vd * vd

    # equalities: per vehicle, two pinned initial states then 2M shooting defects
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    rhs: list[float] = []
    r = 0
    for i, veh in enumerate(prob.vehicles):
        off = i * slot
        rows += [r, r + 1]
        cols += [off + position_col(0), off + speed_col(0)]
        vals += [1.0, 1.0]
        rhs += [-veh.state.p, -veh.state.v]
        r += 2
        for k in range(M):
            p0, v0 = off + position_col(k), off + speed_col(k)
            p1, v1 = off + position_col(k + 1), off + speed_col(k + 1)
            u = off + input_col(M, k)
            rows += [r] * 4
            cols += [p1, p0, v0, u]
            vals += [1.0, -1.0, -dt, -0.5 * dt * dt]
            rhs.append(0.0)
            r += 1
            rows += [r] * 3
            cols += [v1, v0, u]
            vals += [1.0, -1.0, -dt]
            rhs.append(0.0)
            r += 1
    A = sp.coo_matrix((vals, (rows, cols)), shape=(r, n)).tocsc()
    a = np.array(rhs)

    # inequalities independent of the signal: boxes, headway, downstream ghost
    rows, cols, vals = [], [], []
    offs: list[float] = []
    kinds: list[str] = []
    r = 0
    for i, veh in enumerate(prob.vehicles):
        off = i * slot
        for row in box_constraint_rows(M, veh.params):
            for c, cv in zip(row.cols, row.coeffs):
                rows.append(r)
                cols.append(off + c)
                vals.append(cv)
            offs.append(row.offset)
            kinds.append(row.kind)
            r += 1
    for i in range(N - 1):
        lead, follow = i * slot, (i + 1) * slot
        h = prob.vehicles[i + 1].params.headway
        for k in range(M + 1):
            rows += [r, r]
            cols += [follow + position_col(k), lead + position_col(k)]
            vals += [1.0, -1.0]
            # the margin cannot apply at k=0: the current gap may be exactly h
            offs.append(h + (prob.headway_margin if k else 0.0))
            kinds.append("headway")
            r += 1
    if prob.leader_positions is not None and N > 0:
        h = prob.vehicles[0].params.headway
        for k in range(M + 1):
            rows.append(r)
            cols.append(position_col(k))
            vals.append(1.0)
            offs.append(h + (prob.headway_margin if k else 0.0) - prob.leader_positions[k])
            kinds.append("ghost")
            r += 1
    G0 = sp.coo_matrix((vals, (rows, cols)), shape=(r, n)).tocsc()
    g0 = np.array(offs)

    H = sp.diags(h_diag, format="csc")
    return _Skeleton(H, f, A, a, G0, g0, tuple(kinds), constant, n)


def _position_row(M: int, slot_off: int, tau: float, t_s: float, sign: float):
    """Sparse row for sign * p(tau) and its derivative data w.r.t. tau."""
    k = min(int(math.floor(tau / t_s)), M - 1)
    delta = tau - k * t_s
    cols = (slot_off + position_col(k), slot_off + speed_col(k), slot_off + input_col(M, k))
    vals = (sign, sign * delta, sign * 0.5 * delta * delta)
    dep = dict(
        dcols=cols[1:], dvals=(sign, sign * delta),
        d2cols=cols[2:], d2vals=(sign,),
    )
    return cols, vals, dep


def assemble_movement_qp(prob: MovementProblem, b: int, window: SignalWindow) -> MovementQP:
    """Build the QP for crossing count ``b`` under the given green window.

    Signal rows keep every vehicle behind the line until the green starts,
    push the first ``b`` vehicles across before it ends, and hold the rest
    until the next green.  Rows whose instant precedes the planning time are
    dropped (the event already happened); rows whose instant lies beyond the
    horizon degrade to an end-of-horizon position bound with no parameter
    dependence, except that a must-cross instant beyond the horizon makes the
    whole candidate infeasible.
    """
    N = prob.n_vehicles
    if not 0 <= b <= N:
        raise ValueError(f"b={b} out of range for {N} vehicles")
    M, dt, X = prob.horizon, prob.t_s, prob.stop_line
    end_of_horizon = M * dt
    sk = _skeleton(prob)
    slot = slot_size(M)

    rows, cols, vals = [], [], []
    offs: list[float] = []
    kinds: list[str] = []
    deps: dict[str, list[RowParamDep]] = {}
    base = sk.g0.size
    r = 0

    def add(i_veh: int, tau: float, sign: float, kind: str, param: int | None) -> None:
        nonlocal r
        off = i_veh * slot
        x_eff = X - sign * prob.line_margin  # hold rows stop short, cross rows overshoot
        if tau > end_of_horizon + 1e-12:
            # conservative stand-in: bound the end-of-horizon position instead
            rows.append(r)
            cols.append(off + position_col(M))
            vals.append(sign)
            offs.append(-sign * x_eff)
            kinds.append(kind)
            r += 1
            return
        rc, rv, dep = _position_row(M, off, tau, dt, sign)
        rows.extend([r] * 3)
        cols.extend(rc)
        vals.extend(rv)
        offs.append(-sign * x_eff)
        kinds.append(kind)
        if param is not None:
            deps.setdefault(f"T{param}", []).append(RowParamDep(row=base + r, **dep))
        r += 1

    if window.start > 1e-12:  # green not started yet: nobody crosses early
        for i in range(N):
            add(i, window.start, +1.0, "signal_start", window.start_index)
    if b > 0:
        if window.end > end_of_horizon + 1e-12:
            raise _HorizonInfeasible(f"green end {window.end:.2f}s beyond horizon {end_of_horizon:.2f}s")
        for i in range(b):
            add(i, window.end, -1.0, "signal_cross", window.end_index)
    for i in range(b, N):
        if window.next_start is None:
            add(i, end_of_horizon + 1.0, +1.0, "signal_hold", None)  # forces the stand-in
        else:
            add(i, window.next_start, +1.0, "signal_hold", window.next_start_index)

    S = sp.coo_matrix((vals, (rows, cols)), shape=(r, sk.n)).tocsc()
    qp = QPInstance(
        H=sk.H,
        f=sk.f,
        A=sk.A,
        a=sk.a,
        G=sp.vstack([sk.G0, S], format="csc") if r else sk.G0,
        g=np.concatenate([sk.g0, np.array(offs)]) if r else sk.g0,
        params=deps,
        eq_kinds=["init", "defect"],
        ineq_kinds=list(sk.kinds0) + kinds,
        objective_constant=sk.constant,
    )
    names = tuple(f"T{i}" for i in range(window.n_params))
    return MovementQP(qp, names, window.n_params)


def tracks_from_solution(prob: MovementProblem, x: np.ndarray) -> list[VehicleTrack]:
    M = prob.horizon
    slot = slot_size(M)
    out = []
    for i in range(prob.n_vehicles):
        seg = x[i * slot : (i + 1) * slot]
        states = seg[: 2 * (M + 1)].reshape(M + 1, 2)
        out.append(VehicleTrack(states, seg[2 * (M + 1) :], prob.t_s))
    return out


def _prescreen(prob: MovementProblem, b: int, window: SignalWindow) -> str | None:
    """Cheap certificate of infeasibility for a candidate, or None.

    Only sound certificates are used: a vehicle that cannot reach the line by
    the green end even ignoring every other constraint, or one that cannot
    stay behind it until a hold instant even under full braking.
    """
    M, dt, X = prob.horizon, prob.t_s, prob.stop_line
    eoh = M * dt
    for i in range(b):
        st, pa = prob.vehicles[i].state, prob.vehicles[i].params
        if max_position(st.p, st.v, min(window.end, eoh), pa) < X + prob.line_margin - 1e-9:
            return f"vehicle {i + 1} cannot reach the line by the green end"
    for i in range(prob.n_vehicles):
        st, pa = prob.vehicles[i].state, prob.vehicles[i].params
        instants = []
        if window.start > 1e-12:
            instants.append(min(window.start, eoh))
        if i >= b:
            ns = window.next_start if window.next_start is not None else eoh + 1.0
            instants.append(min(ns, eoh))
        for tau in instants:
            if min_position(st.p, st.v, tau, pa) > X - prob.line_margin + 1e-9:
                return f"vehicle {i + 1} cannot stay behind the line until {tau:.2f}s"
    return None


def branch_lower_bound(prob: MovementProblem, b: int, window: SignalWindow) -> float:
    """Certified lower bound on the optimal value of crossing count ``b``.

    Each held vehicle must keep some position knot behind the stop line until
    the release instant (positions are monotone under the v >= 0 box, and the
    headway chain pushes followers further back).  Minimizing the quadratic
    speed-tracking cost against that single linear constraint has a closed
    form; dropping the input cost, the crossing vehicles and every other
    constraint only lowers it further, so the true optimum can only be larger.

    Used to skip branches whose smooth-min weight would underflow anyway.
    """
    M, dt = prob.horizon, prob.t_s
    # the pinned initial speeds contribute the same constant to every branch
    total = sum(prob.q_v * (v.state.v - v.params.v_desired) ** 2 for v in prob.vehicles)
    if b >= prob.n_vehicles:
        return total
    if any(v.params.v_min < 0 for v in prob.vehicles):
        return total  # monotone-position argument needs the v >= 0 box
    tau = window.next_start if window.next_start is not None else (M + 1) * dt
    kappa = min(int(tau / dt + 1e-12), M)
    if kappa < 1:
        return total
    if kappa >= M:  # the final speed knot carries no cost, so drop its term
        wsum = wsq = float(M - 1)
    else:
        wsum = kappa - 0.5
        wsq = kappa - 0.75
    if wsq <= 0:
        return total
    gap = 0.0
    for i in range(b, prob.n_vehicles):
        veh = prob.vehicles[i]
        if i > b:
            gap += veh.params.headway
        budget = (prob.stop_line - prob.line_margin - gap - veh.state.p) / dt - 0.5 * veh.state.v
        deficit = veh.params.v_desired * wsum - budget
        if deficit > 0.0:
            total += prob.q_v * deficit * deficit / wsq
    return total


def _rollout_start(prob: MovementProblem) -> np.ndarray:
    """Constant-speed rollout of every vehicle: a cheap primal seed.

    Satisfies the dynamics and initial-condition equalities exactly, which
    spares the interior point the early iterations it would otherwise spend
    closing the equality residual from the origin.
    """
    M = prob.horizon
    slot = slot_size(M)
    x = np.zeros(slot * prob.n_vehicles)
    knots = prob.t_s * np.arange(M + 1)
    for i, veh in enumerate(prob.vehicles):
        seg = x[i * slot : i * slot + 2 * (M + 1)]
        seg[0::2] = veh.state.p + veh.state.v * knots
        seg[1::2] = veh.state.v
    return x


def solve_movement(
    prob: MovementProblem,
    b: int,
    window: SignalWindow,
    settings: IPSettings | None = None,
    want_tracks: bool = False,
) -> ValueFunctionSample:
    """Optimal value and timing derivatives for one crossing count.

    Infeasible candidates come back with ``feasible=False`` and a diagnostic;
    their surrogate value is filled in by :func:`enumerate_b`, which knows the
    sibling values.  A solver breakdown (neither optimum nor infeasibility
    certificate) raises :class:`SolverFailure`.
    """
    d = window.n_params
    zero = np.zeros(d)
    if prob.n_vehicles == 0:
        if b != 0:
            raise ValueError("b must be 0 for an empty movement")
        return ValueFunctionSample(0, 0.0, zero, np.zeros((d, d)), True, tracks=[])

    reason = _prescreen(prob, b, window)
    if reason is not None:
        return ValueFunctionSample(b, math.nan, zero, np.zeros((d, d)), False, diagnostic=reason)

    try:
        mqp = assemble_movement_qp(prob, b, window)
    except _HorizonInfeasible as exc:
        return ValueFunctionSample(b, math.nan, zero, np.zeros((d, d)), False, diagnostic=str(exc))

    sol = solve_qp(mqp.qp, settings, x0=_rollout_start(prob))
    if sol.status == "infeasible":
        return ValueFunctionSample(b, math.nan, zero, np.zeros((d, d)), False, diagnostic="solver certificate")
    if sol.status != "optimal":
        raise SolverFailure(
            f"movement {prob.movement} b={b}: solver stopped with {sol.status} "
            f"(residual {sol.residual:.2e}, gap {sol.gap:.2e})"
        )

    active = [nm for nm in mqp.param_names if nm in mqp.qp.params]
    grad = zero.copy()
    hess = np.zeros((d, d))
    if active:
        for nm in active:
            grad[int(nm[1:])] = value_gradient(mqp.qp, sol, nm)
        sub = value_hessian(mqp.qp, sol, active)
        idx = np.array([int(nm[1:]) for nm in active])
        hess[np.ix_(idx, idx)] = sub
    tracks = tracks_from_solution(prob, sol.x) if want_tracks else None
    return ValueFunctionSample(b, sol.value, grad, hess, True, tracks=tracks)


def _solve_one(args) -> ValueFunctionSample:
    prob, b, window, settings, want_tracks = args
    return solve_movement(prob, b, window, settings, want_tracks)


def crossing_jobs(
    prob: MovementProblem,
    window: SignalWindow,
    settings: IPSettings | None = None,
    want_tracks: bool = False,
) -> list[tuple]:
    """Independent per-b work items, each consumable by a (parallel) map."""
    return [(prob, b, window, settings, want_tracks) for b in range(prob.n_vehicles + 1)]


def finalize_samples(
    movement: int, samples: list[ValueFunctionSample], beta: float
) -> list[ValueFunctionSample]:
    """Order samples by ``b`` and fill surrogate values for infeasible ones.

    The surrogate sits a fixed margin above the best feasible sibling with
    zero derivatives, keeping the smooth minimum finite while giving the
    infeasible branch a negligible blend weight.  If no candidate is feasible
    the movement cannot be planned and :class:`NoFeasibleCrossing` is raised.
    """
    samples = sorted(samples, key=lambda s: s.b)
    feasible = [s for s in samples if s.feasible]
    if not feasible:
        detail = "; ".join(f"b={s.b}: {s.diagnostic}" for s in samples)
        raise NoFeasibleCrossing(f"movement {movement}: every crossing count failed ({detail})")
    surrogate = max(s.value for s in feasible) + SURROGATE_MARGIN / beta
    for s in samples:
        if not s.feasible:
            s.value = surrogate
    return samples


def enumerate_batch(
    items: Sequence[tuple[MovementProblem, SignalWindow, IPSettings | None, bool]],
    beta: float,
    map_fn=map,
) -> tuple[list[list[ValueFunctionSample]], int]:
    """Value-function samples for several movements, skipping hopeless counts.

    Runs in two rounds so a parallel ``map_fn`` still sees independent jobs:
    first the most promising count of every movement (smallest relaxation
    bound), then every sibling whose bound stays within ``PRUNE_GAP / beta``
    of the value just found.  Counts beyond that gap would enter the smooth
    minimum with weights below double-precision resolution, so they get a
    zero-derivative placeholder at their bound instead of a QP solve.

    Returns the finalized sample lists (in ``items`` order) and the number of
    QPs actually solved.
    """
    plans = []
    lead_jobs = []
    for prob, window, settings, want_tracks in items:
        n = prob.n_vehicles
        d = window.n_params
        fixed: dict[int, ValueFunctionSample] = {}
        candidates: list[int] = []
        for b in range(n + 1):
            reason = _prescreen(prob, b, window) if n else None
            if reason is None:
                candidates.append(b)
            else:
                fixed[b] = ValueFunctionSample(
                    b, math.nan, np.zeros(d), np.zeros((d, d)), False, diagnostic=reason
                )
        bounds = {b: branch_lower_bound(prob, b, window) for b in candidates}
        lead = None
        if candidates:
            # on ties prefer the largest count: crossing is usually cheaper
            lead = min(candidates, key=lambda b: (bounds[b], -b))
            lead_jobs.append((prob, lead, window, settings, want_tracks))
        plans.append((fixed, candidates, bounds, lead))

    lead_samples = list(map_fn(_solve_one, lead_jobs)) if lead_jobs else []
    solves = len(lead_samples)
    lead_iter = iter(lead_samples)

    follow_jobs = []
    spans: list[slice] = []
    for (prob, window, settings, want_tracks), plan in zip(items, plans):
        fixed, candidates, bounds, lead = plan
        if lead is None:
            spans.append(slice(0, 0))
            continue
        sample = next(lead_iter)
        fixed[lead] = sample
        cutoff = sample.value + PRUNE_GAP / beta if sample.feasible else math.inf
        jobs = [
            (prob, b, window, settings, want_tracks)
            for b in candidates
            if b != lead and bounds[b] <= cutoff
        ]
        for b in candidates:
            if b != lead and bounds[b] > cutoff:
                fixed[b] = ValueFunctionSample(
                    b,
                    bounds[b],
                    np.zeros(window.n_params),
                    np.zeros((window.n_params, window.n_params)),
                    True,
                    diagnostic="pruned: relaxation bound beyond blend support",
                    pruned=True,
                )
        spans.append(slice(len(follow_jobs), len(follow_jobs) + len(jobs)))
        follow_jobs.extend(jobs)

    follow_samples = list(map_fn(_solve_one, follow_jobs)) if follow_jobs else []
    solves += len(follow_samples)

    out = []
    for (prob, _, _, _), plan, span in zip(items, plans, spans):
        fixed = plan[0]
        for sample in follow_samples[span]:
            fixed[sample.b] = sample
        out.append(finalize_samples(prob.movement, list(fixed.values()), beta))
    return out, solves


def enumerate_b(
    prob: MovementProblem,
    window: SignalWindow,
    beta: float = 10.0,
    settings: IPSettings | None = None,
    want_tracks: bool = False,
    map_fn=map,
) -> list[ValueFunctionSample]:
    """Value-function samples for every crossing count ``b`` in 0..N.

    Candidates are independent, so ``map_fn`` may be a parallel map; results
    come back ordered by ``b`` regardless.
    """
    batches, _ = enumerate_batch([(prob, window, settings, want_tracks)], beta, map_fn)
    return batches[0]
