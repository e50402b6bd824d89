"""Dual-ring signal timing: decision layout, linear constraints, baselines.

The signal plan for one intersection is a stacked vector ``T`` holding, for
every movement ``j`` and every planned cycle ``l``, the green start
``t_s(j,l)`` and green end ``t_e(j,l)``.  Per movement the layout is
``(t_s(j,1..L), t_e(j,1..L))`` and movements are stacked in ascending id
order, so ``len(T) == 2 * L * n_movements``.

Two rings run in parallel (defaults ``(1,2,3,4)`` and ``(5,6,7,8)``).  Within
a ring the greens are strictly sequential with a fixed clearance between the
end of one green and the start of the next, including the wrap from the last
movement of cycle ``l`` to the first movement of cycle ``l+1``.  Barrier
pairs pin green ends across the rings so both rings cross the barrier
simultaneously.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "RingConfig",
    "SignalTiming",
    "RowLabel",
    "PhaseCommit",
    "TimingConstraintSystem",
    "assemble_timing_constraints",
    "validate_timing",
    "committed_phases",
    "roll_horizon",
    "snap_to_schedule",
    "baseline_fixed_cycle_timing",
    "write_signal_csv",
]


@dataclass(frozen=True)
class RingConfig:
    """Movement ids per ring, barrier pairs and the number of planned cycles."""

    ring1: tuple[int, ...] = (1, 2, 3, 4)
    ring2: tuple[int, ...] = (5, 6, 7, 8)
    barrier_pairs: tuple[tuple[int, int], ...] = ((2, 6), (4, 8))
    cycles: int = 2

    def __post_init__(self) -> None:
        if len(self.ring1) != len(self.ring2):
            raise ValueError("rings must have equal length")
        if set(self.ring1) & set(self.ring2):
            raise ValueError("rings must be disjoint")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")
        for a, b in self.barrier_pairs:
            if a not in self.ring1 or b not in self.ring2:
                raise ValueError(f"barrier pair ({a},{b}) must take one movement per ring")
            if self.ring1.index(a) != self.ring2.index(b):
                raise ValueError(f"barrier pair ({a},{b}) must sit at the same ring position")

    @property
    def movements(self) -> tuple[int, ...]:
        return tuple(sorted(self.ring1 + self.ring2))

    @property
    def dim(self) -> int:
        """Length of the stacked timing vector."""
        return 2 * self.cycles * len(self.movements)

    def index(self, movement: int, kind: str, cycle: int) -> int:
        """Position of ``t_s``/``t_e`` of (movement, cycle) in the stacked vector.

        ``kind`` is ``"s"`` or ``"e"``; ``cycle`` is 1-based.
        """
        if kind not in ("s", "e"):
            raise ValueError("kind must be 's' or 'e'")
        if not 1 <= cycle <= self.cycles:
            raise ValueError(f"cycle {cycle} outside 1..{self.cycles}")
        j = self.movements.index(movement)
        off = 0 if kind == "s" else self.cycles
        return j * 2 * self.cycles + off + (cycle - 1)


@dataclass
class SignalTiming:
    """Green start/end instants keyed by (movement, cycle), in seconds."""

    starts: dict[tuple[int, int], float]
    ends: dict[tuple[int, int], float]

    def to_vector(self, cfg: RingConfig) -> np.ndarray:
        T = np.empty(cfg.dim)
        for j in cfg.movements:
            for l in range(1, cfg.cycles + 1):
                T[cfg.index(j, "s", l)] = self.starts[(j, l)]
                T[cfg.index(j, "e", l)] = self.ends[(j, l)]
        return T

    @classmethod
    def from_vector(cls, cfg: RingConfig, T: np.ndarray) -> "SignalTiming":
        T = np.asarray(T, dtype=float)
        if T.shape != (cfg.dim,):
            raise ValueError(f"timing vector must have shape ({cfg.dim},)")
        starts, ends = {}, {}
        for j in cfg.movements:
            for l in range(1, cfg.cycles + 1):
                starts[(j, l)] = float(T[cfg.index(j, "s", l)])
                ends[(j, l)] = float(T[cfg.index(j, "e", l)])
        return cls(starts, ends)

    def rows(self) -> list[tuple[int, int, float, float]]:
        """(movement, cycle, start, end) rows sorted by movement then cycle."""
        return [
            (j, l, self.starts[(j, l)], self.ends[(j, l)])
            for (j, l) in sorted(self.starts)
        ]


@dataclass(frozen=True)
class RowLabel:
    """Provenance of one constraint row.

    ``kind`` is one of gmin/gmax/clearance/barrier/end/freeze; ``movements``
    holds the movement id(s) involved (successor first for clearance rows) and
    ``cycle`` the 1-based cycle, when meaningful.
    """

    kind: str
    movements: tuple[int, ...] = ()
    cycle: int | None = None

    def __str__(self) -> str:
        inner = ",".join(str(m) for m in self.movements)
        if self.cycle is not None:
            inner = f"{inner},l={self.cycle}" if inner else f"l={self.cycle}"
        return f"{self.kind}[{inner}]"


@dataclass(frozen=True)
class PhaseCommit:
    """Realized timing of a green that has already started.

    ``end`` stays ``None`` while the green is still showing; once the green
    has ended its end instant is committed as well.
    """

    start: float
    end: float | None = None


@dataclass
class TimingConstraintSystem:
    """Affine constraints on the stacked timing vector.

    Inequalities ``C T + c <= 0`` and equalities ``D T + d = 0``; one label
    per row of each block.  The scalar data the rows were built from is kept
    so that downstream consumers can re-synthesize exactly feasible plans.
    """

    C: np.ndarray
    c: np.ndarray
    D: np.ndarray
    d: np.ndarray
    ineq_labels: list[RowLabel]
    eq_labels: list[RowLabel]
    cfg: RingConfig = field(default_factory=RingConfig)
    g_min: float = 6.0
    g_max: float = 25.0
    t_clr: float = 2.0
    now: float | None = None
    frozen: dict[tuple[int, int], PhaseCommit] = field(default_factory=dict)


def _ring_successors(ring: Sequence[int]) -> list[tuple[int, int]]:
    """(predecessor, successor) pairs of consecutive movements in one ring."""
    return [(ring[i], ring[i + 1]) for i in range(len(ring) - 1)]


def assemble_timing_constraints(
    cfg: RingConfig,
    g_min: float,
    g_max: float,
    t_clr: float,
    now: float | None = None,
    frozen: Mapping[tuple[int, int], PhaseCommit] | None = None,
) -> TimingConstraintSystem:
    """Build the ring constraint system for the stacked timing vector.

    Rows:

    * green duration bounds ``g_min <= t_e - t_s <= g_max`` per (movement,
      cycle), labels ``gmin``/``gmax``;
    * clearance equalities ``t_s(succ, l) - t_e(pred, l) = t_clr`` for
      consecutive ring pairs, plus the cross-cycle wrap from the last
      movement of cycle ``l`` to the first of ``l+1``, label ``clearance``;
    * barrier equalities pinning green ends across rings, label ``barrier``
      for interior pairs and ``end`` for the pair closing the cycle;
    * receding-horizon rows (only when ``now`` is given): per frozen phase an
      equality pinning the committed start (and the committed end once the
      green has ended, otherwise the inequality ``t_e >= now``), and for an
      unfrozen first phase of each ring the inequality ``t_s(first, 1) >=
      now``; all labelled ``freeze``.

    All matrix entries are in {-1, 0, +1}.
    """
    frozen = dict(frozen or {})
    n = cfg.dim
    L = cfg.cycles

    Ci: list[np.ndarray] = []
    ci: list[float] = []
    ineq_labels: list[RowLabel] = []
    De: list[np.ndarray] = []
    de: list[float] = []
    eq_labels: list[RowLabel] = []

    def ineq(coeffs: dict[int, float], off: float, label: RowLabel) -> None:
        row = np.zeros(n)
        for k, v in coeffs.items():
            row[k] = v
        Ci.append(row)
        ci.append(off)
        ineq_labels.append(label)

    def eq(coeffs: dict[int, float], off: float, label: RowLabel) -> None:
        row = np.zeros(n)
        for k, v in coeffs.items():
            row[k] = v
        De.append(row)
        de.append(off)
        eq_labels.append(label)

    for j in cfg.movements:
        for l in range(1, L + 1):
            s = cfg.index(j, "s", l)
            e = cfg.index(j, "e", l)
            # g_min - (e - s) <= 0 and (e - s) - g_max <= 0
            ineq({s: 1.0, e: -1.0}, g_min, RowLabel("gmin", (j,), l))
            ineq({s: -1.0, e: 1.0}, -g_max, RowLabel("gmax", (j,), l))

    for ring in (cfg.ring1, cfg.ring2):
        for l in range(1, L + 1):
            for pred, succ in _ring_successors(ring):
                eq(
                    {cfg.index(succ, "s", l): 1.0, cfg.index(pred, "e", l): -1.0},
                    -t_clr,
                    RowLabel("clearance", (succ, pred), l),
                )
            if l < L:  # wrap: first green of the next cycle follows the last of this one
                eq(
                    {cfg.index(ring[0], "s", l + 1): 1.0, cfg.index(ring[-1], "e", l): -1.0},
                    -t_clr,
                    RowLabel("clearance", (ring[0], ring[-1]), l),
                )

    last_pos = len(cfg.ring1) - 1
    for a, b in cfg.barrier_pairs:
        kind = "end" if cfg.ring1.index(a) == last_pos else "barrier"
        for l in range(1, L + 1):
            eq(
                {cfg.index(a, "e", l): 1.0, cfg.index(b, "e", l): -1.0},
                0.0,
                RowLabel(kind, (a, b), l),
            )

    if now is not None:
        for (j, l), commit in sorted(frozen.items()):
            s = cfg.index(j, "s", l)
            e = cfg.index(j, "e", l)
            eq({s: 1.0}, -commit.start, RowLabel("freeze", (j,), l))
            if commit.end is not None:
                eq({e: 1.0}, -commit.end, RowLabel("freeze", (j,), l))
            else:
                ineq({e: -1.0}, now, RowLabel("freeze", (j,), l))
        for ring in (cfg.ring1, cfg.ring2):
            if (ring[0], 1) not in frozen:
                ineq({cfg.index(ring[0], "s", 1): -1.0}, now, RowLabel("freeze", (ring[0],), 1))

    C = np.array(Ci) if Ci else np.zeros((0, n))
    D = np.array(De) if De else np.zeros((0, n))
    return TimingConstraintSystem(
        C, np.array(ci), D, np.array(de), ineq_labels, eq_labels, cfg,
        g_min=g_min, g_max=g_max, t_clr=t_clr, now=now, frozen=dict(frozen or {}),
    )


def validate_timing(
    timing: SignalTiming | np.ndarray,
    system: TimingConstraintSystem,
    tol: float = 1e-9,
) -> list[RowLabel]:
    """Labels of all rows the given timing violates beyond ``tol``."""
    T = timing.to_vector(system.cfg) if isinstance(timing, SignalTiming) else np.asarray(timing, float)
    bad: list[RowLabel] = []
    if system.C.size:
        r = system.C @ T + system.c
        bad += [lab for lab, v in zip(system.ineq_labels, r) if v > tol]
    if system.D.size:
        r = system.D @ T + system.d
        bad += [lab for lab, v in zip(system.eq_labels, r) if abs(v) > tol]
    return bad


def committed_phases(
    cfg: RingConfig, T: np.ndarray, now: float, eps: float = 1e-9
) -> dict[tuple[int, int], PhaseCommit]:
    """Phases of the plan that have already started at ``now``.

    A started green's start is committed; its end too once it has passed.
    Controllers feed this into :func:`assemble_timing_constraints` so replans
    never rewrite what the signal heads have already displayed.
    """
    out: dict[tuple[int, int], PhaseCommit] = {}
    for j in cfg.movements:
        for l in range(1, cfg.cycles + 1):
            s = float(T[cfg.index(j, "s", l)])
            e = float(T[cfg.index(j, "e", l)])
            if s <= now + eps:
                out[(j, l)] = PhaseCommit(s, e if e <= now + eps else None)
    return out


def roll_horizon(cfg: RingConfig, T: np.ndarray, now: float, t_clr: float) -> tuple[np.ndarray, bool]:
    """Advance the plan once every first-cycle green has ended.

    Cycle ``l+1`` becomes cycle ``l`` and a fresh last cycle is appended: the
    old last cycle shifted by its own span plus the clearance, which lands its
    first green exactly one clearance after the previous cycle ends, so every
    ring constraint keeps holding by construction.  Repeats until the first
    cycle is current again.
    """
    T = np.asarray(T, dtype=float)
    L = cfg.cycles
    rolled = False
    while True:
        ends = [T[cfg.index(j, "e", 1)] for j in cfg.movements]
        if max(ends) > now + 1e-9 or L < 2:
            return T, rolled
        T2 = np.empty_like(T)
        first, last = cfg.ring1[0], cfg.ring1[-1]
        span = T[cfg.index(last, "e", L)] + t_clr - T[cfg.index(first, "s", L)]
        for j in cfg.movements:
            for l in range(1, L):
                T2[cfg.index(j, "s", l)] = T[cfg.index(j, "s", l + 1)]
                T2[cfg.index(j, "e", l)] = T[cfg.index(j, "e", l + 1)]
            T2[cfg.index(j, "s", L)] = T[cfg.index(j, "s", L)] + span
            T2[cfg.index(j, "e", L)] = T[cfg.index(j, "e", L)] + span
        T, rolled = T2, True


def snap_to_schedule(
    cfg: RingConfig,
    T: np.ndarray,
    g_min: float,
    g_max: float,
    t_clr: float,
    frozen: Mapping[tuple[int, int], PhaseCommit] | None = None,
) -> np.ndarray:
    """Re-synthesize ``T`` so every ring constraint holds to machine precision.

    Iterative solves leave residuals of order ``tol * scale`` in the timing
    rows; signal hardware and the safety audit need exact schedules.  The
    plan is rebuilt by walking both rings group by group: durations are
    clipped into ``[g_min, g_max]``, successors start one clearance after
    their predecessor ends, and the phases closing on a barrier share one
    instant, intersected into both rings' duration windows.  Committed
    starts and ends are copied verbatim.
    """
    T = np.asarray(T, dtype=float)
    frozen = dict(frozen or {})
    pos_of = {cfg.ring1.index(a) for a, _ in cfg.barrier_pairs}
    positions = sorted(pos_of)
    if positions[-1] != len(cfg.ring1) - 1:
        raise ValueError("last ring position must close on a barrier")
    T2 = T.copy()
    rings = (cfg.ring1, cfg.ring2)
    cur = []
    for ring in rings:
        cm = frozen.get((ring[0], 1))
        cur.append(cm.start if cm is not None else float(T[cfg.index(ring[0], "s", 1)]))
    for l in range(1, cfg.cycles + 1):
        seg_start = 0
        for pos_end in positions:
            closers: list[tuple[int, float, PhaseCommit | None]] = []
            for r, ring in enumerate(rings):
                t = cur[r]
                for i in range(seg_start, pos_end):
                    j = ring[i]
                    cm = frozen.get((j, l))
                    if cm is not None:
                        t = cm.start
                    T2[cfg.index(j, "s", l)] = t
                    if cm is not None and cm.end is not None:
                        e = cm.end
                    else:
                        e = t + float(np.clip(T[cfg.index(j, "e", l)] - t, g_min, g_max))
                    T2[cfg.index(j, "e", l)] = e
                    t = e + t_clr
                j = ring[pos_end]
                cm = frozen.get((j, l))
                if cm is not None:
                    t = cm.start
                T2[cfg.index(j, "s", l)] = t
                closers.append((j, t, cm))
            ends = [cm.end for _, _, cm in closers if cm is not None and cm.end is not None]
            if ends:
                barrier = ends[0]
            else:
                lo = max(t + g_min for _, t, _ in closers)
                hi = min(t + g_max for _, t, _ in closers)
                if lo > hi:
                    raise ValueError(
                        f"rings cannot meet the barrier after position {pos_end} in cycle {l}"
                    )
                barrier = float(np.clip(T[cfg.index(closers[0][0], "e", l)], lo, hi))
            for r, (j, _, _) in enumerate(closers):
                T2[cfg.index(j, "e", l)] = barrier
                cur[r] = barrier + t_clr
            seg_start = pos_end + 1
    return T2


def _proportional_fill(targets: np.ndarray, total: float, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Split ``total`` proportionally to ``targets`` subject to per-item [lo, hi].

    The allocation is ``clip(level * target, lo, hi)`` with the water level
    chosen so the items sum to ``total``; the sum is monotone in the level,
    so a bisection isolates the active linear piece and the level is then
    solved exactly on it.  Zero-weight items sit at their lower bound unless
    every weight is zero, in which case weights are uniform.
    """
    targets = np.asarray(targets, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if total < lo.sum() - 1e-9 or total > hi.sum() + 1e-9:
        raise ValueError(
            f"cannot split {total:.6g} within bounds [{lo.sum():.6g}, {hi.sum():.6g}]"
        )
    if targets.sum() <= 0:
        targets = np.ones_like(targets)
    # zero-demand items keep a vanishing weight so they sit at their lower
    # bound normally but can still absorb overflow when everything else caps
    targets = np.where(targets > 0, targets, 1e-9 * targets.max())

    def alloc(level: float) -> np.ndarray:
        return np.clip(level * targets, lo, hi)

    level_hi = 2.0 * max(
        (h / t for t, h in zip(targets, hi) if t > 0), default=1.0
    )
    level_lo = 0.0
    for _ in range(200):
        mid = 0.5 * (level_lo + level_hi)
        if alloc(mid).sum() < total:
            level_lo = mid
        else:
            level_hi = mid
    # exact solve on the isolated linear piece
    level = 0.5 * (level_lo + level_hi)
    x = alloc(level)
    free = (x > lo + 1e-12) & (x < hi - 1e-12) & (targets > 0)
    if free.any():
        pinned = np.where(free, 0.0, x).sum()
        x[free] = targets[free] * (total - pinned) / targets[free].sum()
        x = np.clip(x, lo, hi)
    if abs(x.sum() - total) > 1e-7:
        raise ValueError("proportional split failed to allocate the full budget")
    return x


def baseline_fixed_cycle_timing(
    cfg: RingConfig,
    demand: Mapping[int, float],
    cycle_length: float,
    g_min: float,
    g_max: float,
    t_clr: float,
    horizon_start: float = 0.0,
) -> SignalTiming:
    """Fixed-cycle plan with greens proportional to movement demand.

    The cycle's total green time (cycle length minus one clearance per
    phase) is first split between the barrier-to-barrier groups in
    proportion to each group's summed demand, then within each (ring,
    group) in proportion to per-movement demand.  Both splits clip to the
    feasible green bounds and redistribute the residual proportionally
    among unclipped entries, so barrier equalities hold by construction and
    every green lands in [g_min, g_max].  The plan repeats every
    ``cycle_length`` starting at ``horizon_start``.
    """
    n_phase = len(cfg.ring1)
    green_total = cycle_length - n_phase * t_clr
    if green_total <= 0:
        raise ValueError("cycle length leaves no green time")

    # group boundaries: ring positions of the barrier pairs split each ring
    # into consecutive groups that must stay time-aligned across rings
    cuts = sorted(cfg.ring1.index(a) for a, _ in cfg.barrier_pairs)
    if cuts and cuts[-1] != n_phase - 1:
        cuts.append(n_phase - 1)
    elif not cuts:
        cuts = [n_phase - 1]
    groups: list[tuple[int, int]] = []
    start = 0
    for cut in cuts:
        groups.append((start, cut))
        start = cut + 1

    group_sizes = np.array([hi - lo + 1 for lo, hi in groups], dtype=float)
    group_demand = np.array(
        [
            sum(demand.get(m, 0.0) for ring in (cfg.ring1, cfg.ring2) for m in ring[lo : hi + 1])
            for lo, hi in groups
        ]
    )
    budgets = _proportional_fill(
        group_demand, green_total, group_sizes * g_min, group_sizes * g_max
    )

    greens: dict[int, float] = {}
    for ring in (cfg.ring1, cfg.ring2):
        for (lo, hi), budget in zip(groups, budgets):
            members = ring[lo : hi + 1]
            dem = np.array([demand.get(m, 0.0) for m in members])
            alloc = _proportional_fill(
                dem, budget, np.full(len(members), g_min), np.full(len(members), g_max)
            )
            for m, g in zip(members, alloc):
                greens[m] = float(g)

    starts, ends = {}, {}
    for l in range(1, cfg.cycles + 1):
        t0 = horizon_start + (l - 1) * cycle_length
        for ring in (cfg.ring1, cfg.ring2):
            t = t0
            for m in ring:
                starts[(m, l)] = t
                ends[(m, l)] = t + greens[m]
                t = ends[(m, l)] + t_clr
    return SignalTiming(starts, ends)


def write_signal_csv(rows: Iterable[tuple[int, int, float, float]], path) -> None:
    """Write realized green intervals as CSV with 6-decimal fixed point."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["movement", "cycle", "green_start_s", "green_end_s"])
        for movement, cycle, start, end in rows:
            w.writerow([movement, cycle, f"{start:.6f}", f"{end:.6f}"])
