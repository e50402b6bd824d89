"""Timing optimization across all movements by feasible-path SQP.

The upper level allocates green time: it minimizes the sum over movements of
the smoothed per-movement value functions subject to the affine ring
constraints on the stacked timing vector ``T``.  Because those constraints
are affine and every iterate starts feasible, a feasible QP step scaled by
any alpha in (0, 1] stays feasible, so the merit function is the smoothed
objective alone and the line search is plain Armijo backtracking.

Each iteration: evaluate all movements (one trajectory QP per candidate
crossing count, independent and safe to map in parallel), blend per movement
with the smooth minimum, assemble the QP with the block-diagonal
eigenvalue-clipped Hessian, and apply the damped primal-dual update
``T <- T + alpha dT``, ``mult <- (1-alpha) mult + alpha mult_QP``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .movement import (
    MovementProblem,
    NoFeasibleCrossing,
    SignalWindow,
    SolverFailure,
    ValueFunctionSample,
    VehicleTrack,
    enumerate_batch,
)
from .qp import IPSettings, QPInstance, solve_qp
from .ring import RingConfig, SignalTiming, TimingConstraintSystem, snap_to_schedule
from .softmin import SoftMinResult, soft_min

logger = logging.getLogger(__name__)

__all__ = [
    "SQPConfig",
    "UpperEval",
    "UpperEvaluator",
    "CoordinationResult",
    "serving_cycle",
    "signal_window",
    "evaluate_upper_cost",
    "sqp_step",
    "coordinate",
    "choose_trajectories",
]


@dataclass
class SQPConfig:
    max_iterations: int = 30
    kkt_tolerance: float = 1e-6
    step_tolerance: float = 1e-6
    armijo: float = 1e-4
    backtrack: float = 0.5
    hessian_floor: float = 1e-6
    hessian_ceiling: float = 1e6
    beta: float = 10.0
    min_alpha: float = 1e-4

    def __post_init__(self) -> None:
        if min(self.kkt_tolerance, self.step_tolerance, self.hessian_floor) <= 0:
            raise ValueError("tolerances must be positive")
        if self.hessian_ceiling <= self.hessian_floor:
            raise ValueError("hessian ceiling must exceed the floor")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0,1)")


@dataclass
class UpperEval:
    """One evaluation of the upper objective: cost, derivatives, and evidence."""

    cost: float
    gradient: np.ndarray
    blocks: list[tuple[np.ndarray, np.ndarray]]  # (timing indices, local Hessian)
    blends: dict[int, SoftMinResult] = field(default_factory=dict)
    samples: dict[int, list[ValueFunctionSample]] = field(default_factory=dict)


def movement_indices(cfg: RingConfig, movement: int) -> np.ndarray:
    """Global positions of one movement's timing entries, starts then ends."""
    L = cfg.cycles
    return np.array(
        [cfg.index(movement, "s", l) for l in range(1, L + 1)]
        + [cfg.index(movement, "e", l) for l in range(1, L + 1)]
    )


def serving_cycle(cfg: RingConfig, T: np.ndarray, movement: int, now: float) -> int:
    """First planned cycle of the movement whose green has not ended yet."""
    for l in range(1, cfg.cycles + 1):
        if T[cfg.index(movement, "e", l)] > now + 1e-9:
            return l
    raise ValueError(f"plan for movement {movement} holds no future green (now={now})")


def signal_window(
    cfg: RingConfig, T: np.ndarray, movement: int, now: float, cycle: int
) -> SignalWindow:
    """Window of the served green with instants relative to ``now``.

    The green end is floored at an epsilon above the planning instant: the
    constraint rows it feeds are then simply unsatisfiable for any upstream
    vehicle, which is the correct limit of a green closing right now.
    """
    L = cfg.cycles
    nxt = T[cfg.index(movement, "s", cycle + 1)] - now if cycle < L else None
    return SignalWindow(
        start=float(T[cfg.index(movement, "s", cycle)] - now),
        end=float(max(T[cfg.index(movement, "e", cycle)] - now, 1e-9)),
        next_start=None if nxt is None else float(nxt),
        start_index=cycle - 1,
        end_index=L + cycle - 1,
        next_start_index=cycle if cycle < L else None,
        n_params=2 * L,
    )


class UpperEvaluator:
    """Maps a timing vector to the summed smoothed movement costs.

    The serving cycle per movement is pinned at construction (from the warm
    plan) so the objective stays one fixed smooth function during the whole
    replanning step.  Evaluations are cached per movement keyed on its own
    timing entries, so a step that leaves some movements untouched, and the
    re-evaluation of an accepted trial, cost nothing extra.
    """

    def __init__(
        self,
        problems: dict[int, MovementProblem],
        cfg: RingConfig,
        now: float,
        warm_T: np.ndarray,
        beta: float = 10.0,
        settings: IPSettings | None = None,
        map_fn=map,
    ):
        missing = [j for j in cfg.movements if j not in problems]
        if missing:
            raise ValueError(f"problems missing movements {missing}")
        self.problems = problems
        self.cfg = cfg
        self.now = now
        self.beta = beta
        self.settings = settings
        self.map_fn = map_fn
        self.cycles = {j: serving_cycle(cfg, warm_T, j, now) for j in cfg.movements}
        self._cache: dict[tuple[int, bytes], list[ValueFunctionSample]] = {}
        self.evaluations = 0
        self.qp_solves = 0

    def _movement_samples(self, T: np.ndarray) -> dict[int, list[ValueFunctionSample]]:
        cfg = self.cfg
        keys = {}
        items: list[tuple] = []
        order: list[int] = []
        for j in cfg.movements:
            key = (j, np.round(T[movement_indices(cfg, j)], 9).tobytes())
            keys[j] = key
            if key in self._cache:
                continue
            window = signal_window(cfg, T, j, self.now, self.cycles[j])
            items.append((self.problems[j], window, self.settings, True))
            order.append(j)
        if items:
            batches, solves = enumerate_batch(items, self.beta, self.map_fn)
            self.qp_solves += solves
            for j, samples in zip(order, batches):
                self._cache[keys[j]] = samples
        return {j: self._cache[keys[j]] for j in cfg.movements}

    def __call__(self, T: np.ndarray) -> UpperEval:
        self.evaluations += 1
        samples = self._movement_samples(T)
        total = 0.0
        gradient = np.zeros(self.cfg.dim)
        blocks: list[tuple[np.ndarray, np.ndarray]] = []
        blends: dict[int, SoftMinResult] = {}
        for j in self.cfg.movements:
            sl = samples[j]
            blend = soft_min(
                np.array([s.value for s in sl]),
                beta=self.beta,
                gradients=np.array([s.gradient for s in sl]),
                hessians=np.array([s.hessian for s in sl]),
            )
            blends[j] = blend
            total += blend.value
            idx = movement_indices(self.cfg, j)
            gradient[idx] += blend.gradient
            blocks.append((idx, blend.hessian))
        return UpperEval(total, gradient, blocks, blends, samples)


def evaluate_upper_cost(
    T: np.ndarray,
    problems: dict[int, MovementProblem],
    cfg: RingConfig,
    now: float,
    beta: float = 10.0,
    settings: IPSettings | None = None,
    map_fn=map,
) -> UpperEval:
    """One-shot evaluation of the upper objective at ``T``."""
    return UpperEvaluator(problems, cfg, now, T, beta, settings, map_fn)(T)


def _clip_psd(H: np.ndarray, floor: float, ceiling: float) -> np.ndarray:
    """Symmetrize and clip eigenvalues into ``[floor, ceiling]``.

    The ceiling guards the step QP against the near-infinite curvature the
    smoothed value function exhibits next to an active-set kink; curvature
    that large carries no step information beyond "do not move", which the
    capped model still expresses, and letting it through destroys the
    conditioning of the QP.
    """
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    return (V * np.clip(w, floor, ceiling)) @ V.T


def _kkt_residual(
    T: np.ndarray,
    gradient: np.ndarray,
    system: TimingConstraintSystem,
    lam: np.ndarray,
    mu: np.ndarray,
) -> float:
    stat = gradient + system.C.T @ mu + system.D.T @ lam
    ineq = system.C @ T + system.c
    eq = system.D @ T + system.d
    return max(
        np.abs(stat).max(initial=0.0),
        np.abs(mu * ineq).max(initial=0.0),
        ineq.max(initial=0.0),
        np.abs(eq).max(initial=0.0),
    )


@dataclass
class _StepResult:
    T: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    evaluation: UpperEval
    alpha: float
    step_norm: float
    status: str  # accepted | converged | stalled


def sqp_step(
    T: np.ndarray,
    lam: np.ndarray,
    mu: np.ndarray,
    evaluation: UpperEval,
    system: TimingConstraintSystem,
    config: SQPConfig,
    evaluator,
) -> _StepResult:
    """One damped SQP update from a feasible iterate.

    Builds the QP in the step ``dT`` with block-diagonal clipped Hessian and
    the constraints shifted to the current point, then backtracks alpha on
    the smoothed cost.  An evaluation that throws (a trial point where some
    movement loses every crossing candidate) is treated as +inf cost.
    """
    n = T.size
    H = np.zeros((n, n))
    for idx, Hl in evaluation.blocks:
        H[np.ix_(idx, idx)] += _clip_psd(Hl, config.hessian_floor, config.hessian_ceiling)
    diag = np.arange(n)
    bare = diag[H[diag, diag] == 0.0]  # timing entries no block touched
    H[bare, bare] = config.hessian_floor

    qp = QPInstance(
        H=H,
        f=evaluation.gradient,
        A=system.D,
        a=system.D @ T + system.d,
        G=system.C,
        g=system.C @ T + system.c,
    )
    sol = solve_qp(qp, IPSettings(tol=1e-10, max_iter=200))
    if sol.status == "infeasible":
        raise RuntimeError("timing QP infeasible: frozen phases contradict the ring constraints")
    dT = sol.x
    step_norm = float(np.abs(dT).max(initial=0.0))
    if step_norm <= config.step_tolerance:
        return _StepResult(T, sol.eq_mult, sol.ineq_mult, evaluation, 0.0, step_norm, "converged")

    slope = float(evaluation.gradient @ dT)
    if slope > -1e-14:
        return _StepResult(T, sol.eq_mult, sol.ineq_mult, evaluation, 0.0, step_norm, "converged")

    alpha = 1.0
    while alpha >= config.min_alpha:
        # solver residuals leave the trial a hair off the timing manifold;
        # re-synthesize before evaluating so accepted iterates are exact
        T_try = snap_to_schedule(
            system.cfg, T + alpha * dT,
            system.g_min, system.g_max, system.t_clr, system.frozen,
        )
        try:
            ev_try = evaluator(T_try)
        except (NoFeasibleCrossing, SolverFailure):
            ev_try = None
        if ev_try is not None and ev_try.cost <= evaluation.cost + config.armijo * alpha * slope:
            lam2 = (1 - alpha) * lam + alpha * sol.eq_mult
            mu2 = (1 - alpha) * mu + alpha * sol.ineq_mult
            return _StepResult(T_try, lam2, mu2, ev_try, alpha, step_norm, "accepted")
        alpha *= config.backtrack
    return _StepResult(T, lam, mu, evaluation, 0.0, step_norm, "stalled")


@dataclass
class CoordinationResult:
    timing: SignalTiming
    T: np.ndarray
    tracks: dict[int, list[VehicleTrack]]
    chosen_b: dict[int, int]
    cost: float
    iterations: int
    kkt_residual: float
    status: str  # converged | max_iterations | stalled
    blends: dict[int, SoftMinResult] = field(default_factory=dict)


def _pick_tracks(evaluation: UpperEval) -> tuple[dict[int, list[VehicleTrack]], dict[int, int]]:
    tracks: dict[int, list[VehicleTrack]] = {}
    chosen: dict[int, int] = {}
    for j, blend in evaluation.blends.items():
        b = int(np.argmax(blend.weights))
        sample = evaluation.samples[j][b]
        if not sample.feasible or sample.pruned:  # surrogates carry no trajectories
            feas = [s for s in evaluation.samples[j] if s.feasible and not s.pruned]
            sample = min(feas, key=lambda s: s.value)
            b = sample.b
        chosen[j] = b
        tracks[j] = sample.tracks or []
    return tracks, chosen


def coordinate(
    problems: dict[int, MovementProblem],
    system: TimingConstraintSystem,
    T0: np.ndarray,
    now: float,
    config: SQPConfig | None = None,
    settings: IPSettings | None = None,
    map_fn=map,
    trace: list | None = None,
) -> CoordinationResult:
    """Optimize the timing vector from a feasible warm start.

    Iterates damped SQP steps until the KKT residual or the step drops below
    tolerance.  Returns the final timing plus, per movement, the planned
    trajectories of the crossing count carrying the largest blend weight.
    """
    config = config or SQPConfig()
    cfg = system.cfg
    T = snap_to_schedule(
        cfg, np.asarray(T0, dtype=float),
        system.g_min, system.g_max, system.t_clr, system.frozen,
    )
    evaluator = UpperEvaluator(problems, cfg, now, T, config.beta, settings, map_fn)
    ev = evaluator(T)
    lam = np.zeros(system.D.shape[0])
    mu = np.zeros(system.C.shape[0])

    status = "max_iterations"
    res = _kkt_residual(T, ev.gradient, system, lam, mu)
    it = 0
    for it in range(1, config.max_iterations + 1):
        if res <= config.kkt_tolerance:
            status = "converged"
            break
        out = sqp_step(T, lam, mu, ev, system, config, evaluator)
        if trace is not None:
            trace.append(
                {"iter": it, "cost": out.evaluation.cost, "alpha": out.alpha, "kkt": res}
            )
        logger.debug(
            "sqp iter=%d cost=%.6f kkt=%.2e alpha=%.3f step=%.2e",
            it, out.evaluation.cost, res, out.alpha, out.step_norm,
        )
        if out.status in ("converged", "stalled"):
            if out.status == "converged":
                lam, mu = out.lam, out.mu
                res = _kkt_residual(T, ev.gradient, system, lam, mu)
            status = out.status
            break
        T, lam, mu, ev = out.T, out.lam, out.mu, out.evaluation
        res = _kkt_residual(T, ev.gradient, system, lam, mu)
    else:
        it = config.max_iterations

    tracks, chosen = _pick_tracks(ev)
    return CoordinationResult(
        timing=SignalTiming.from_vector(cfg, T),
        T=T,
        tracks=tracks,
        chosen_b=chosen,
        cost=ev.cost,
        iterations=it,
        kkt_residual=res,
        status=status,
        blends=ev.blends,
    )


def choose_trajectories(
    problems: dict[int, MovementProblem],
    cfg: RingConfig,
    T: np.ndarray,
    now: float,
    beta: float = 10.0,
    settings: IPSettings | None = None,
    map_fn=map,
) -> tuple[dict[int, list[VehicleTrack]], dict[int, int]]:
    """Plan trajectories against a fixed timing vector (no timing optimization)."""
    ev = evaluate_upper_cost(T, problems, cfg, now, beta, settings, map_fn)
    return _pick_tracks(ev)
