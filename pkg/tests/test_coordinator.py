"""Upper-level tests: timing SQP, schedule snapping, plan bookkeeping."""
import numpy as np
import pytest

from greenlight.coordinator import (
    SQPConfig,
    UpperEval,
    UpperEvaluator,
    _clip_psd,
    choose_trajectories,
    coordinate,
    evaluate_upper_cost,
    movement_indices,
    serving_cycle,
    signal_window,
    sqp_step,
)
from greenlight.dynamics import VehicleParams, VehicleState
from greenlight.movement import MovementProblem, PlannedVehicle
from greenlight.ring import (
    PhaseCommit,
    RingConfig,
    assemble_timing_constraints,
    baseline_fixed_cycle_timing,
    committed_phases,
    roll_horizon,
    snap_to_schedule,
    validate_timing,
)

PARAMS = VehicleParams()
G_MIN, G_MAX, T_CLR = 6.0, 25.0, 2.0


def _baseline_vector(cfg, cycle_length=60.0):
    timing = baseline_fixed_cycle_timing(
        cfg, {j: 100.0 for j in cfg.movements}, cycle_length, G_MIN, G_MAX, T_CLR
    )
    return timing.to_vector(cfg)


def _problems(cfg, per_movement, M=20, t_s=2.0, X=200.0):
    out = {}
    for j in cfg.movements:
        vehicles = tuple(
            PlannedVehicle(VehicleState(p, v), PARAMS) for p, v in per_movement.get(j, ())
        )
        out[j] = MovementProblem(
            movement=j, vehicles=vehicles, horizon=M, t_s=t_s, stop_line=X
        )
    return out


def _quad_evaluator(Q, tstar):
    idx = np.arange(tstar.size)

    def ev(T):
        g = Q @ (T - tstar)
        return UpperEval(0.5 * float((T - tstar) @ g), g, [(idx, Q)])

    return ev


# ---------------------------------------------------------------- snapping


def test_snap_restores_exact_feasibility():
    cfg = RingConfig()
    system = assemble_timing_constraints(cfg, G_MIN, G_MAX, T_CLR)
    base = _baseline_vector(cfg)
    rng = np.random.default_rng(7)
    for _ in range(20):
        noisy = base + rng.uniform(-0.3, 0.3, base.size)
        snapped = snap_to_schedule(cfg, noisy, G_MIN, G_MAX, T_CLR)
        assert validate_timing(snapped, system, tol=1e-12) == []
        assert np.abs(snapped - noisy).max() < 2.0


def test_snap_copies_commitments_verbatim():
    cfg = RingConfig()
    base = _baseline_vector(cfg)
    frozen = {
        (1, 1): PhaseCommit(0.0, 13.0),
        (5, 1): PhaseCommit(0.0, 13.0),
        (2, 1): PhaseCommit(15.0),
        (6, 1): PhaseCommit(15.0),
    }
    rng = np.random.default_rng(3)
    noisy = base + rng.uniform(-0.2, 0.2, base.size)
    snapped = snap_to_schedule(cfg, noisy, G_MIN, G_MAX, T_CLR, frozen)
    assert snapped[cfg.index(1, "s", 1)] == 0.0
    assert snapped[cfg.index(1, "e", 1)] == 13.0
    assert snapped[cfg.index(5, "e", 1)] == 13.0
    assert snapped[cfg.index(2, "s", 1)] == 15.0
    system = assemble_timing_constraints(cfg, G_MIN, G_MAX, T_CLR, now=16.0, frozen=frozen)
    assert validate_timing(snapped, system, tol=1e-9) == []


def test_snap_committed_barrier_end_wins():
    cfg = RingConfig()
    base = _baseline_vector(cfg)
    frozen = {(2, 1): PhaseCommit(15.0, 28.0), (6, 1): PhaseCommit(15.0, 28.0)}
    noisy = base + 0.1
    snapped = snap_to_schedule(cfg, noisy, G_MIN, G_MAX, T_CLR, frozen)
    assert snapped[cfg.index(2, "e", 1)] == 28.0
    assert snapped[cfg.index(6, "e", 1)] == 28.0
    # the next group starts one clearance later in both rings
    assert snapped[cfg.index(3, "s", 1)] == 30.0
    assert snapped[cfg.index(7, "s", 1)] == 30.0


def test_snap_rejects_incompatible_commitments():
    cfg = RingConfig()
    base = _baseline_vector(cfg)
    frozen = {(2, 1): PhaseCommit(15.0), (6, 1): PhaseCommit(45.0)}
    with pytest.raises(ValueError, match="barrier"):
        snap_to_schedule(cfg, base, G_MIN, G_MAX, T_CLR, frozen)


def test_snap_requires_trailing_barrier():
    cfg = RingConfig(ring1=(1, 2), ring2=(5, 6), barrier_pairs=((1, 5),), cycles=1)
    with pytest.raises(ValueError, match="barrier"):
        snap_to_schedule(cfg, np.zeros(cfg.dim), G_MIN, G_MAX, T_CLR)


# ------------------------------------------------------- plan bookkeeping


def test_committed_phases_midcycle():
    cfg = RingConfig()
    T = _baseline_vector(cfg)
    got = committed_phases(cfg, T, now=30.0)
    assert got == {
        (1, 1): PhaseCommit(0.0, 13.0),
        (2, 1): PhaseCommit(15.0, 28.0),
        (3, 1): PhaseCommit(30.0, None),
        (5, 1): PhaseCommit(0.0, 13.0),
        (6, 1): PhaseCommit(15.0, 28.0),
        (7, 1): PhaseCommit(30.0, None),
    }


def test_roll_horizon_shifts_when_first_cycle_done():
    cfg = RingConfig()
    system = assemble_timing_constraints(cfg, G_MIN, G_MAX, T_CLR)
    T = _baseline_vector(cfg)
    early, rolled = roll_horizon(cfg, T, now=30.0, t_clr=T_CLR)
    assert not rolled and np.array_equal(early, T)
    late, rolled = roll_horizon(cfg, T, now=58.5, t_clr=T_CLR)
    assert rolled
    assert late[cfg.index(1, "s", 1)] == pytest.approx(60.0)
    assert late[cfg.index(1, "s", 2)] == pytest.approx(120.0)
    assert validate_timing(late, system, tol=1e-9) == []


def test_serving_cycle_and_window():
    cfg = RingConfig()
    T = _baseline_vector(cfg)
    assert serving_cycle(cfg, T, 1, now=0.0) == 1
    assert serving_cycle(cfg, T, 1, now=13.5) == 2
    with pytest.raises(ValueError):
        serving_cycle(cfg, T, 1, now=1000.0)
    w = signal_window(cfg, T, 2, now=10.0, cycle=1)
    assert w.start == pytest.approx(5.0)
    assert w.end == pytest.approx(18.0)
    assert w.next_start == pytest.approx(65.0)
    assert (w.start_index, w.end_index, w.next_start_index) == (0, 2, 1)
    w2 = signal_window(cfg, T, 1, now=13.0 - 5e-10, cycle=1)
    assert w2.end == 1e-9  # a green closing right now still yields a usable row
    wl = signal_window(cfg, T, 1, now=20.0, cycle=2)
    assert wl.next_start is None and wl.next_start_index is None


# ------------------------------------------------------------- SQP pieces


def test_clip_psd_clips_eigenvalues():
    A = np.array([[1.0, 2.0], [2.0, -3.0]])
    H = _clip_psd(A, 1e-6, 1e6)
    w = np.linalg.eigvalsh(H)
    assert w.min() >= 1e-6 - 1e-12
    assert np.allclose(H, H.T)
    spd = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert np.allclose(_clip_psd(spd, 1e-6, 1e6), spd, atol=1e-12)
    # runaway curvature is capped but directions are kept
    spike = np.diag([1e12, 4.0])
    capped = _clip_psd(spike, 1e-6, 1e6)
    assert np.allclose(capped, np.diag([1e6, 4.0]))


def test_sqp_step_newton_lands_on_interior_target():
    cfg = RingConfig()
    system = assemble_timing_constraints(cfg, G_MIN, G_MAX, T_CLR)
    T0 = _baseline_vector(cfg, cycle_length=54.0)
    tstar = _baseline_vector(cfg, cycle_length=60.0)
    rng = np.random.default_rng(0)
    A = rng.standard_normal((cfg.dim, cfg.dim))
    Q = A @ A.T / cfg.dim + np.eye(cfg.dim)
    evaluator = _quad_evaluator(Q, tstar)
    out = sqp_step(
        T0,
        np.zeros(system.D.shape[0]),
        np.zeros(system.C.shape[0]),
        evaluator(T0),
        system,
        SQPConfig(),
        evaluator,
    )
    assert out.status == "accepted"
    assert out.alpha == 1.0
    assert np.abs(out.T - tstar).max() < 1e-5
    assert out.evaluation.cost < 1e-6


def test_sqp_step_converges_at_optimum():
    cfg = RingConfig()
    system = assemble_timing_constraints(cfg, G_MIN, G_MAX, T_CLR)
    tstar = _baseline_vector(cfg)
    Q = np.eye(cfg.dim)
    evaluator = _quad_evaluator(Q, tstar)
    out = sqp_step(
        tstar,
        np.zeros(system.D.shape[0]),
        np.zeros(system.C.shape[0]),
        evaluator(tstar),
        system,
        SQPConfig(),
        evaluator,
    )
    assert out.status == "converged"
    assert out.step_norm <= 1e-6


# ------------------------------------------------------------ evaluation


def test_empty_intersection_is_a_fixed_point():
    cfg = RingConfig()
    T0 = _baseline_vector(cfg)
    system = assemble_timing_constraints(cfg, G_MIN, G_MAX, T_CLR)
    result = coordinate(_problems(cfg, {}), system, T0, now=0.0)
    assert result.status == "converged"
    assert result.cost == pytest.approx(0.0, abs=1e-12)
    assert np.abs(result.T - T0).max() < 1e-9
    assert all(tr == [] for tr in result.tracks.values())
    assert result.kkt_residual <= 1e-6


def test_evaluator_caches_per_movement():
    cfg = RingConfig()
    T = _baseline_vector(cfg)
    problems = _problems(cfg, {1: ((150.0, 10.0),), 2: ((150.0, 10.0),)})
    evaluator = UpperEvaluator(problems, cfg, now=0.0, warm_T=T)
    ev1 = evaluator(T)
    first = evaluator.qp_solves
    assert first >= 8  # at least one solve per movement, usually several
    ev2 = evaluator(T)
    assert evaluator.qp_solves == first  # repeat evaluation is all cache hits
    assert evaluator.evaluations == 2
    assert ev2.cost == pytest.approx(ev1.cost)
    T2 = T.copy()
    T2[cfg.index(1, "e", 1)] += 0.5
    evaluator(T2)
    delta = evaluator.qp_solves - first
    assert 1 <= delta <= 2  # only the touched movement re-solves


# ------------------------------------------------------ full coordination

# two phases per ring: serving the queue in the next cycle means idling
# through the whole cross-street green, so extending the current green has
# a real price signal to fight against
_QCFG = RingConfig(ring1=(1, 2), ring2=(5, 6), barrier_pairs=((2, 6),), cycles=2)
_QUEUE = ((188.0, 0.0), (172.0, 0.0))


def _queued_vector(e):
    """Plan whose first green for movement 1 ends at ``e``, rest at minimum."""
    T = np.zeros(_QCFG.dim)
    for first, second in ((1, 2), (5, 6)):
        e1 = e if first == 1 else G_MIN
        T[_QCFG.index(first, "s", 1)] = 0.0
        T[_QCFG.index(first, "e", 1)] = e1
        T[_QCFG.index(second, "s", 1)] = e1 + T_CLR
        T[_QCFG.index(second, "e", 1)] = e + 8.0
        T[_QCFG.index(first, "s", 2)] = e + 10.0
        T[_QCFG.index(first, "e", 2)] = e + 16.0
        T[_QCFG.index(second, "s", 2)] = e + 18.0
        T[_QCFG.index(second, "e", 2)] = e + 24.0
    return T


def _queued_setup():
    problems = _problems(_QCFG, {1: _QUEUE})
    T0 = _queued_vector(G_MIN)
    frozen = committed_phases(_QCFG, T0, now=0.0)
    system = assemble_timing_constraints(
        _QCFG, G_MIN, G_MAX, T_CLR, now=0.0, frozen=frozen
    )
    return problems, T0, system


def test_upper_gradient_matches_directional_difference():
    problems, _, _ = _queued_setup()
    direction = _queued_vector(9.0) - _queued_vector(8.0)
    h = 1e-4
    ev = evaluate_upper_cost(_queued_vector(8.0), problems, _QCFG, now=0.0)
    lo = evaluate_upper_cost(_queued_vector(8.0 - h), problems, _QCFG, now=0.0).cost
    hi = evaluate_upper_cost(_queued_vector(8.0 + h), problems, _QCFG, now=0.0).cost
    fd = (hi - lo) / (2 * h)
    assert ev.gradient @ direction == pytest.approx(fd, rel=1e-3, abs=1e-6)


def test_queue_pressure_extends_green_to_scan_optimum():
    problems, T0, system = _queued_setup()
    trace = []
    result = coordinate(problems, system, T0, now=0.0, trace=trace)
    e_final = result.T[_QCFG.index(1, "e", 1)]
    assert e_final > G_MIN + 1.5  # queue pushed the green end out

    scan = [
        evaluate_upper_cost(_queued_vector(e), problems, _QCFG, now=0.0).cost
        for e in np.arange(G_MIN, G_MAX + 1e-9, 0.5)
    ]
    assert result.cost <= min(scan) + 0.1

    costs = [row["cost"] for row in trace]
    assert all(b <= a + 1e-9 for a, b in zip(costs, costs[1:]))
    assert validate_timing(result.T, system, tol=1e-9) == []
    assert result.T[_QCFG.index(1, "s", 1)] == 0.0  # commitment survives optimization


def test_coordinate_reports_tracks_for_chosen_count():
    problems, T0, system = _queued_setup()
    result = coordinate(problems, system, T0, now=0.0)
    assert set(result.tracks) == {1, 2, 5, 6}
    assert result.chosen_b[5] == 0
    b1 = result.chosen_b[1]
    tracks = result.tracks[1]
    assert len(tracks) == 2
    X = problems[1].stop_line
    for i, tr in enumerate(tracks):
        crossed = tr.states[-1, 0] >= X
        assert crossed == (i < b1)


def test_symmetric_demand_yields_symmetric_timing():
    cfg = RingConfig()
    T0 = _baseline_vector(cfg)
    problems = _problems(cfg, {2: ((150.0, 10.0),), 6: ((150.0, 10.0),)})
    frozen = committed_phases(cfg, T0, now=0.0)
    system = assemble_timing_constraints(cfg, G_MIN, G_MAX, T_CLR, now=0.0, frozen=frozen)
    result = coordinate(problems, system, T0, now=0.0)
    for a, b in ((1, 5), (2, 6), (3, 7), (4, 8)):
        for l in (1, 2):
            for kind in ("s", "e"):
                assert result.T[cfg.index(a, kind, l)] == pytest.approx(
                    result.T[cfg.index(b, kind, l)], abs=1e-6
                )
    assert result.chosen_b[2] == result.chosen_b[6]


def test_committed_phase_survives_replan():
    cfg = RingConfig()
    T0 = _baseline_vector(cfg)
    now = 14.0
    frozen = committed_phases(cfg, T0, now)
    system = assemble_timing_constraints(cfg, G_MIN, G_MAX, T_CLR, now=now, frozen=frozen)
    problems = _problems(cfg, {1: ((150.0, 10.0),)}, M=40)
    result = coordinate(problems, system, T0, now=now)
    assert result.T[cfg.index(1, "s", 1)] == 0.0
    assert result.T[cfg.index(1, "e", 1)] == 13.0
    assert validate_timing(result.T, system, tol=1e-9) == []


def test_choose_trajectories_picks_cheapest_feasible_count():
    cfg = RingConfig()
    T = _baseline_vector(cfg)
    problems = _problems(cfg, {1: ((190.0, 0.0), (185.0, 0.0))})
    tracks, chosen = choose_trajectories(problems, cfg, T, now=0.0)
    ev = evaluate_upper_cost(T, problems, cfg, now=0.0)
    best = min((s for s in ev.samples[1] if s.feasible), key=lambda s: s.value)
    assert chosen[1] == best.b
    assert len(tracks[1]) == 2
    assert chosen[3] == 0 and tracks[3] == []
