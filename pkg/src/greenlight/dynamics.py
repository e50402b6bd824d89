"""Double-integrator vehicle kinematics on a fixed shooting grid.

A vehicle is a point mass with position ``p`` along its approach path and
speed ``v``; the control is a piecewise-constant acceleration ``u`` held over
each shooting interval of length ``t_s``.  The discrete step is the exact
integral of the continuous dynamics, so positions interpolate quadratically
inside an interval and the closed forms below are exact, not approximations.

Decision-vector layout used by the trajectory QPs (one vehicle slot):
states time-major as ``(p_0, v_0, p_1, v_1, ..., p_M, v_M)`` followed by
inputs ``(u_0, ..., u_{M-1})``; the column helpers below are the single
source of truth for that layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "VehicleState",
    "VehicleParams",
    "VehicleTrack",
    "AffineRow",
    "step_dynamics",
    "position_at_time",
    "speed_at_time",
    "box_constraint_rows",
    "position_col",
    "speed_col",
    "input_col",
    "slot_size",
]


@dataclass(frozen=True)
class VehicleState:
    p: float
    v: float


@dataclass(frozen=True)
class VehicleParams:
    """Speed/acceleration envelope and car-following data for one vehicle class."""

    v_min: float = 0.0
    v_max: float = 14.0
    u_min: float = -2.0
    u_max: float = 2.0
    v_desired: float = 12.27
    headway: float = 3.0

    def __post_init__(self) -> None:
        if not self.v_min <= self.v_desired <= self.v_max:
            raise ValueError("v_desired must lie within [v_min, v_max]")
        if self.u_min >= 0 or self.u_max <= 0:
            raise ValueError("acceleration bounds must straddle zero")


@dataclass
class VehicleTrack:
    """One planned trajectory: M+1 knot states and M held inputs."""

    states: np.ndarray  # (M+1, 2) rows of (p, v)
    inputs: np.ndarray  # (M,)
    t_s: float

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.states.ndim != 2 or self.states.shape[1] != 2:
            raise ValueError("states must be (M+1, 2)")
        if self.states.shape[0] != self.inputs.shape[0] + 1:
            raise ValueError("need exactly one more state than inputs")
        if self.t_s <= 0:
            raise ValueError("t_s must be positive")

    @property
    def horizon(self) -> int:
        return len(self.inputs)


def step_dynamics(state: VehicleState, u: float, dt: float) -> VehicleState:
    """Exact constant-acceleration step over ``dt`` seconds."""
    return VehicleState(state.p + state.v * dt + 0.5 * u * dt * dt, state.v + u * dt)


def _knot(track: VehicleTrack, tau: float) -> tuple[int, float]:
    """Shooting interval index and offset for an instant in [0, M*t_s]."""
    M = track.horizon
    if tau < 0 or tau > M * track.t_s + 1e-12:
        raise ValueError(f"tau={tau} outside the track horizon [0, {M * track.t_s}]")
    k = min(int(math.floor(tau / track.t_s)), M - 1)
    return k, tau - k * track.t_s


def position_at_time(track: VehicleTrack, tau: float) -> float:
    """Interpolated position at ``tau`` seconds from the track origin.

    Uses the exact quadratic inside shooting interval ``k = floor(tau /
    t_s)`` (clamped to the last interval at ``tau = M * t_s``).
    """
    k, delta = _knot(track, tau)
    p, v = track.states[k]
    return float(p + v * delta + 0.5 * track.inputs[k] * delta * delta)


def speed_at_time(track: VehicleTrack, tau: float) -> float:
    """Interpolated speed at ``tau``; the time derivative of position_at_time."""
    k, delta = _knot(track, tau)
    return float(track.states[k, 1] + track.inputs[k] * delta)


# --- decision-vector layout -------------------------------------------------

def slot_size(M: int) -> int:
    """Decision variables used by one vehicle over an M-step horizon."""
    return 3 * M + 2


def position_col(k: int) -> int:
    return 2 * k


def speed_col(k: int) -> int:
    return 2 * k + 1


def input_col(M: int, k: int) -> int:
    return 2 * (M + 1) + k


@dataclass(frozen=True)
class AffineRow:
    """One affine inequality ``sum(coeff * x[col]) + offset <= 0``."""

    cols: tuple[int, ...]
    coeffs: tuple[float, ...]
    offset: float
    kind: str


def box_constraint_rows(M: int, params: VehicleParams) -> list[AffineRow]:
    """Speed and input bound rows for one vehicle slot.

    Speeds are bounded at every knot ``k in [0, M]`` and inputs over every
    interval ``k in [0, M)``; bounds that are infinite emit no row.
    """
    rows: list[AffineRow] = []
    for k in range(M + 1):
        c = speed_col(k)
        if np.isfinite(params.v_max):
            rows.append(AffineRow((c,), (1.0,), -params.v_max, "vmax"))
        if np.isfinite(params.v_min):
            rows.append(AffineRow((c,), (-1.0,), params.v_min, "vmin"))
    for k in range(M):
        c = input_col(M, k)
        if np.isfinite(params.u_max):
            rows.append(AffineRow((c,), (1.0,), -params.u_max, "umax"))
        if np.isfinite(params.u_min):
            rows.append(AffineRow((c,), (-1.0,), params.u_min, "umin"))
    return rows
