"""Independent oracles used to freeze expected values before testing.

Everything here is deliberately naive (enumeration, dense integration,
finite differences) and shares no code path with the package.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def active_set_qp(H, f, A=None, a=None, G=None, g=None):
    """Brute-force reference solve of a tiny convex QP by active-set enumeration.

    Tries every subset of inequality rows as the active set, solves the
    equality-constrained KKT system, and keeps the best feasible candidate
    with nonnegative multipliers.  Returns (x, value) or None if no
    candidate works (infeasible/unbounded within this enumeration).
    """
    H = np.atleast_2d(np.asarray(H, float))
    f = np.asarray(f, float).ravel()
    n = f.size
    A = np.zeros((0, n)) if A is None else np.atleast_2d(A)
    a = np.zeros(0) if a is None else np.asarray(a, float).ravel()
    G = np.zeros((0, n)) if G is None else np.atleast_2d(G)
    g = np.zeros(0) if g is None else np.asarray(g, float).ravel()
    best = None
    for r in range(len(g) + 1):
        for S in itertools.combinations(range(len(g)), r):
            S = list(S)
            E = np.vstack([A, G[S]])
            e = np.concatenate([a, g[S]])
            m = E.shape[0]
            K = np.block([[H, E.T], [E, np.zeros((m, m))]])
            rhs = np.concatenate([-f, -e])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(sol)):
                continue
            x, mult = sol[:n], sol[n + len(a):]
            if len(g) and np.any(G @ x + g > 1e-8):
                continue
            if len(S) and np.any(mult < -1e-8):
                continue
            val = 0.5 * x @ H @ x + f @ x
            if best is None or val < best[1] - 1e-12:
                best = (x, val)
    return best


def fd_gradient(fun, x0: float, eps: float = 1e-5) -> float:
    return (fun(x0 + eps) - fun(x0 - eps)) / (2 * eps)


def fd_hessian_diag(fun, x0: float, eps: float = 1e-2) -> float:
    return (fun(x0 + eps) - 2 * fun(x0) + fun(x0 - eps)) / eps**2


def fd_gradient_vec(fun, x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x0 = np.asarray(x0, float)
    out = np.zeros_like(x0)
    for i in range(x0.size):
        d = np.zeros_like(x0)
        d[i] = eps
        out[i] = (fun(x0 + d) - fun(x0 - d)) / (2 * eps)
    return out


def fd_jacobian_vec(fun, x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector function of a vector."""
    x0 = np.asarray(x0, float)
    cols = []
    for i in range(x0.size):
        d = np.zeros_like(x0)
        d[i] = eps
        cols.append((np.asarray(fun(x0 + d)) - np.asarray(fun(x0 - d))) / (2 * eps))
    return np.stack(cols, axis=-1)


def fd_hessian_vec(fun, x0: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian of a scalar function of a vector."""
    x0 = np.asarray(x0, float)
    n = x0.size
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            di = np.zeros(n)
            dj = np.zeros(n)
            di[i] = eps
            dj[j] = eps
            fpp = fun(x0 + di + dj)
            fpm = fun(x0 + di - dj)
            fmp = fun(x0 - di + dj)
            fmm = fun(x0 - di - dj)
            out[i, j] = out[j, i] = (fpp - fpm - fmp + fmm) / (4 * eps**2)
    return out


def dense_trapezoid_position(p0, v0, inputs, t_s, tau, dt=1e-4):
    """Position at tau by dense trapezoidal integration of piecewise-constant u.

    Exact (up to roundoff) for this system since speed is piecewise linear,
    so it independently checks the closed-form interpolation.
    """
    inputs = np.asarray(inputs, float)
    p, v, t = float(p0), float(v0), 0.0
    while t < tau - 1e-15:
        k = min(int(t / t_s + 1e-12), len(inputs) - 1)
        step = min(dt, tau - t, (k + 1) * t_s - t)
        u = inputs[k]
        v_new = v + u * step
        p += 0.5 * (v + v_new) * step
        v = v_new
        t += step
    return p


def random_convex_qp(rng: np.random.Generator, n: int, me: int, mi: int):
    """A bounded, feasible random convex QP with mixed tight/slack rows."""
    L = rng.standard_normal((n, n)) / np.sqrt(n)
    H = L.T @ L + 0.1 * np.eye(n)
    f = rng.standard_normal(n)
    x_feas = rng.standard_normal(n)
    A = rng.standard_normal((me, n)) if me else None
    a = -(A @ x_feas) if me else None
    G = rng.standard_normal((mi, n)) if mi else None
    g = -(G @ x_feas) - rng.uniform(0.0, 2.0, mi) if mi else None
    return H, f, A, a, G, g


def brute_force_movement_value(
    p0,
    v0,
    params,
    M,
    t_s,
    X,
    q_u,
    q_v,
    t_start=None,
    t_end=None,
    t_next=None,
    cross=True,
    levels=9,
    suffix_len=5,
):
    """Best cost over a uniform control grid for ONE vehicle, or None.

    Enumerates all levels**M piecewise-constant input sequences drawn from a
    uniform grid on [u_min, u_max], rejecting those violating the speed box or
    the signal rows (behind X at t_start, past X at t_end when cross, behind X
    at t_next when not cross).  The restriction to grid inputs means the
    returned cost upper-bounds the continuous optimum.
    """
    us = np.linspace(params.u_min, params.u_max, levels)
    vd = params.v_desired
    M2 = min(suffix_len, M)
    M1 = M - M2
    digits = np.array(list(itertools.product(range(levels), repeat=M2)), dtype=np.int64)
    u_suffix = us[digits]  # (S, M2)
    S = u_suffix.shape[0]

    def interp(pk, vk, uk, delta):
        return pk + vk * delta + 0.5 * uk * delta * delta

    instants = []
    if t_start is not None and t_start > 1e-12:
        instants.append((t_start, +1.0))
    if cross:
        if t_end is None or t_end > M * t_s + 1e-12:
            return None
        instants.append((t_end, -1.0))
    elif t_next is not None:
        instants.append((min(t_next, M * t_s), +1.0))

    best = np.inf
    for prefix in itertools.product(range(levels), repeat=M1):
        p, v = float(p0), float(v0)
        pre_p, pre_v = [p], [v]
        cost_pre = 0.0
        ok = True
        for d in prefix:
            u = us[d]
            cost_pre += q_u * u * u + q_v * (v - vd) ** 2
            p, v = p + v * t_s + 0.5 * u * t_s * t_s, v + u * t_s
            if not params.v_min - 1e-9 <= v <= params.v_max + 1e-9:
                ok = False
                break
            pre_p.append(p)
            pre_v.append(v)
        if not ok:
            continue
        ps = np.empty((S, M2 + 1))
        vs = np.empty((S, M2 + 1))
        ps[:, 0] = p
        vs[:, 0] = v
        feas = np.ones(S, dtype=bool)
        cost = np.full(S, cost_pre)
        for k in range(M2):
            u = u_suffix[:, k]
            cost += q_u * u * u + q_v * (vs[:, k] - vd) ** 2
            ps[:, k + 1] = ps[:, k] + vs[:, k] * t_s + 0.5 * u * t_s * t_s
            vs[:, k + 1] = vs[:, k] + u * t_s
            feas &= (vs[:, k + 1] >= params.v_min - 1e-9) & (vs[:, k + 1] <= params.v_max + 1e-9)
        for tau, sign in instants:
            k = min(int(math.floor(tau / t_s)), M - 1)
            delta = tau - k * t_s
            if k < M1:
                u = us[prefix[k]]
                pos = interp(pre_p[k], pre_v[k], u, delta)
                if sign * (pos - X) > 1e-9:
                    feas[:] = False
            else:
                kk = k - M1
                pos = interp(ps[:, kk], vs[:, kk], u_suffix[:, kk], delta)
                feas &= sign * (pos - X) <= 1e-9
        if feas.any():
            best = min(best, float(cost[feas].min()))
    return None if not np.isfinite(best) else best
