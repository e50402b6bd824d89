"""Primal-dual interior-point solver for convex QPs with parametric rows.

Solves ``min 0.5 x'Hx + f'x  s.t.  Ax + a = 0,  Gx + g <= 0`` with a
Mehrotra predictor-corrector iteration on the perturbed KKT conditions.
Inequality rows with a single nonzero coefficient (variable bounds) are
eliminated into the diagonal of the reduced system, which roughly halves the
factorized dimension on trajectory problems; the algebra is exact, so the
iterates match the unreduced Newton step.

Constraint rows may declare derivatives with respect to named scalar
parameters (both of the row's coefficient vector and of its constant
offset).  After a solve, the retained factorization of the final KKT system
yields, per parameter: the optimal-value gradient (multiplier-weighted row
derivatives), the solution sensitivity ``dY/dtheta``, and the optimal-value
Hessian.  All of these are exact for the barrier-smoothed problem at the
solver's exit barrier, which is how the callers differentiate through
otherwise nonsmooth active-set changes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

__all__ = [
    "RowParamDep",
    "QPInstance",
    "QPSolution",
    "IPSettings",
    "solve_qp",
    "value_gradient",
    "solution_sensitivity",
    "value_hessian",
]


@dataclass(frozen=True)
class RowParamDep:
    """Derivative data of one constraint row w.r.t. one scalar parameter.

    The row residual is ``r(x, theta) = coef(theta)'x + const(theta)``;
    ``dcols/dvals`` hold the sparse derivative of the coefficient vector and
    ``dconst`` the derivative of the offset (second derivatives likewise).
    Distinct parameters are assumed to enter a row independently (no mixed
    second derivatives), which holds for every caller in this package.
    """

    row: int
    eq: bool = False
    dcols: tuple[int, ...] = ()
    dvals: tuple[float, ...] = ()
    dconst: float = 0.0
    d2cols: tuple[int, ...] = ()
    d2vals: tuple[float, ...] = ()
    d2const: float = 0.0


@dataclass
class QPInstance:
    """One convex QP; matrices may be dense or any scipy-sparse format."""

    H: sp.spmatrix | np.ndarray
    f: np.ndarray
    A: sp.spmatrix | np.ndarray | None = None
    a: np.ndarray | None = None
    G: sp.spmatrix | np.ndarray | None = None
    g: np.ndarray | None = None
    params: Mapping[str, Sequence[RowParamDep]] = field(default_factory=dict)
    eq_kinds: list[str] = field(default_factory=list)
    ineq_kinds: list[str] = field(default_factory=list)
    objective_constant: float = 0.0

    def __post_init__(self) -> None:
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = self.f.size
        self.H = sp.csc_matrix(self.H)
        if self.H.shape != (n, n):
            raise ValueError("H shape mismatch")
        if self.A is None or (hasattr(self.A, "shape") and self.A.shape[0] == 0):
            self.A = sp.csc_matrix((0, n))
            self.a = np.zeros(0)
        else:
            self.A = sp.csc_matrix(self.A)
            self.a = np.asarray(self.a, dtype=float).ravel()
        if self.G is None or (hasattr(self.G, "shape") and self.G.shape[0] == 0):
            self.G = sp.csc_matrix((0, n))
            self.g = np.zeros(0)
        else:
            self.G = sp.csc_matrix(self.G)
            self.g = np.asarray(self.g, dtype=float).ravel()
        if self.A.shape != (self.a.size, n) or self.G.shape != (self.g.size, n):
            raise ValueError("constraint shape mismatch")

    @property
    def n(self) -> int:
        return self.f.size


@dataclass
class IPSettings:
    tol: float = 1e-8
    max_iter: int = 100
    reg: float = 1e-11
    infeas_window: int = 20
    verbose: bool = False
    trace: list | None = None  # when a list, (x, lam, mu, s) per iterate is appended


@dataclass
class QPSolution:
    """Solver output plus the retained final KKT factorization."""

    x: np.ndarray
    eq_mult: np.ndarray
    ineq_mult: np.ndarray
    slack: np.ndarray
    value: float
    status: str  # optimal | infeasible | max_iterations
    iterations: int
    gap: float
    residual: float
    _core: "_IPCore" = None  # type: ignore[assignment]

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


class _IPCore:
    """Reduced-KKT assembly/factorization shared by the solve and the sensitivities.

    The reduced system eliminates slacks, complementarity rows and the
    single-nonzero (box) inequality rows, leaving::

        [ H + diag(w)   A'   Gg' ] [dx ]   [ rhs1 ]
        [ A            -dI    0  ] [dlam] = [ rhs2 ]
        [ Gg            0   -Dg  ] [dmu_g] [ rhs3 ]

    with ``w`` collecting the regularization plus ``(mu/s) coef^2`` of every
    box row and ``Dg = s_g / mu_g``.
    """

    def __init__(self, qp: QPInstance, reg: float):
        n = qp.n
        self.qp = qp
        self.n = n
        G = qp.G.tocsr()
        nnz_per_row = np.diff(G.indptr)
        self.box = np.flatnonzero(nnz_per_row == 1)
        self.gen = np.flatnonzero(nnz_per_row != 1)
        if len(self.box):
            # column and coefficient of each box row
            self.box_col = G.indices[G.indptr[self.box]]
            self.box_coef = G.data[G.indptr[self.box]]
        else:
            self.box_col = np.zeros(0, dtype=int)
            self.box_coef = np.zeros(0)
        self.Gg = G[self.gen].tocsc() if len(self.gen) else sp.csc_matrix((0, n))
        self.G = G
        self.A = qp.A.tocsr()
        me, mg = self.A.shape[0], self.Gg.shape[0]
        self.me, self.mg = me, mg
        self.dim = n + me + mg

        Hcoo = qp.H.tocoo()
        off = Hcoo.row != Hcoo.col
        self.H_diag = np.zeros(n)
        np.add.at(self.H_diag, Hcoo.row[~off], Hcoo.data[~off])
        self.reg = reg * (1.0 + np.abs(self.H_diag).max(initial=0.0))

        Acoo = qp.A.tocoo()
        Ggcoo = self.Gg.tocoo()
        rows = np.concatenate(
            [
                Hcoo.row[off],
                np.arange(n),
                n + Acoo.row,
                Acoo.col,
                n + me + Ggcoo.row,
                Ggcoo.col,
                n + np.arange(me),
                n + me + np.arange(mg),
            ]
        )
        cols = np.concatenate(
            [
                Hcoo.col[off],
                np.arange(n),
                Acoo.col,
                n + Acoo.row,
                Ggcoo.col,
                n + me + Ggcoo.row,
                n + np.arange(me),
                n + me + np.arange(mg),
            ]
        )
        k = 0
        vals = np.concatenate(
            [
                Hcoo.data[off],
                np.zeros(n),
                Acoo.data,
                Acoo.data,
                Ggcoo.data,
                Ggcoo.data,
                np.full(me, -self.reg),
                np.zeros(mg),
            ]
        )
        k = Hcoo.data[off].size
        self.sl_diag = slice(k, k + n)
        k += n + 2 * Acoo.data.size + 2 * Ggcoo.data.size + me
        self.sl_D = slice(k, k + mg)
        self.vals0 = vals
        perm = np.lexsort((rows, cols))
        self.perm = perm
        self.csc_indices = rows[perm].astype(np.int32)
        self.csc_indptr = np.searchsorted(cols[perm], np.arange(self.dim + 1)).astype(np.int32)
        self.lu = None

    def factor(self, s: np.ndarray, mu: np.ndarray) -> None:
        """Refactorize the reduced KKT at the given slack/multiplier point."""
        w = np.full(self.n, self.reg) + self.H_diag
        if len(self.box):
            np.add.at(w, self.box_col, (mu[self.box] / s[self.box]) * self.box_coef**2)
        vals = self.vals0.copy()
        vals[self.sl_diag] = w
        if self.mg:
            vals[self.sl_D] = -(s[self.gen] / mu[self.gen])
        K = sp.csc_matrix(
            (vals[self.perm], self.csc_indices, self.csc_indptr),
            shape=(self.dim, self.dim),
        )
        self.lu = spla.splu(K)
        self._s = s
        self._mu = mu

    def solve(
        self, r_d: np.ndarray, r_e: np.ndarray, r_i: np.ndarray, r_c: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Newton direction for residuals (dual, eq, ineq, complementarity).

        Solves the full perturbed-KKT linearization; box rows are folded in
        and their multiplier/slack directions reconstructed afterwards.
        Returns ``(dx, dlam, dmu, ds)`` with mu/s in original row order.
        """
        s, mu = self._s, self._mu
        rhs = np.empty(self.dim)
        rhs1 = -r_d
        if len(self.box):
            t = (-r_c[self.box] + mu[self.box] * r_i[self.box]) / s[self.box]
            np.subtract.at(rhs1, self.box_col, self.box_coef * t)
        rhs[: self.n] = rhs1
        rhs[self.n : self.n + self.me] = -r_e
        if self.mg:
            rhs[self.n + self.me :] = -r_i[self.gen] + r_c[self.gen] / mu[self.gen]
        sol = self.lu.solve(rhs)
        dx = sol[: self.n]
        dlam = sol[self.n : self.n + self.me]
        dmu = np.zeros(len(s))
        if self.mg:
            dmu[self.gen] = sol[self.n + self.me :]
        if len(self.box):
            dmu[self.box] = (
                -r_c[self.box] + mu[self.box] * r_i[self.box]
            ) / s[self.box] + (mu[self.box] / s[self.box]) * self.box_coef * dx[self.box_col]
        ds = -r_i - (self.G @ dx)
        return dx, dlam, dmu, ds


def _initial_point(
    qp: QPInstance, x0: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n = qp.n
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    lam = np.zeros(qp.A.shape[0])
    r = qp.G @ x + qp.g
    s = np.maximum(1.0, -r)
    mu = np.ones(len(s))
    return x, lam, mu, s


def solve_qp(
    qp: QPInstance, settings: IPSettings | None = None, x0: np.ndarray | None = None
) -> QPSolution:
    """Solve one QP.  Deterministic: identical inputs give identical iterates.

    ``x0`` seeds the primal iterate only; multipliers and slacks start at the
    usual conservative point, so a bad guess costs nothing but a good one
    (anything near the feasible set) saves the iterations otherwise spent
    travelling there.
    """
    st = settings or IPSettings()
    n, me, mi = qp.n, qp.A.shape[0], qp.G.shape[0]
    core = _IPCore(qp, st.reg)

    def obj(x: np.ndarray) -> float:
        return float(0.5 * x @ (qp.H @ x) + qp.f @ x + qp.objective_constant)

    if mi == 0:
        # equality-constrained (or unconstrained): one linear KKT solve
        core.factor(np.zeros(0), np.zeros(0))
        dx, dlam, _, _ = core.solve(qp.f.copy(), qp.a.copy(), np.zeros(0), np.zeros(0))
        x, lam = dx, dlam
        r_d = qp.H @ x + qp.f + qp.A.T @ lam
        res = max(
            np.abs(r_d).max(initial=0.0) / (1.0 + np.abs(qp.f).max(initial=0.0)),
            np.abs(qp.A @ x + qp.a).max(initial=0.0) / (1.0 + np.abs(qp.a).max(initial=0.0)),
        )
        status = "optimal" if res <= max(st.tol, 1e-7) else "max_iterations"
        return QPSolution(x, lam, np.zeros(0), np.zeros(0), obj(x), status, 1, 0.0, res, core)

    x, lam, mu, s = _initial_point(qp, x0)
    scale_f = 1.0 + np.abs(qp.f).max(initial=0.0)
    scale_a = 1.0 + (np.abs(qp.a).max(initial=0.0) if me else 0.0)
    scale_g = 1.0 + np.abs(qp.g).max(initial=0.0)
    prim_hist: list[float] = []
    status = "max_iterations"
    it = 0
    for it in range(1, st.max_iter + 1):
        r_d = qp.H @ x + qp.f + qp.A.T @ lam + qp.G.T @ mu
        r_e = qp.A @ x + qp.a
        r_i = qp.G @ x + qp.g + s
        gap = float(s @ mu)
        res_d = np.abs(r_d).max() / scale_f
        res_e = np.abs(r_e).max(initial=0.0) / scale_a
        res_i = np.abs(r_i).max(initial=0.0) / scale_g
        res = max(res_d, res_e, res_i)
        rel_gap = gap / (1.0 + abs(obj(x)))
        if st.trace is not None:
            st.trace.append((x.copy(), lam.copy(), mu.copy(), s.copy()))
        if st.verbose:
            logger.debug(
                "ip iter=%d res_d=%.2e res_e=%.2e res_i=%.2e gap=%.2e", it, res_d, res_e, res_i, rel_gap
            )
        if res <= st.tol and rel_gap <= st.tol:
            status = "optimal"
            break
        prim = max(res_e, res_i)
        prim_hist.append(prim)
        if it > st.infeas_window:
            stalled = prim > 0.5 * prim_hist[-st.infeas_window] and prim > 1e3 * st.tol
            blowup = max(np.abs(mu).max(initial=0.0), np.abs(lam).max(initial=0.0)) > 1e10
            if (stalled and rel_gap < 1e-4 * prim) or (blowup and prim > 1e3 * st.tol):
                status = "infeasible"
                break

        core.factor(s, mu)
        # predictor
        dx, dlam, dmu, ds = core.solve(r_d, r_e, r_i, s * mu)
        alpha_aff = _max_step(s, ds, mu, dmu)
        mu_mean = gap / mi
        mu_aff = float((s + alpha_aff * ds) @ (mu + alpha_aff * dmu)) / mi
        sigma = min(1.0, max(0.0, mu_aff / mu_mean) ** 3)
        # corrector reuses the factorization
        r_c = s * mu + ds * dmu - sigma * mu_mean
        dx, dlam, dmu, ds = core.solve(r_d, r_e, r_i, r_c)
        alpha = _max_step(s, ds, mu, dmu)
        # centrality correctors (Gondzio): push outlier pairwise products
        # toward the target barrier with further backsolves on the same
        # factorization, kept only while they buy a meaningfully longer step
        for _ in range(2):
            if alpha >= 0.995:
                break
            alpha_t = min(1.0, alpha + 0.3)
            v = (s + alpha_t * ds) * (mu + alpha_t * dmu)
            t = np.clip(v, 0.1 * sigma * mu_mean, 10.0 * sigma * mu_mean)
            if not np.any(v != t):
                break
            cx, clam, cmu, cs = core.solve(np.zeros(n), np.zeros(me), np.zeros(mi), v - t)
            alpha_c = _max_step(s, ds + cs, mu, dmu + cmu)
            if alpha_c < alpha + 0.05:
                break
            dx += cx
            dlam += clam
            dmu += cmu
            ds += cs
            alpha = alpha_c
        eta = 0.99 if rel_gap > 1e-5 else 0.999
        alpha = eta * alpha
        x += alpha * dx
        lam += alpha * dlam
        mu += alpha * dmu
        s += alpha * ds

    if status == "max_iterations" and res <= 1e2 * st.tol and rel_gap <= 1e2 * st.tol:
        status = "optimal"  # close enough for downstream use; residual is reported
    # refactor at the exit point so the retained factorization matches the
    # returned iterate (sensitivities differentiate the smoothed KKT there)
    if status == "optimal":
        core.factor(s, mu)
    elif core.lu is None:
        core.factor(s, mu)
    return QPSolution(x, lam, mu, s, obj(x), status, it, float(s @ mu), res, core)


def _max_step(s: np.ndarray, ds: np.ndarray, mu: np.ndarray, dmu: np.ndarray) -> float:
    alpha = 1.0
    neg = ds < 0
    if neg.any():
        alpha = min(alpha, float(np.min(-s[neg] / ds[neg])))
    neg = dmu < 0
    if neg.any():
        alpha = min(alpha, float(np.min(-mu[neg] / dmu[neg])))
    return alpha


def _row_deriv(qp: QPInstance, sol: QPSolution, dep: RowParamDep, second: bool = False) -> float:
    """d(residual)/dtheta (or second derivative) of one row at the solution."""
    if second:
        cols, vals, const = dep.d2cols, dep.d2vals, dep.d2const
    else:
        cols, vals, const = dep.dcols, dep.dvals, dep.dconst
    out = const
    for c, v in zip(cols, vals):
        out += v * sol.x[c]
    return out


def value_gradient(qp: QPInstance, sol: QPSolution, name: str) -> float:
    """d(optimal value)/d(parameter): multiplier-weighted row derivatives."""
    total = 0.0
    for dep in qp.params.get(name, ()):
        mult = sol.eq_mult[dep.row] if dep.eq else sol.ineq_mult[dep.row]
        total += mult * _row_deriv(qp, sol, dep)
    return total


def solution_sensitivity(
    qp: QPInstance, sol: QPSolution, name: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dx, dlam, dmu)/d(parameter) from the retained KKT factorization.

    Differentiates the barrier-smoothed KKT conditions at the exit point:
    the complementarity perturbation is held fixed, so the map is smooth in
    the parameter even across active-set changes.
    """
    core: _IPCore = sol._core
    n = qp.n
    q1 = np.zeros(n)
    q2 = np.zeros(qp.A.shape[0])
    q3 = np.zeros(qp.G.shape[0])
    for dep in qp.params.get(name, ()):
        mult = sol.eq_mult[dep.row] if dep.eq else sol.ineq_mult[dep.row]
        for c, v in zip(dep.dcols, dep.dvals):
            q1[c] += mult * v
        r = _row_deriv(qp, sol, dep)
        if dep.eq:
            q2[dep.row] += r
        else:
            q3[dep.row] += r
    if qp.G.shape[0] == 0:
        dx, dlam, _, _ = core.solve(q1, q2, np.zeros(0), np.zeros(0))
        return dx, dlam, np.zeros(0)
    dx, dlam, dmu, _ = core.solve(q1, q2, q3, np.zeros_like(q3))
    return dx, dlam, dmu


def value_hessian(qp: QPInstance, sol: QPSolution, names: Sequence[str]) -> np.ndarray:
    """Hessian of the optimal value w.r.t. the named parameters (symmetrized).

    Entry (a, b) accumulates, over rows parameterized by ``theta_a``:
    ``dmult/dtheta_b * dr/dtheta_a`` plus ``mult * (d2r/dtheta_a^2 [a == b]
    + d(dr/dtheta_a)/dx . dx/dtheta_b)``.
    """
    k = len(names)
    sens = [solution_sensitivity(qp, sol, nm) for nm in names]
    Hv = np.zeros((k, k))
    for a, nm in enumerate(names):
        deps = qp.params.get(nm, ())
        for b in range(k):
            dxb, dlamb, dmub = sens[b]
            acc = 0.0
            for dep in deps:
                mult = sol.eq_mult[dep.row] if dep.eq else sol.ineq_mult[dep.row]
                dmult = dlamb[dep.row] if dep.eq else dmub[dep.row]
                acc += dmult * _row_deriv(qp, sol, dep)
                if a == b:
                    acc += mult * _row_deriv(qp, sol, dep, second=True)
                cross = 0.0
                for c, v in zip(dep.dcols, dep.dvals):
                    cross += v * dxb[c]
                acc += mult * cross
            Hv[a, b] += acc
    return 0.5 * (Hv + Hv.T)
