"""Dense convex QP solver.

Problems have the form::

    minimise    x' H x + f' x + c
    subject to  A_eq x = b_eq,   lower <= A_in x <= upper

and are solved by ADMM on the equilibrated problem (operator splitting in
the style of OSQP), with an active-set polishing step that solves the KKT
system of the guessed active set exactly. Everything is deterministic: the
iteration order is fixed and no randomisation is used.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import numerics

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


@dataclass
class MpcProblem:
    hessian: np.ndarray
    linear: np.ndarray
    constant: float = 0.0
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_in: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hessian = np.atleast_2d(np.asarray(self.hessian, dtype=np.float64))
        n = self.hessian.shape[0]
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(n)
        if self.a_eq is None:
            self.a_eq, self.b_eq = np.zeros((0, n)), np.zeros(0)
        if self.a_in is None:
            self.a_in, self.lower, self.upper = np.zeros((0, n)), np.zeros(0), np.zeros(0)
        self.a_eq = np.asarray(self.a_eq, dtype=np.float64).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=np.float64).ravel()
        self.a_in = np.asarray(self.a_in, dtype=np.float64).reshape(-1, n)
        r = self.a_in.shape[0]
        self.lower = np.broadcast_to(np.asarray(self.lower if self.lower is not None else -np.inf, dtype=np.float64), (r,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper if self.upper is not None else np.inf, dtype=np.float64), (r,)).copy()
        if self.hessian.shape != (n, n) or len(self.b_eq) != len(self.a_eq):
            raise ValueError("inconsistent QP dimensions")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n_vars(self) -> int:
        return self.hessian.shape[0]

    @property
    def n_inequalities(self) -> int:
        """Number of finite one-sided bounds."""
        return int(np.isfinite(self.lower).sum() + np.isfinite(self.upper).sum())

    def objective(self, x) -> float:
        return float(x @ self.hessian @ x + self.linear @ x + self.constant)


@dataclass
class QpSolution:
    g: np.ndarray
    objective: float
    kkt_residual: float
    status: str
    iterations: int = 0
    dual_eq: np.ndarray | None = None
    dual_in: np.ndarray | None = None
    u_star: np.ndarray | None = None
    y_star: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _inf_norm(*arrays) -> float:
    return max((float(np.max(np.abs(a))) for a in arrays if a.size), default=0.0)


def kkt_residuals(p, q, a, lo, hi, x, y) -> tuple[float, float, float]:
    """Scaled stationarity, primal and complementarity residuals.

    Uses the ``1/2 x'Px + q'x`` convention with stationarity
    ``Px + q + A'y = 0``; ``y > 0`` on upper-active rows, ``y < 0`` on
    lower-active rows.
    """
    px, aty, ax = p @ x, a.T @ y, a @ x
    stat = _inf_norm(px + q + aty) / max(1.0, _inf_norm(px, q, aty))
    ax_scale = max(1.0, _inf_norm(ax))
    viol = np.maximum(lo - ax, ax - hi) if ax.size else np.zeros(0)
    prim = max(0.0, float(viol.max(initial=0.0))) / ax_scale
    y_scale = max(1.0, _inf_norm(y))
    gap = np.where(y > 0, hi - ax, np.where(y < 0, ax - lo, 0.0))
    gap = np.where(np.isfinite(gap), np.abs(gap), np.inf)
    comp = np.minimum(np.abs(y) / y_scale, gap / ax_scale)
    return stat, prim, float(comp.max(initial=0.0))


def _ruiz(p, a, iters: int = 15):
    n, k = p.shape[0], a.shape[0]
    d, e = np.ones(n), np.ones(k)
    ps, as_ = p.copy(), a.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(ps).max(axis=0, initial=0.0), np.abs(as_).max(axis=0, initial=0.0))
        dd = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        row = np.abs(as_).max(axis=1, initial=0.0)
        ee = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        ps = dd[:, None] * ps * dd[None, :]
        as_ = ee[:, None] * as_ * dd[None, :]
        d *= dd
        e *= ee
    return d, e


def _polish(p, q, a, lo, hi, x, z, y):
    """Solve the equality-constrained QP of the active set guessed from (z, y)."""
    is_eq = lo == hi
    act_lo = is_eq | (z - lo < -y)
    act_hi = ~is_eq & (hi - z < y)
    act_lo &= np.isfinite(lo)
    act_hi &= np.isfinite(hi)
    idx = np.flatnonzero(act_lo | act_hi)
    rhs_b = np.where(act_lo, lo, hi)[idx]
    a_act = a[idx]
    n, k = p.shape[0], len(idx)
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = p
    kkt[:n, n:] = a_act.T
    kkt[n:, :n] = a_act
    sol = numerics.least_squares(kkt, np.concatenate([-q, rhs_b]))
    xp = sol[:n]
    yp = np.zeros_like(y)
    yp[idx] = sol[n:]
    # an active row whose multiplier has the wrong sign is not active
    yp[act_lo & ~is_eq] = np.minimum(yp[act_lo & ~is_eq], 0.0)
    yp[act_hi] = np.maximum(yp[act_hi], 0.0)
    return xp, yp


def solve_qp(problem: MpcProblem, tol: float = 1e-6, max_iters: int = 20000,
             check_every: int = 25) -> QpSolution:
    """Solve a convex QP; see the module docstring for the problem form.

    ``kkt_residual`` is the largest of the scaled stationarity, primal
    feasibility and complementarity residuals; ``status`` is ``optimal``
    once it is at most ``tol``.
    """
    n = problem.n_vars
    p = 2.0 * problem.hessian
    q = problem.linear
    n_eq = problem.a_eq.shape[0]

    if n_eq:
        x_ls = numerics.least_squares(problem.a_eq, problem.b_eq)
        mismatch = _inf_norm(problem.a_eq @ x_ls - problem.b_eq)
        if mismatch > tol * max(1.0, _inf_norm(problem.b_eq)):
            return QpSolution(x_ls, problem.objective(x_ls), mismatch, INFEASIBLE)

    a = np.vstack([problem.a_eq, problem.a_in])
    lo = np.concatenate([problem.b_eq, problem.lower])
    hi = np.concatenate([problem.b_eq, problem.upper])
    k = a.shape[0]

    def finish(x, y, it, status=None):
        r = max(kkt_residuals(p, q, a, lo, hi, x, y))
        if status is None:
            status = OPTIMAL if r <= tol else MAX_ITER
        return QpSolution(x, problem.objective(x), r, status, it, y[:n_eq].copy(), y[n_eq:].copy())

    # equilibration
    d, e = _ruiz(p, a)
    ps = d[:, None] * p * d[None, :]
    qs = d * q
    cost_scale = 1.0 / max(1.0, _inf_norm(ps @ np.ones(n)), _inf_norm(qs))
    ps *= cost_scale
    qs *= cost_scale
    as_ = e[:, None] * a * d[None, :]
    los, his = e * lo, e * hi

    sigma, alpha = 1e-6, 1.6
    rho = 0.1
    eq_rows = los == his
    free_rows = ~np.isfinite(los) & ~np.isfinite(his)

    def rho_vec(r):
        out = np.full(k, r)
        out[eq_rows] = 1e3 * r
        out[free_rows] = 1e-6
        return out

    def factor(rv):
        mat = ps + sigma * np.eye(n) + as_.T @ (rv[:, None] * as_)
        return scipy.linalg.cho_factor(mat, check_finite=False)

    rv = rho_vec(rho)
    fac = factor(rv)
    xs, zs, ys = np.zeros(n), np.zeros(k), np.zeros(k)
    best = None
    for it in range(1, max_iters + 1):
        rhs = sigma * xs - qs + as_.T @ (rv * zs - ys)
        xt = scipy.linalg.cho_solve(fac, rhs, check_finite=False)
        zt = as_ @ xt
        x_new = alpha * xt + (1 - alpha) * xs
        z_rel = alpha * zt + (1 - alpha) * zs
        z_new = np.clip(z_rel + ys / rv, los, his)
        y_new = ys + rv * (z_rel - z_new)
        dy = y_new - ys
        xs, zs, ys = x_new, z_new, y_new
        if it % check_every:
            continue

        x = d * xs
        y = e * ys / cost_scale
        z = zs / e
        cand = [finish(x, y, it)]
        xp, yp = _polish(p, q, a, lo, hi, x, z, y)
        cand.append(finish(xp, yp, it))
        sol = min(cand, key=lambda s: s.kkt_residual)
        if best is None or sol.kkt_residual < best.kkt_residual:
            best = sol
        if sol.status == OPTIMAL:
            return sol

        # primal infeasibility certificate
        dy_u = e * dy
        ny = _inf_norm(dy_u)
        if ny > 0 and k:
            support = np.where(dy_u > 0, np.where(np.isfinite(hi), hi, np.inf) * dy_u,
                               np.where(dy_u < 0, np.where(np.isfinite(lo), lo, -np.inf) * dy_u, 0.0))
            if (_inf_norm(a.T @ dy_u) <= 1e-9 * ny * max(1.0, _inf_norm(a))
                    and np.all(np.isfinite(support)) and support.sum() < -1e-6 * ny):
                return finish(best.g, np.concatenate([best.dual_eq, best.dual_in]), it, INFEASIBLE)

        # residual balancing
        ax = as_ @ xs
        r_prim = _inf_norm(ax - zs) / max(1e-12, _inf_norm(ax, zs))
        r_dual = _inf_norm(ps @ xs + qs + as_.T @ ys) / max(1e-12, _inf_norm(ps @ xs, as_.T @ ys, qs))
        if r_dual > 0:
            new_rho = float(np.clip(rho * np.sqrt(r_prim / r_dual), 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < 0.2 * rho:
                ys_keep = ys
                rho = new_rho
                rv = rho_vec(rho)
                fac = factor(rv)
                ys = ys_keep
    best = best or finish(d * xs, e * ys / cost_scale, max_iters)
    best.iterations = max_iters
    best.status = MAX_ITER if best.kkt_residual > tol else OPTIMAL
    return best
