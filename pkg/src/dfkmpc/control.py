"""Receding-horizon controllers for the CAV.

Both predictors share one cost, ``sum ||y - y_r||_Q^2 + ||u1||_R^2``, and
the same box constraints on CAV acceleration and CAV spacing. The
head-vehicle velocity is not actuated: over the horizon it is held at its
last measured value.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .edmd import EdmdModel, edmd_response
from .koopman_id import KoopmanRepresentation
from .qp import INFEASIBLE, MpcProblem, QpSolution, solve_qp
from .traffic_sim import OvmParams, Plant, Trajectory, hdv_acceleration

U1, V0 = 0, 1  # input channels


class ControllerAbort(RuntimeError):
    def __init__(self, step: int, solution: QpSolution | None, diagnostics: list):
        status = solution.status if solution is not None else "error"
        super().__init__(f"controller failed at step {step} (status {status})")
        self.step = step
        self.solution = solution
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class MpcConfig:
    n_future: int = 50
    q_v: float = 1.0
    w_s: float = 0.5
    r_weight: float = 0.1
    a_min: float = -5.0
    a_max: float = 2.0
    s_min: float = 5.0
    s_max: float = 40.0
    s_ref: float = 20.0
    v_ref: float = 15.0
    reference_mode: str = "fixed"  # or "head_mean"
    tol: float = 1e-6

    def __post_init__(self):
        if not (self.a_min < self.a_max and self.s_min < self.s_max):
            raise ValueError("empty constraint box")
        if min(self.q_v, self.w_s, self.r_weight) < 0:
            raise ValueError("weights must be non-negative")
        if self.reference_mode not in ("fixed", "head_mean"):
            raise ValueError(f"unknown reference mode {self.reference_mode!r}")

    def stage_weights(self, n_vehicles: int) -> np.ndarray:
        return np.tile([self.w_s, self.q_v], n_vehicles)

    def reference(self, u_ini=None) -> tuple[float, float]:
        """``(s_r, v_r)``; in ``head_mean`` mode ``v_r`` is the mean past head velocity."""
        if self.reference_mode == "head_mean" and u_ini is not None:
            return self.s_ref, float(np.mean(np.asarray(u_ini)[:, V0]))
        return self.s_ref, self.v_ref


def stacked_reference(s_r: float, v_r: float, n_vehicles: int, n_steps: int) -> np.ndarray:
    return np.tile([s_r, v_r], n_vehicles * n_steps)


def project_initial(rep: KoopmanRepresentation, w_ini) -> np.ndarray:
    """Orthogonal projection of ``col(u_ini, y_ini)`` onto ``range(col(U_P, Y_P*))``."""
    w_ini = np.asarray(w_ini, dtype=np.float64).ravel()
    expected = (rep.input_size + rep.output_size) * rep.t_ini
    if w_ini.size != expected:
        raise ValueError(f"initial window has {w_ini.size} entries, expected {expected}")
    basis = rep.init_basis
    return basis @ (basis.T @ w_ini)


def project_known(a_eq, rhs, basis=None) -> np.ndarray:
    """Project the known right-hand side onto ``range(a_eq)``.

    With the held ``v0`` rows linearly independent of ``col(U_P, Y_P*)`` this
    leaves an already projected initial window and the forecast untouched;
    otherwise it is the smallest change that keeps the equalities consistent.
    """
    basis = numerics.range_basis(a_eq) if basis is None else basis
    return basis @ (basis.T @ rhs)


def _rows(rep: KoopmanRepresentation):
    m, p, n = rep.input_size, rep.output_size, rep.n_future
    return np.arange(U1, m * n, m), np.arange(V0, m * n, m), np.arange(0, p * n, p)


def assemble_qp(rep: KoopmanRepresentation, cfg: MpcConfig, w_ini, reference=None,
                v0_forecast: float | None = None) -> MpcProblem:
    """Data-driven MPC problem in the combination vector ``g``.

    Equalities: ``col(U_P, Y_P*) g = Pi_ini(w_ini)`` followed by the held
    head-velocity forecast on the ``v0`` rows of ``U_F``; the stacked
    right-hand side is kept in the range of the equality matrix. The quadratic form is
    ``Y_F*' Q Y_F* + U_F1' R U_F1`` with no regulariser on ``g``.
    """
    if cfg.n_future != rep.n_future or rep.input_size != 2 or rep.output_size % 2:
        raise ValueError("representation and MPC config are dimensionally inconsistent")
    w_ini = np.asarray(w_ini, dtype=np.float64).ravel()
    n_vehicles = rep.output_size // 2
    u1_rows, v0_rows, s1_rows = _rows(rep)
    if v0_forecast is None:
        v0_forecast = w_ini[rep.input_size * rep.t_ini - 1]
    s_r, v_r = reference if reference is not None else (cfg.s_ref, cfg.v_ref)
    q_diag = np.tile(cfg.stage_weights(n_vehicles), rep.n_future)
    y_r = stacked_reference(s_r, v_r, n_vehicles, rep.n_future)
    yf, uf1 = rep.y_future, rep.u_future[u1_rows]
    hessian = yf.T @ (q_diag[:, None] * yf) + cfg.r_weight * (uf1.T @ uf1)
    linear = -2.0 * yf.T @ (q_diag * y_r)
    n = rep.n_future
    a_eq = np.vstack([rep.u_past, rep.y_past, rep.u_future[v0_rows]])
    return MpcProblem(
        hessian=hessian, linear=linear, constant=float(y_r @ (q_diag * y_r)),
        a_eq=a_eq,
        b_eq=project_known(a_eq, np.concatenate([project_initial(rep, w_ini), np.full(n, float(v0_forecast))])),
        a_in=np.vstack([uf1, yf[s1_rows]]),
        lower=np.concatenate([np.full(n, cfg.a_min), np.full(n, cfg.s_min)]),
        upper=np.concatenate([np.full(n, cfg.a_max), np.full(n, cfg.s_max)]),
        info=dict(n_g=rep.width, n_init_rows=rep.u_past.shape[0] + rep.y_past.shape[0],
                  n_forecast_rows=n),
    )


def _box_qp(offset, basis, weights, target, rows, lower, upper) -> tuple[MpcProblem, np.ndarray]:
    """Cost ``||offset + basis theta - target||_W^2`` with bounds on selected rows."""
    resid = offset - target
    wb = weights[:, None] * basis
    problem = MpcProblem(
        hessian=basis.T @ wb, linear=2.0 * (resid @ wb), constant=float(resid @ (weights * resid)),
        a_in=basis[rows], lower=lower - offset[rows], upper=upper - offset[rows],
    )
    return problem, resid


class DfkController:
    """DF-KMPC with the equality constraints eliminated once, offline.

    Writing ``v = col(U_F1 g, Y_F* g)``, the feasible set for a given right-hand
    side is ``v_p + range(F N)`` with ``N`` a null-space basis of the equality
    matrix. Only ``v_p`` changes online, so each step is a small QP in the
    coordinates of that range. This is an exact reformulation of the problem
    built by :func:`assemble_qp`.
    """

    name = "dfk"

    def __init__(self, rep: KoopmanRepresentation, cfg: MpcConfig):
        if cfg.n_future != rep.n_future:
            raise ValueError("horizon mismatch between representation and config")
        self.rep, self.cfg = rep, cfg
        self.n_vehicles = rep.output_size // 2
        u1_rows, v0_rows, _ = _rows(rep)
        eq = np.vstack([rep.u_past, rep.y_past, rep.u_future[v0_rows]])
        self.f = np.vstack([rep.u_future[u1_rows], rep.y_future])
        u, s, vt = numerics.svd(eq, full_matrices=True)
        r = numerics.numerical_rank(s)
        self.eq = eq
        self.eq_range = u[:, :r]
        self.eq_pinv = (vt[:r].T / s[:r]) @ u[:, :r].T
        null = vt[r:].T
        fn = self.f @ null
        fu, fs, fvt = numerics.svd(fn)
        d = numerics.numerical_rank(fs)
        self.basis = fu[:, :d]
        # g-direction producing basis column j: null @ pinv(fn) @ basis
        self.g_dirs = null @ ((fvt[:d].T / fs[:d]) @ (fu[:, :d].T @ self.basis))
        n = rep.n_future
        self.u1_idx = np.arange(n)
        self.s1_idx = n + np.arange(0, rep.output_size * n, rep.output_size)
        self.weights = np.concatenate([np.full(n, cfg.r_weight),
                                       np.tile(cfg.stage_weights(self.n_vehicles), n)])

    def solve(self, u_ini, y_ini, reference, v0_forecast: float) -> QpSolution:
        rep, cfg, n = self.rep, self.cfg, self.rep.n_future
        w = np.concatenate([np.ravel(u_ini), np.ravel(y_ini)])
        rhs = project_known(self.eq, np.concatenate([project_initial(rep, w), np.full(n, float(v0_forecast))]),
                            self.eq_range)
        g_p = self.eq_pinv @ rhs
        mismatch = float(np.max(np.abs(self.eq @ g_p - rhs)))
        if mismatch > cfg.tol * max(1.0, float(np.max(np.abs(rhs)))):
            return QpSolution(g_p, np.nan, mismatch, INFEASIBLE)
        v_p = self.f @ g_p
        target = np.concatenate([np.zeros(n), stacked_reference(*reference, self.n_vehicles, n)])
        rows = np.concatenate([self.u1_idx, self.s1_idx])
        lower = np.concatenate([np.full(n, cfg.a_min), np.full(n, cfg.s_min)])
        upper = np.concatenate([np.full(n, cfg.a_max), np.full(n, cfg.s_max)])
        problem, _ = _box_qp(v_p, self.basis, self.weights, target, rows, lower, upper)
        sol = solve_qp(problem, tol=cfg.tol)
        g = g_p + self.g_dirs @ sol.g
        sol.g = g
        sol.u_star = (rep.u_future @ g).reshape(n, rep.input_size)
        sol.y_star = (rep.y_future @ g).reshape(n, rep.output_size)
        return sol

    def act(self, u_ini, y_ini, x_now, reference, v0_forecast):
        sol = self.solve(u_ini, y_ini, reference, v0_forecast)
        return (float(sol.u_star[0, U1]) if sol.ok else np.nan), sol


class EdmdController:
    """Condensed MPC on the lifted linear model; decision variable is ``u1`` over the horizon."""

    name = "edmdk"

    def __init__(self, model: EdmdModel, cfg: MpcConfig):
        self.model, self.cfg = model, cfg
        self.p = model.c.shape[0]
        self.n_vehicles = self.p // 2
        n = cfg.n_future
        self.weights = np.concatenate([np.full(n, cfg.r_weight),
                                       np.tile(cfg.stage_weights(self.n_vehicles), n)])
        self.u1_idx = np.arange(n)
        self.s1_idx = n + np.arange(0, self.p * n, self.p)

    def solve(self, x_now, reference, v0_forecast: float) -> QpSolution:
        cfg, n, m = self.cfg, self.cfg.n_future, self.model.b.shape[1]
        free, gain = edmd_response(self.model, self.model.lift(x_now), n)
        g_u1 = gain[:, U1::m]
        y_off = free + gain[:, V0::m] @ np.full(n, float(v0_forecast))
        basis = np.vstack([np.eye(n), g_u1])
        offset = np.concatenate([np.zeros(n), y_off])
        target = np.concatenate([np.zeros(n), stacked_reference(*reference, self.n_vehicles, n)])
        rows = np.concatenate([self.u1_idx, self.s1_idx])
        lower = np.concatenate([np.full(n, cfg.a_min), np.full(n, cfg.s_min)])
        upper = np.concatenate([np.full(n, cfg.a_max), np.full(n, cfg.s_max)])
        problem, _ = _box_qp(offset, basis, self.weights, target, rows, lower, upper)
        sol = solve_qp(problem, tol=cfg.tol)
        u1 = sol.g
        sol.u_star = np.column_stack([u1, np.full(n, float(v0_forecast))])
        sol.y_star = (y_off + g_u1 @ u1).reshape(n, self.p)
        return sol

    def act(self, u_ini, y_ini, x_now, reference, v0_forecast):
        sol = self.solve(x_now, reference, v0_forecast)
        return (float(sol.u_star[0, U1]) if sol.ok else np.nan), sol


def edmd_kmpc_step(model: EdmdModel, x_now, cfg: MpcConfig, reference=None, v0_forecast: float | None = None):
    """One EDMD-K solve; returns the optimal ``(N, 2)`` input sequence and the solution."""
    reference = reference if reference is not None else (cfg.s_ref, cfg.v_ref)
    if v0_forecast is None:
        v0_forecast = cfg.v_ref
    sol = EdmdController(model, cfg).solve(x_now, reference, v0_forecast)
    return sol.u_star, sol


class HdvPolicy:
    """The CAV drives like the other humans (OVM), for the uncontrolled baseline."""

    name = "hdv"

    def __init__(self, params: OvmParams = OvmParams()):
        self.params = params

    def act(self, u_ini, y_ini, x_now, reference, v0_forecast):
        return float(hdv_acceleration(x_now[0], x_now[1], v0_forecast, self.params)), None


@dataclass
class ClosedLoopResult:
    trajectory: Trajectory
    references: np.ndarray
    diagnostics: list = field(default_factory=list)
    predicted_s1: list = field(default_factory=list)

    @property
    def qp_failures(self) -> int:
        return sum(1 for d in self.diagnostics if d["status"] not in ("optimal", "n/a"))


def receding_horizon(plant: Plant, controller, head_velocity, k0: int, kf: int, cfg: MpcConfig,
                     u_hist, y_hist) -> ClosedLoopResult:
    """Run the controller from step ``k0`` up to (excluding) ``kf``.

    ``u_hist``/``y_hist`` hold at least ``t_ini`` past samples ending at
    ``k0 - 1``; ``head_velocity(k)`` gives the head-vehicle velocity applied
    at step ``k``. Only the first input of each solution is applied.
    """
    u_hist = [np.asarray(u, dtype=np.float64) for u in u_hist]
    y_hist = [np.asarray(y, dtype=np.float64) for y in y_hist]
    t_ini = getattr(getattr(controller, "rep", None), "t_ini", None) or len(u_hist)
    if len(u_hist) < t_ini or len(y_hist) < t_ini:
        raise ValueError(f"need {t_ini} past samples before k0")
    inputs, outputs, refs, diags, pred_s1 = [], [], [], [], []
    for k in range(k0, kf):
        u_ini = np.array(u_hist[-t_ini:])
        y_ini = np.array(y_hist[-t_ini:])
        reference = cfg.reference(u_ini)
        x_now = plant.x.copy()
        v0_forecast = float(u_ini[-1, V0])
        start = time.perf_counter()
        u1, sol = controller.act(u_ini, y_ini, x_now, reference, v0_forecast)
        solve_ms = (time.perf_counter() - start) * 1e3
        if sol is not None and not sol.ok:
            diags.append(dict(k=k, status=sol.status, objective=sol.objective,
                              kkt_residual=sol.kkt_residual, solve_ms=solve_ms, u1_applied=np.nan))
            raise ControllerAbort(k, sol, diags)
        u1 = plant.applied_accel(u1)
        v0 = float(head_velocity(k))
        diags.append(dict(k=k, status=sol.status if sol else "n/a",
                          objective=sol.objective if sol else np.nan,
                          kkt_residual=sol.kkt_residual if sol else np.nan,
                          solve_ms=solve_ms, u1_applied=u1))
        if sol is not None:
            pred_s1.append(sol.y_star[:, 0].copy())
        inputs.append((u1, v0))
        outputs.append(x_now)
        refs.append(reference)
        plant.advance(u1, v0)
        u_hist.append(np.array([u1, v0]))
        y_hist.append(x_now)
    return ClosedLoopResult(Trajectory(plant.dt, np.array(inputs), np.array(outputs)),
                            np.array(refs), diags, pred_s1)


def realized_cost(traj: Trajectory, cfg: MpcConfig, references=None) -> float:
    """Closed-loop ``sum_k ||y(k) - y_r(k)||_Q^2 + r u1(k)^2``."""
    n = traj.n_vehicles
    if references is None:
        references = np.tile([cfg.s_ref, cfg.v_ref], (len(traj), 1))
    references = np.asarray(references, dtype=np.float64)
    err = traj.outputs - np.tile(references, (1, n))
    weights = cfg.stage_weights(n)
    return float(np.sum(weights * err ** 2) + cfg.r_weight * np.sum(traj.inputs[:, U1] ** 2))
