"""Scenario harness: data collection, model building and the two experiments.

Experiment A perturbs the head vehicle with a half sine and measures how
much of the wave reaches the last vehicle. Experiment B tracks synthetic
head-vehicle velocity profiles and compares realized control cost.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .control import (ClosedLoopResult, ControllerAbort, DfkController, EdmdController, HdvPolicy,
                      MpcConfig, realized_cost, receding_horizon)
from .edmd import EdmdModel, edmd_fit, sample_centers
from .koopman_id import KoopmanRepresentation, iterate
from .traffic_sim import Plant, Trajectory, equilibrium_state, generate_offline_data

log = logging.getLogger(__name__)

CONTROLLERS = ("hdv", "dfk", "edmdk")

# independent random streams derived from the run seed
STREAM_EDMD, STREAM_HISTORY, STREAM_PROFILES = 1, 2, 3


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def sine_disturbance_profile(k: int, start: int = 200, half_period: int = 200,
                             base: float = 15.0, amplitude: float = 5.0) -> float:
    """``base + amplitude * sin(pi (k - start) / half_period)`` on ``[start, start + half_period]``."""
    if start <= k <= start + half_period:
        return base + amplitude * np.sin(np.pi * (k - start) / half_period)
    return base


def synthetic_tracking_profiles(seed: int, dt: float = 0.05, count: int = 4,
                                min_duration: float = 40.0, max_duration: float = 60.0,
                                max_slope: float = 1.5) -> list[np.ndarray]:
    """Smooth head-vehicle velocity profiles in [10, 20] m/s.

    Each profile is a sum of 2-4 sinusoids plus one or two tanh-smoothed
    speed changes, squeezed into [11, 19] m/s and then flattened until the
    largest finite-difference slope is at most ``max_slope``.
    """
    rng = _rng(seed, STREAM_PROFILES)
    profiles = []
    for _ in range(count):
        steps = int(round(rng.uniform(min_duration, max_duration) / dt))
        t = np.arange(steps) * dt
        v = np.full(steps, rng.uniform(13.0, 17.0))
        for _ in range(rng.integers(2, 5)):
            v += rng.uniform(0.5, 2.0) * np.sin(2 * np.pi * t / rng.uniform(8.0, 30.0) + rng.uniform(0, 2 * np.pi))
        for _ in range(rng.integers(1, 3)):
            t0, width = rng.uniform(0.25 * t[-1], 0.75 * t[-1]), rng.uniform(3.0, 6.0)
            v += rng.uniform(-3.0, 3.0) * 0.5 * (1 + np.tanh((t - t0) / width))
        lo, hi = v.min(), v.max()
        if hi - lo > 8.0:
            v = 15.0 + (v - (lo + hi) / 2) * (8.0 / (hi - lo))
        else:
            v = v - max(0.0, hi - 19.0) + max(0.0, 11.0 - lo)
        slope = np.max(np.abs(np.diff(v))) / dt
        if slope > max_slope:
            mid = (v.min() + v.max()) / 2
            v = mid + (v - mid) * (max_slope / slope)
        profiles.append(v)
    return profiles


def wave_damping_metric(traj: Trajectory, window: tuple[int, int], vehicle: int | None = None,
                        head_amplitude: float | None = None) -> float:
    """Half peak-to-peak velocity of one vehicle over ``window`` (step indices).

    ``vehicle`` 0 is the head vehicle, ``None`` the last one. The result is
    normalised by the head vehicle's half peak-to-peak over the whole run
    unless ``head_amplitude`` is given.
    """
    start, end = window
    if not 0 <= start < end <= len(traj):
        raise ValueError(f"window {window} outside trajectory of length {len(traj)}")
    n = traj.n_vehicles
    idx = n if vehicle is None else vehicle
    speed = traj.inputs[:, 1] if idx == 0 else traj.outputs[:, 2 * idx - 1]
    seg = speed[start:end]
    amp = (seg.max() - seg.min()) / 2
    if head_amplitude is None:
        head = traj.inputs[:, 1]
        head_amplitude = (head.max() - head.min()) / 2
    return float(amp / head_amplitude) if head_amplitude > 0 else 0.0


def wrapped_positions(traj: Trajectory, ring_length: float) -> np.ndarray:
    """Positions of head + platoon, consistent with the Euler spacing update, wrapped to the ring."""
    head = np.concatenate([[0.0], np.cumsum(traj.inputs[:-1, 1] * traj.dt)])
    head += np.sum(traj.outputs[0, 0::2])
    pos = head[:, None] - np.cumsum(traj.outputs[:, 0::2], axis=1)
    return np.mod(np.column_stack([head, pos]), ring_length)


# -- model building -----------------------------------------------------------

def collect(cfg: Config) -> Trajectory:
    return generate_offline_data(cfg.seed, cfg["id.data_length"], cfg["dt"], cfg.ovm, cfg["n_vehicles"])


def build_representation(cfg: Config, data: Trajectory | None = None) -> KoopmanRepresentation:
    data = data if data is not None else collect(cfg)
    rep = iterate(data.inputs, data.outputs, cfg.identification, seed=cfg.seed)
    log.info("representation: %d iterations, converged=%s, rel change %.3e",
             rep.iterations, rep.converged, rep.final_rel_change)
    return rep


def build_edmd(cfg: Config) -> EdmdModel:
    rng = _rng(cfg.seed, STREAM_EDMD)
    centers = sample_centers(rng, cfg["edmd.n_centers"], cfg["n_vehicles"])
    seeds = rng.integers(0, 2**63 - 1, cfg["edmd.n_trajectories"])
    trajs = [generate_offline_data(int(s), cfg["edmd.length"], cfg["dt"], cfg.ovm, cfg["n_vehicles"])
             for s in seeds]
    return edmd_fit(trajs, centers)


# -- scenario runs --------------------------------------------------------------

@dataclass
class RunReport:
    scenario: str
    controller: str
    seed: int
    realized_cost: float | None
    wave_ratio: float | None
    qp_failures: int
    iterations_alg1: int | None
    converged: bool | None
    failed_step: int | None = None
    mean_tracking_error: float | None = None
    max_predicted_s1: float | None = None
    min_predicted_s1: float | None = None
    q_v: float | None = None
    w_s: float | None = None
    trajectory_path: str = "trajectory.csv"
    diagnostics_path: str = "diagnostics.csv"
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _make_controller(name: str, cfg: Config, mpc: MpcConfig, rep, edmd):
    if name == "hdv":
        return HdvPolicy(cfg.ovm)
    if name == "dfk":
        return DfkController(rep, mpc)
    if name == "edmdk":
        return EdmdController(edmd, mpc)
    raise ValueError(f"unknown controller {name!r}")


def _history(cfg: Config, x_eq: np.ndarray, v0: float, t_ini: int):
    """Equilibrium driving for ``t_ini`` steps with a small seeded CAV dither."""
    rng = _rng(cfg.seed, STREAM_HISTORY)
    dither = cfg["scenario.history_dither"]
    plant = Plant(x_eq.copy(), cfg.ovm, cfg["dt"])
    u_hist, y_hist = [], []
    for _ in range(t_ini):
        u1 = float(rng.uniform(-dither, dither))
        y_hist.append(plant.x.copy())
        u_hist.append(np.array([u1, v0]))
        plant.advance(u1, v0)
    return plant, u_hist, y_hist


def _write_diagnostics(path: Path, diags: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "status", "objective", "kkt_residual", "solve_ms", "u1_applied"])
        for d in diags:
            writer.writerow([d["k"], d["status"], repr(float(d["objective"])), repr(float(d["kkt_residual"])),
                             f"{d['solve_ms']:.3f}", repr(float(d["u1_applied"]))])


def run_closed_loop(cfg: Config, controller_name: str, mpc: MpcConfig, head_profile: np.ndarray,
                    x0: np.ndarray, rep=None, edmd=None):
    t_ini = cfg["id.t_ini"]
    plant, u_hist, y_hist = _history(cfg, x0, float(head_profile[0]), t_ini)
    controller = _make_controller(controller_name, cfg, mpc, rep, edmd)
    plant.accel_limits = None if controller_name == "hdv" else (mpc.a_min, mpc.a_max)
    return receding_horizon(plant, controller, lambda k: head_profile[k], 0, len(head_profile), mpc,
                            u_hist, y_hist)


def _finish_run(out: Path, result: ClosedLoopResult | None, report: RunReport, ring_length=None,
                failure=None) -> RunReport:
    out.mkdir(parents=True, exist_ok=True)
    if failure is not None:
        _write_diagnostics(out / "diagnostics.csv", failure[1])
        report.trajectory_path = ""
    if result is not None:
        result.trajectory.to_csv(out / "trajectory.csv")
        _write_diagnostics(out / "diagnostics.csv", result.diagnostics)
        if ring_length:
            pos = wrapped_positions(result.trajectory, ring_length)
            header = "k,p0," + ",".join(f"p{i}" for i in range(1, pos.shape[1]))
            np.savetxt(out / "positions.csv", np.column_stack([np.arange(len(pos)), pos]),
                       delimiter=",", header=header, comments="", fmt="%.17g")
    (out / "report.json").write_text(report.to_json())
    return report


def _provenance(rep: KoopmanRepresentation | None):
    if rep is None:
        return None, None
    return rep.iterations, rep.converged


def _run_or_abort(cfg, name, mpc, profile, x0, rep, edmd):
    try:
        return run_closed_loop(cfg, name, mpc, profile, x0, rep, edmd), None
    except ControllerAbort as exc:
        log.error("%s aborted at step %d", name, exc.step)
        traj_len = len(exc.diagnostics)
        return None, (exc.step, exc.diagnostics, traj_len)


def run_experiment_a(cfg: Config, out_dir, controllers=CONTROLLERS, rep=None, edmd=None) -> list[RunReport]:
    out_dir = Path(out_dir)
    dt = cfg["dt"]
    mpc = cfg.mpc("a")
    if "dfk" in controllers and rep is None:
        rep = build_representation(cfg)
    if "edmdk" in controllers and edmd is None:
        edmd = build_edmd(cfg)
    steps = int(round(cfg["scenario.a.duration"] / dt))
    start = int(round(cfg["scenario.a.disturbance_start"] / dt))
    half = int(round((cfg["scenario.a.disturbance_end"] - cfg["scenario.a.disturbance_start"]) / dt))
    profile = np.array([sine_disturbance_profile(k, start, half, base=mpc.v_ref) for k in range(steps)])
    window = (int(round(cfg["scenario.a.wave_window_start"] / dt)),
              min(steps, int(round(cfg["scenario.a.wave_window_end"] / dt))))
    x0 = equilibrium_state(cfg.ovm.equilibrium_spacing(mpc.v_ref), cfg["n_vehicles"], cfg.ovm)
    iters, conv = _provenance(rep)
    reports = []
    for name in controllers:
        result, failure = _run_or_abort(cfg, name, mpc, profile, x0, rep, edmd)
        report = RunReport("exp_a", name, cfg.seed, None, None, 0,
                           iters if name == "dfk" else None, conv if name == "dfk" else None,
                           q_v=mpc.q_v, w_s=mpc.w_s)
        if failure is not None:
            report.failed_step, report.qp_failures = failure[0], 1
        else:
            report.realized_cost = realized_cost(result.trajectory, mpc, result.references)
            report.wave_ratio = wave_damping_metric(result.trajectory, window)
            report.qp_failures = result.qp_failures
            _predicted_range(report, result)
        reports.append(_finish_run(out_dir / "runs" / f"exp_a_{name}", result, report,
                                   cfg["scenario.a.ring_length"], failure))
    return reports


def _predicted_range(report: RunReport, result: ClosedLoopResult) -> None:
    if result.predicted_s1:
        pred = np.concatenate(result.predicted_s1)
        report.min_predicted_s1, report.max_predicted_s1 = float(pred.min()), float(pred.max())


def run_experiment_b(cfg: Config, out_dir, controllers=("dfk", "edmdk"), rep=None, edmd=None) -> list[RunReport]:
    out_dir = Path(out_dir)
    mpc = cfg.mpc("b")
    if "dfk" in controllers and rep is None:
        rep = build_representation(cfg)
    if "edmdk" in controllers and edmd is None:
        edmd = build_edmd(cfg)
    profiles = synthetic_tracking_profiles(cfg.seed, cfg["dt"], min_duration=cfg["scenario.b.min_duration"],
                                           max_duration=cfg["scenario.b.max_duration"])
    iters, conv = _provenance(rep)
    reports = []
    for j, profile in enumerate(profiles):
        x0 = equilibrium_state(cfg.ovm.equilibrium_spacing(float(profile[0])), cfg["n_vehicles"], cfg.ovm)
        for name in controllers:
            result, failure = _run_or_abort(cfg, name, mpc, profile, x0, rep, edmd)
            report = RunReport(f"exp_b_profile{j + 1}", name, cfg.seed, None, None, 0,
                               iters if name == "dfk" else None, conv if name == "dfk" else None,
                               q_v=mpc.q_v, w_s=mpc.w_s)
            if failure is not None:
                report.failed_step, report.qp_failures = failure[0], 1
            else:
                traj = result.trajectory
                report.realized_cost = realized_cost(traj, mpc, result.references)
                report.mean_tracking_error = float(np.mean(np.abs(traj.outputs[:, 1] - result.references[:, 1])))
                report.qp_failures = result.qp_failures
                _predicted_range(report, result)
            reports.append(_finish_run(out_dir / "runs" / f"exp_b_profile{j + 1}_{name}", result, report,
                                       failure=failure))
    _write_comparison(out_dir / "runs" / "exp_b_comparison.csv", reports)
    return reports


def _write_comparison(path: Path, reports: list[RunReport]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scenario", "controller", "realized_cost", "mean_tracking_error", "failed_step"])
        for r in reports:
            writer.writerow([r.scenario, r.controller, repr(r.realized_cost), repr(r.mean_tracking_error),
                             r.failed_step if r.failed_step is not None else ""])
