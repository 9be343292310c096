"""Nonlinear car-following platoon: one CAV followed by OVM-driven HDVs.

Vehicle 0 is the exogenous head vehicle, vehicle 1 the CAV and vehicles
2..n human drivers. The state is ``(s_1, v_1, ..., s_n, v_n)`` and the input
is ``(u_1, v_0)``: CAV acceleration and head-vehicle velocity.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DT = 0.05
N_VEHICLES = 5
CAV_ACCEL_LIMITS = (-5.0, 2.0)


class SimulationDivergence(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class OvmParams:
    alpha: float = 0.6
    beta: float = 0.9
    s_st: float = 5.0
    s_go: float = 35.0
    v_max: float = 30.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta >= 0 and 0 < self.s_st < self.s_go and self.v_max > 0):
            raise ValueError(f"invalid OVM parameters: {self}")

    def equilibrium_spacing(self, v: float) -> float:
        """Spacing whose desired velocity is ``v`` (inverse of the cosine branch)."""
        if not 0 < v < self.v_max:
            raise ValueError(f"velocity {v} has no unique equilibrium spacing")
        return self.s_st + (self.s_go - self.s_st) / np.pi * np.arccos(1 - 2 * v / self.v_max)


def desired_velocity(s, p: OvmParams):
    s = np.asarray(s, dtype=np.float64)
    ramp = p.v_max / 2 * (1 - np.cos(np.pi * (s - p.s_st) / (p.s_go - p.s_st)))
    out = np.where(s <= p.s_st, 0.0, np.where(s >= p.s_go, p.v_max, ramp))
    return out if out.ndim else float(out)


def hdv_acceleration(s, v, v_prec, p: OvmParams):
    return p.alpha * (desired_velocity(s, p) - v) + p.beta * (np.asarray(v_prec) - v)


def equilibrium_state(spacing: float, n_vehicles: int = N_VEHICLES, p: OvmParams = OvmParams()) -> np.ndarray:
    x = np.empty(2 * n_vehicles)
    x[0::2] = spacing
    x[1::2] = desired_velocity(spacing, p)
    return x


def step(x, u, dt: float = DT, p: OvmParams = OvmParams(), accel_limits=CAV_ACCEL_LIMITS) -> np.ndarray:
    """One forward-Euler step of the platoon.

    ``accel_limits`` saturates the commanded CAV acceleration; pass ``None``
    to apply it unsaturated (used for offline excitation).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    s, v = x[0::2], x[1::2]
    u1, v0 = float(u[0]), float(u[1])
    if accel_limits is not None:
        u1 = min(max(u1, accel_limits[0]), accel_limits[1])
    v_prec = np.concatenate(([v0], v[:-1]))
    acc = np.empty_like(v)
    acc[0] = u1
    acc[1:] = hdv_acceleration(s[1:], v[1:], v_prec[1:], p)
    out = np.empty_like(x)
    out[0::2] = s + dt * (v_prec - v)
    out[1::2] = np.maximum(v + dt * acc, 0.0)
    if not np.all(np.isfinite(out)):
        raise SimulationDivergence(0)
    return out


@dataclass
class Trajectory:
    """Input/output record; ``outputs[k]`` is the state before ``inputs[k]`` is applied."""

    dt: float
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=np.float64))
        if len(self.inputs) != len(self.outputs):
            raise ValueError("inputs and outputs must have equal length")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return len(self.inputs)

    @property
    def n_vehicles(self) -> int:
        return self.outputs.shape[1] // 2

    def header(self) -> list[str]:
        cols = ["k", "u1", "v0"]
        for i in range(1, self.n_vehicles + 1):
            cols += [f"s{i}", f"v{i}"]
        return cols

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.header())
            for k, (u, y) in enumerate(zip(self.inputs, self.outputs)):
                writer.writerow([k] + [repr(float(a)) for a in u] + [repr(float(a)) for a in y])

    @classmethod
    def from_csv(cls, path, dt: float = DT) -> "Trajectory":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        return cls(dt, data[:, 1:3], data[:, 3:])


def simulate(x0, u_seq, dt: float = DT, p: OvmParams = OvmParams(), accel_limits=CAV_ACCEL_LIMITS) -> Trajectory:
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=np.float64))
    if len(u_seq) == 0:
        raise ValueError("empty input sequence")
    x = np.asarray(x0, dtype=np.float64).copy()
    outputs = np.empty((len(u_seq), x.size))
    for k, u in enumerate(u_seq):
        outputs[k] = x
        try:
            x = step(x, u, dt, p, accel_limits)
        except SimulationDivergence:
            raise SimulationDivergence(k) from None
    return Trajectory(dt, u_seq.copy(), outputs)


def generate_offline_data(seed, length: int = 1200, dt: float = DT, p: OvmParams = OvmParams(),
                          n_vehicles: int = N_VEHICLES) -> Trajectory:
    """Random-excitation data set.

    Initial spacings ~ U[15, 25], velocities ~ U[10, 20]; each step draws
    ``u1 ~ U[-5, 5]`` and ``v0 ~ U[10, 20]``. The CAV acceleration is not
    saturated here so that the recorded input is the applied one.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    x0 = np.empty(2 * n_vehicles)
    x0[0::2] = rng.uniform(15.0, 25.0, n_vehicles)
    x0[1::2] = rng.uniform(10.0, 20.0, n_vehicles)
    u = np.column_stack([rng.uniform(-5.0, 5.0, length), rng.uniform(10.0, 20.0, length)])
    return simulate(x0, u, dt, p, accel_limits=None)


@dataclass
class Plant:
    """Stateful wrapper used by the closed loop."""

    x: np.ndarray
    params: OvmParams = field(default_factory=OvmParams)
    dt: float = DT
    accel_limits: tuple | None = CAV_ACCEL_LIMITS
    k: int = 0

    def advance(self, u1: float, v0: float) -> np.ndarray:
        try:
            self.x = step(self.x, (u1, v0), self.dt, self.params, self.accel_limits)
        except SimulationDivergence:
            raise SimulationDivergence(self.k) from None
        self.k += 1
        return self.x

    def applied_accel(self, u1: float) -> float:
        if self.accel_limits is None:
            return float(u1)
        return float(min(max(u1, self.accel_limits[0]), self.accel_limits[1]))
