"""EDMD baseline: raw state plus thin-plate-spline observables."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics


class RankDeficientWarning(UserWarning):
    pass


def _tps(dist: np.ndarray) -> np.ndarray:
    out = np.zeros_like(dist)
    pos = dist > 0
    out[pos] = dist[pos] ** 2 * np.log(dist[pos])
    return out


def tps_lift(x, centers) -> np.ndarray:
    """``[x, phi_1(x), ..., phi_c(x)]`` with ``phi(x) = r^2 log r``, ``phi = 0`` at ``r = 0``.

    Accepts a single state or a ``(T, n)`` batch.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[0] == 0:
        raise ValueError("at least one center is required")
    x = np.asarray(x, dtype=np.float64)
    batch = np.atleast_2d(x)
    dist = np.linalg.norm(batch[:, None, :] - centers[None, :, :], axis=2)
    out = np.hstack([batch, _tps(dist)])
    return out[0] if x.ndim == 1 else out


def _lift(x, centers) -> np.ndarray:
    # an empty center set means the plain state is the whole dictionary
    if len(centers) == 0:
        return np.asarray(x, dtype=np.float64).copy()
    return tps_lift(x, centers)


def sample_centers(rng, count: int = 30, n_vehicles: int = 5) -> np.ndarray:
    """Centers with spacing coordinates in [5, 15] and velocities in [10, 20]."""
    c = np.empty((count, 2 * n_vehicles))
    c[:, 0::2] = rng.uniform(5.0, 15.0, (count, n_vehicles))
    c[:, 1::2] = rng.uniform(10.0, 20.0, (count, n_vehicles))
    return c


@dataclass
class EdmdModel:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    centers: np.ndarray
    includes_state: bool = True

    @property
    def n_z(self) -> int:
        return self.a.shape[0]

    def lift(self, x) -> np.ndarray:
        return _lift(x, self.centers)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, a=self.a, b=self.b, c=self.c, d=self.d, centers=self.centers)

    @classmethod
    def load(cls, path) -> "EdmdModel":
        with np.load(path) as data:
            return cls(*(data[k] for k in ("a", "b", "c", "d", "centers")))


def edmd_fit(trajectories, centers) -> EdmdModel:
    """Least-squares fit of ``z+ = A z + B u`` and ``y = C z + D u``.

    Snapshot pairs are formed inside each trajectory only. An empty
    ``centers`` array gives the identity lift.
    """
    centers = np.asarray(centers, dtype=np.float64)
    z, z_next, u, y = [], [], [], []
    for traj in trajectories:
        if len(traj) < 2:
            continue
        lifted = _lift(traj.outputs, centers)
        z.append(lifted[:-1])
        z_next.append(lifted[1:])
        u.append(traj.inputs[:-1])
        y.append(traj.outputs[:-1])
    if not z:
        raise ValueError("no trajectory has at least two samples")
    z, z_next, u, y = (np.vstack(a) for a in (z, z_next, u, y))
    n_z, m = z.shape[1], u.shape[1]
    if len(z) < n_z + m:
        raise ValueError(f"{len(z)} samples < n_z + m = {n_z + m}")
    reg = np.hstack([z, u])
    if numerics.rank(reg) < reg.shape[1]:
        warnings.warn("EDMD regressor is rank deficient; using the minimum-norm solution",
                      RankDeficientWarning, stacklevel=2)
    ab = numerics.least_squares(reg, z_next).T
    cd = numerics.least_squares(reg, y).T
    return EdmdModel(ab[:, :n_z], ab[:, n_z:], cd[:, :n_z], cd[:, n_z:], centers)


def edmd_predict(model: EdmdModel, x0, u_seq) -> np.ndarray:
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=np.float64))
    if len(u_seq) == 0:
        raise ValueError("empty input sequence")
    z = model.lift(x0)
    out = np.empty((len(u_seq), model.c.shape[0]))
    for k, u in enumerate(u_seq):
        out[k] = model.c @ z + model.d @ u
        z = model.a @ z + model.b @ u
    return out


def edmd_response(model: EdmdModel, z0, n_steps: int):
    """Affine map from a future input sequence to stacked outputs.

    Returns ``(free, gain)`` with ``col(y(0..n-1)) = free + gain @ col(u(0..n-1))``.
    """
    p, m = model.c.shape[0], model.b.shape[1]
    free = np.empty(p * n_steps)
    gain = np.zeros((p * n_steps, m * n_steps))
    # markov[j] = C A^j B
    markov = []
    a_pow_z = np.asarray(z0, dtype=np.float64)
    a_pow_b = model.b
    for j in range(n_steps):
        free[p * j:p * (j + 1)] = model.c @ a_pow_z
        a_pow_z = model.a @ a_pow_z
        markov.append(model.c @ a_pow_b)
        a_pow_b = model.a @ a_pow_b
    for j in range(n_steps):
        gain[p * j:p * (j + 1), m * j:m * (j + 1)] = model.d
        for i in range(j):
            gain[p * j:p * (j + 1), m * i:m * (i + 1)] = markov[j - 1 - i]
    return free, gain
