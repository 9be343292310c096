"""Block-Hankel trajectory libraries.

Rank tests use the global cutoff in :mod:`dfkmpc.numerics`, so persistency
of excitation is judged to a relative singular-value tolerance rather than
exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics


def _as_sequence(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    if w.ndim != 2:
        raise ValueError(f"expected a (T, d) sequence, got shape {w.shape}")
    return w


@dataclass(frozen=True)
class BlockHankel:
    matrix: np.ndarray
    block_size: int
    depth: int

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def block_row(self, i: int) -> np.ndarray:
        return self.matrix[i * self.block_size:(i + 1) * self.block_size]


@dataclass(frozen=True)
class HankelPartition:
    past: np.ndarray
    future: np.ndarray
    t_ini: int
    n_future: int


def hankel_matrix(w, depth: int) -> np.ndarray:
    w = _as_sequence(w)
    T, d = w.shape
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if T < depth:
        raise ValueError(f"insufficient data: sequence length {T} < depth {depth}")
    width = T - depth + 1
    return np.concatenate([w[i:i + width].T for i in range(depth)], axis=0)


def build_hankel(w, depth: int) -> BlockHankel:
    w = _as_sequence(w)
    return BlockHankel(hankel_matrix(w, depth), w.shape[1], depth)


def is_persistently_exciting(w, order: int) -> bool:
    h = hankel_matrix(w, order)
    if h.shape[1] < h.shape[0]:
        return False
    return numerics.rank(h) == h.shape[0]


def partition(h: BlockHankel, t_ini: int, n_future: int) -> HankelPartition:
    if t_ini < 0 or n_future < 0 or t_ini + n_future != h.depth:
        raise ValueError(f"t_ini + n_future = {t_ini + n_future} does not match depth {h.depth}")
    cut = t_ini * h.block_size
    return HankelPartition(h.matrix[:cut], h.matrix[cut:], t_ini, n_future)


def check_lifted_excitation(u_d, x_d, lift, depth: int) -> bool:
    """Full-row-rank test of ``[H_L(u_d); Phi(x(0)) ... Phi(x(T - L))]``."""
    u_d = _as_sequence(u_d)
    x_d = _as_sequence(x_d)
    if len(u_d) != len(x_d):
        raise ValueError("u_d and x_d must be aligned")
    hu = hankel_matrix(u_d, depth)
    width = hu.shape[1]
    lifted = np.column_stack([np.atleast_1d(lift(x)) for x in x_d[:width]])
    stacked = np.vstack([hu, lifted])
    if stacked.shape[1] < stacked.shape[0]:
        return False
    return numerics.rank(stacked) == stacked.shape[0]


def membership_residual(h_u: BlockHankel, h_y: BlockHankel, traj) -> float:
    """Relative least-squares residual of ``traj`` against ``col(H_u, H_y)``.

    ``traj`` is ``col(u, y)`` with all input samples first. A value at
    round-off level certifies that ``traj`` lies in the span of the library.
    """
    traj = np.asarray(traj, dtype=np.float64).ravel()
    stacked = np.vstack([h_u.matrix, h_y.matrix])
    if traj.size != stacked.shape[0]:
        raise ValueError(f"trajectory length {traj.size} != {stacked.shape[0]}")
    g = numerics.least_squares(stacked, traj)
    return float(np.linalg.norm(stacked @ g - traj) / max(np.linalg.norm(traj), 1.0))


def skew_average(h, block_size: int) -> np.ndarray:
    """Sequence obtained by averaging each block anti-diagonal of ``h``."""
    h = np.asarray(h, dtype=np.float64)
    rows, width = h.shape
    if rows % block_size:
        raise ValueError(f"{rows} rows not divisible by block size {block_size}")
    depth = rows // block_size
    total = np.zeros((depth + width - 1, block_size))
    count = np.zeros(depth + width - 1)
    for i in range(depth):
        total[i:i + width] += h[i * block_size:(i + 1) * block_size].T
        count[i:i + width] += 1
    return total / count[:, None]


def hankel_project(h, block_size: int) -> np.ndarray:
    """Frobenius-nearest block-Hankel matrix (skew-diagonal averaging)."""
    h = np.asarray(h, dtype=np.float64)
    depth = h.shape[0] // block_size
    return hankel_matrix(skew_average(h, block_size), depth)
