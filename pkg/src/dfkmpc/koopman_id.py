"""Dictionary-free Koopman representation by alternating projections.

The output Hankel rows are repeatedly pushed through three projections:
a rank projection with the input rows held fixed, a causal
(lower-block-triangular) multi-step predictor fit, and skew-diagonal
averaging back onto block-Hankel structure. Input rows are never modified.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import numerics
from .hankel import hankel_matrix, hankel_project, is_persistently_exciting


class RankTargetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class IdConfig:
    n_z: int = 40
    t_ini: int | None = None
    n_future: int = 50
    epsilon: float = 1e-4
    max_iters: int = 500

    def __post_init__(self):
        if self.t_ini is None:
            object.__setattr__(self, "t_ini", self.n_z)
        if self.n_z < 1 or self.t_ini < self.n_z:
            raise ValueError(f"need n_z >= 1 and t_ini >= n_z, got {self.n_z}, {self.t_ini}")
        if self.n_future < 1 or self.epsilon <= 0 or self.max_iters < 1:
            raise ValueError(f"invalid identification config {self}")

    @property
    def depth(self) -> int:
        return self.t_ini + self.n_future


def low_rank_step(u_p, u_f, h_y, rank_target: int) -> np.ndarray:
    """Nearest output rows such that ``col(U_P, Y_P, U_F, Y_F)`` has rank <= target.

    With the input rows fixed the problem separates: the component of
    ``h_y`` inside the input row space is kept, the orthogonal remainder is
    truncated to ``rank_target - rank(U)`` by SVD.
    """
    u = np.vstack([u_p, u_f])
    h_y = np.asarray(h_y, dtype=np.float64)
    rows = u.shape[0] + h_y.shape[0]
    if rank_target >= min(rows, h_y.shape[1]):
        warnings.warn(f"rank target {rank_target} is not below min{(rows, h_y.shape[1])}; "
                      "returning the output rows unchanged", RankTargetWarning, stacklevel=2)
        return h_y.copy()
    basis = numerics.row_space_basis(u)
    inside = (h_y @ basis.T) @ basis
    keep = rank_target - basis.shape[0]
    if keep <= 0:
        return inside
    left, s, vt = numerics.svd(h_y - inside)
    return inside + (left[:, :keep] * s[:keep]) @ vt[:keep]


def _extend_basis(q: np.ndarray, rows: np.ndarray, scale: float) -> np.ndarray:
    rem = rows - (rows @ q.T) @ q
    rem -= (rem @ q.T) @ q
    _, s, vt = numerics.svd(rem)
    k = int(np.count_nonzero(s > numerics.RCOND * max(scale, np.linalg.norm(rows, 2))))
    return np.vstack([q, vt[:k]]) if k else q


def causal_step(u_p, y_p1, u_f, y_f1, n_future: int, return_predictor: bool = True):
    """Least-squares causal predictor fit.

    Block row ``i`` of ``y_f1`` is regressed on ``col(U_P, Y_P1, U_F[:i+1])``
    (minimum-norm). Returns the fitted future block and the predictor
    ``K = [K_p K_f]`` with ``K_f`` lower block triangular, or ``None`` for K
    when ``return_predictor`` is false.
    """
    u_p, y_p1, u_f, y_f1 = (np.asarray(a, dtype=np.float64) for a in (u_p, y_p1, u_f, y_f1))
    m = u_f.shape[0] // n_future
    p = y_f1.shape[0] // n_future
    if m * n_future != u_f.shape[0] or p * n_future != y_f1.shape[0]:
        raise ValueError("future blocks are not divisible by the horizon")
    base = np.vstack([u_p, y_p1])
    _, s, vt = numerics.svd(base)
    q = vt[:numerics.numerical_rank(s)]
    scale = float(s[0]) if s.size else 0.0
    n_past = base.shape[0]
    fitted = np.empty_like(y_f1)
    k_mat = np.zeros((y_f1.shape[0], n_past + u_f.shape[0])) if return_predictor else None
    for i in range(n_future):
        q = _extend_basis(q, u_f[m * i:m * (i + 1)], scale)
        blk = y_f1[p * i:p * (i + 1)]
        proj = blk @ q.T
        fitted[p * i:p * (i + 1)] = proj @ q
        if return_predictor:
            n_reg = n_past + m * (i + 1)
            reg = np.vstack([base, u_f[:m * (i + 1)]])
            k_mat[p * i:p * (i + 1), :n_reg] = proj @ numerics.pseudoinverse(reg @ q.T)
    return fitted, k_mat


@dataclass
class KoopmanRepresentation:
    u_past: np.ndarray
    y_past: np.ndarray
    u_future: np.ndarray
    y_future: np.ndarray
    t_ini: int
    n_future: int
    n_z: int
    input_size: int
    output_size: int
    iterations: int = 0
    converged: bool = True
    rel_changes: list = field(default_factory=list)
    seed: int | None = None

    @property
    def width(self) -> int:
        return self.u_past.shape[1]

    def stacked(self) -> np.ndarray:
        return np.vstack([self.u_past, self.y_past, self.u_future, self.y_future])

    @property
    def output_hankel(self) -> np.ndarray:
        return np.vstack([self.y_past, self.y_future])

    @cached_property
    def init_basis(self) -> np.ndarray:
        """Orthonormal basis of ``range(col(U_P, Y_P*))``."""
        return numerics.range_basis(np.vstack([self.u_past, self.y_past]))

    @property
    def final_rel_change(self) -> float:
        return float(self.rel_changes[-1]) if self.rel_changes else 0.0

    def predict(self, u_ini, y_ini, u_future) -> np.ndarray:
        """Future outputs for a given past window and future inputs.

        The past window is first projected onto the library range; ``g`` is
        the minimum-norm solution of the remaining equations.
        """
        w = np.concatenate([np.ravel(u_ini), np.ravel(y_ini)])
        w = self.init_basis @ (self.init_basis.T @ w)
        lhs = np.vstack([self.u_past, self.y_past, self.u_future])
        g = numerics.least_squares(lhs, np.concatenate([w, np.ravel(u_future)]))
        return (self.y_future @ g).reshape(self.n_future, self.output_size)

    def save(self, path) -> None:
        meta = dict(t_ini=self.t_ini, n_future=self.n_future, n_z=self.n_z,
                    input_size=self.input_size, output_size=self.output_size,
                    iterations=self.iterations, converged=self.converged, seed=self.seed)
        with open(path, "wb") as fh:
            np.savez(fh, u_past=self.u_past, y_past=self.y_past, u_future=self.u_future,
                     y_future=self.y_future, rel_changes=np.asarray(self.rel_changes, dtype=np.float64),
                     meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path) -> "KoopmanRepresentation":
        with np.load(path) as data:
            meta = json.loads(data["meta"].tobytes().decode())
            return cls(u_past=data["u_past"], y_past=data["y_past"], u_future=data["u_future"],
                       y_future=data["y_future"], rel_changes=data["rel_changes"].tolist(), **meta)


def iterate(u_d, y_d, cfg: IdConfig = IdConfig(), seed=None) -> KoopmanRepresentation:
    """Iterative Hankel-Koopman construction from one input/output record.

    Stops once ``||H1 - H3||_F <= epsilon ||H1||_F``; the returned output
    rows are the rank-projected iterate ``H1``. When ``max_iters`` is hit the
    iterate with the smallest relative change is returned with
    ``converged=False``.
    """
    u_d = np.asarray(u_d, dtype=np.float64)
    y_d = np.asarray(y_d, dtype=np.float64)
    u_d = u_d[:, None] if u_d.ndim == 1 else u_d
    y_d = y_d[:, None] if y_d.ndim == 1 else y_d
    m, p = u_d.shape[1], y_d.shape[1]
    depth = cfg.depth
    width = len(u_d) - depth + 1
    rank_target = m * depth + cfg.n_z
    if width < rank_target:
        raise ValueError(f"{width} Hankel columns < m*L + n_z = {rank_target}")
    if not is_persistently_exciting(u_d, depth):
        raise ValueError(f"input is not persistently exciting of order {depth}")

    h_u = hankel_matrix(u_d, depth)
    h_y = hankel_matrix(y_d, depth)
    cut_u, cut_y = m * cfg.t_ini, p * cfg.t_ini
    u_p, u_f = h_u[:cut_u], h_u[cut_u:]

    h3 = h_y
    best, best_rel = None, np.inf
    history = []
    converged = False
    for _ in range(cfg.max_iters):
        h1 = low_rank_step(u_p, u_f, h3, rank_target)
        y_f2, _ = causal_step(u_p, h1[:cut_y], u_f, h1[cut_y:], cfg.n_future, return_predictor=False)
        h3 = hankel_project(np.vstack([h1[:cut_y], y_f2]), p)
        rel = float(np.linalg.norm(h1 - h3) / np.linalg.norm(h1))
        history.append(rel)
        if rel < best_rel:
            best, best_rel = h1, rel
        if rel <= cfg.epsilon:
            converged = True
            best = h1
            break

    return KoopmanRepresentation(
        u_past=u_p, y_past=best[:cut_y], u_future=u_f, y_future=best[cut_y:],
        t_ini=cfg.t_ini, n_future=cfg.n_future, n_z=cfg.n_z, input_size=m, output_size=p,
        iterations=len(history), converged=converged, rel_changes=history,
        seed=None if seed is None else int(seed),
    )
