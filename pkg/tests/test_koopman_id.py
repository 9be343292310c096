import warnings

import numpy as np
import pytest

from dfkmpc import hankel
from dfkmpc.koopman_id import (IdConfig, KoopmanRepresentation, RankTargetWarning, causal_step, iterate,
                               low_rank_step)
from conftest import random_lti, simulate_lti


def lti_data(seed, n=3, m=1, p=2, T=300):
    rng = np.random.default_rng(seed)
    sys = random_lti(rng, n, m, p)
    u = rng.normal(size=(T, m))
    return sys, u, simulate_lti(sys, rng.normal(size=n), u)


def test_config_defaults_and_validation():
    cfg = IdConfig()
    assert (cfg.n_z, cfg.t_ini, cfg.n_future, cfg.depth) == (40, 40, 50, 90)
    with pytest.raises(ValueError):
        IdConfig(n_z=10, t_ini=5)
    with pytest.raises(ValueError):
        IdConfig(epsilon=0.0)


def test_low_rank_step_keeps_exact_lti_data():
    _, u, y = lti_data(0)
    depth, t_ini = 8, 3
    hu, hy = hankel.hankel_matrix(u, depth), hankel.hankel_matrix(y, depth)
    out = low_rank_step(hu[:t_ini], hu[t_ini:], hy, depth + 3)
    assert np.linalg.norm(out - hy) <= 1e-8 * np.linalg.norm(hy)


def test_low_rank_step_full_rank_target_warns():
    rng = np.random.default_rng(1)
    u, hy = rng.normal(size=(4, 30)), rng.normal(size=(6, 30))
    with pytest.warns(RankTargetWarning):
        out = low_rank_step(u[:2], u[2:], hy, 10)
    assert np.array_equal(out, hy)


def test_low_rank_step_rank_and_optimality():
    rng = np.random.default_rng(2)
    u, hy = rng.normal(size=(4, 40)), rng.normal(size=(8, 40))
    target = 7
    out = low_rank_step(u[:2], u[2:], hy, target)
    assert np.linalg.matrix_rank(np.vstack([u, out]), tol=1e-8) <= target
    q = np.linalg.qr(u.T)[0]  # orthonormal basis of the input row space
    inside = hy @ q @ q.T
    perp = np.eye(40) - q @ q.T
    dist = np.linalg.norm(hy - out)
    for _ in range(50):
        # feasible competitors: anything inside the input rows plus a rank-3 remainder
        comp = inside + rng.normal(size=(8, 4)) @ q.T + rng.normal(size=(8, 3)) @ (rng.normal(size=(3, 40)) @ perp)
        assert np.linalg.matrix_rank(np.vstack([u, comp]), tol=1e-8) <= target
        assert dist <= np.linalg.norm(hy - comp)


def _blocks(rng, n_future=4, m=1, p=2, width=60, t_ini=3):
    u_p = rng.normal(size=(m * t_ini, width))
    y_p = rng.normal(size=(p * t_ini, width))
    u_f = rng.normal(size=(m * n_future, width))
    return u_p, y_p, u_f


def test_causal_step_fixed_point_for_causal_data():
    rng = np.random.default_rng(3)
    n_future, m, p = 4, 1, 2
    u_p, y_p, u_f = _blocks(rng)
    k = rng.normal(size=(p * n_future, u_p.shape[0] + y_p.shape[0] + u_f.shape[0]))
    n_past = u_p.shape[0] + y_p.shape[0]
    for i in range(n_future):
        k[p * i:p * (i + 1), n_past + m * (i + 1):] = 0.0
    y_f = k @ np.vstack([u_p, y_p, u_f])
    fitted, k_hat = causal_step(u_p, y_p, u_f, y_f, n_future)
    assert np.linalg.norm(fitted - y_f) <= 1e-10 * np.linalg.norm(y_f)
    assert np.allclose(k_hat @ np.vstack([u_p, y_p, u_f]), fitted, atol=1e-10)


def test_causal_step_single_step_is_plain_least_squares():
    rng = np.random.default_rng(4)
    u_p, y_p, u_f = _blocks(rng, n_future=1)
    y_f = rng.normal(size=(2, 60))
    reg = np.vstack([u_p, y_p, u_f])
    fitted, _ = causal_step(u_p, y_p, u_f, y_f, 1)
    coef = np.linalg.lstsq(reg.T, y_f.T, rcond=None)[0].T
    assert np.allclose(fitted, coef @ reg, atol=1e-10)


def test_causal_step_residuals_and_strict_causality():
    rng = np.random.default_rng(5)
    n_future, m, p = 4, 1, 2
    u_p, y_p, u_f = _blocks(rng, n_future)
    y_f = rng.normal(size=(p * n_future, 60))
    fitted, k = causal_step(u_p, y_p, u_f, y_f, n_future)
    n_past = u_p.shape[0] + y_p.shape[0]
    for i in range(n_future):
        reg = np.vstack([u_p, y_p, u_f[:m * (i + 1)]])
        res = y_f[p * i:p * (i + 1)] - fitted[p * i:p * (i + 1)]
        assert np.linalg.norm(res @ reg.T) <= 1e-8 * np.linalg.norm(y_f) * np.linalg.norm(reg)
        assert np.all(k[p * i:p * (i + 1), n_past + m * (i + 1):] == 0.0)
    # perturbing a later input block leaves earlier predicted blocks untouched
    bumped = u_f.copy()
    bumped[m * 3:] += 10.0
    before = k @ np.vstack([u_p, y_p, u_f])
    after = k @ np.vstack([u_p, y_p, bumped])
    assert np.array_equal(before[:p * 3], after[:p * 3])
    assert not np.allclose(before[p * 3:], after[p * 3:])


def test_iterate_exact_lti_is_fixed_point():
    _, u, y = lti_data(6)
    rep = iterate(u, y, IdConfig(n_z=3, n_future=5))
    hy = hankel.hankel_matrix(y, 8)
    assert rep.converged and rep.iterations <= 2
    assert np.linalg.norm(rep.output_hankel - hy) <= 1e-8 * np.linalg.norm(hy)
    assert np.array_equal(np.vstack([rep.u_past, rep.u_future]), hankel.hankel_matrix(u, 8))


def test_iterate_noisy_data_invariants():
    _, u, y = lti_data(7, n=5)
    y = y + 0.05 * np.random.default_rng(0).normal(size=y.shape)
    cfg = IdConfig(n_z=3, n_future=5, epsilon=1e-6, max_iters=30)
    rep = iterate(u, y, cfg)
    assert len(rep.rel_changes) == rep.iterations
    assert np.linalg.matrix_rank(rep.stacked(), tol=1e-8 * np.linalg.norm(rep.stacked(), 2)) <= 8 + 3
    if rep.converged:
        assert rep.final_rel_change <= cfg.epsilon
    short = iterate(u, y, IdConfig(n_z=3, n_future=5, epsilon=1e-14, max_iters=1))
    assert not short.converged and short.iterations == 1


def test_iterate_preconditions():
    _, u, y = lti_data(8, T=15)
    with pytest.raises(ValueError, match="columns"):
        iterate(u, y, IdConfig(n_z=3, n_future=5))
    with pytest.raises(ValueError, match="persistently"):
        iterate(np.ones((300, 1)), np.ones((300, 2)), IdConfig(n_z=3, n_future=5))


def test_representation_round_trip(tmp_path):
    _, u, y = lti_data(9)
    rep = iterate(u, y, IdConfig(n_z=3, n_future=5), seed=9)
    rep.save(tmp_path / "rep.npz")
    back = KoopmanRepresentation.load(tmp_path / "rep.npz")
    assert np.array_equal(back.stacked(), rep.stacked())
    assert (back.seed, back.iterations, back.rel_changes) == (9, rep.iterations, rep.rel_changes)
    args = (u[:3], y[:3], u[3:8])
    assert np.array_equal(back.predict(*args), rep.predict(*args))


def test_predict_exact_lti():
    sys, u, y = lti_data(10)
    rep = iterate(u, y, IdConfig(n_z=3, n_future=5))
    rng = np.random.default_rng(11)
    u_new = rng.normal(size=(8, 1))
    y_new = simulate_lti(sys, rng.normal(size=3), u_new)
    pred = rep.predict(u_new[:3], y_new[:3], u_new[3:])
    assert np.allclose(pred, y_new[3:], atol=1e-8)
