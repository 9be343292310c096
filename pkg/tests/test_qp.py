import itertools

import numpy as np
import pytest

from dfkmpc.qp import INFEASIBLE, OPTIMAL, MpcProblem, solve_qp


def _kkt_solve(h, f, a, b):
    """Equality-constrained minimiser of x'Hx + f'x by one linear solve."""
    n, k = h.shape[0], a.shape[0]
    kkt = np.block([[2 * h, a.T], [a, np.zeros((k, k))]])
    return np.linalg.solve(kkt, np.concatenate([-f, b]))[:n]


def _enumerate(prob):
    """Exhaustive active-set oracle for strictly convex problems."""
    best, best_val = None, np.inf
    rows = prob.a_in.shape[0]
    for sides in itertools.product((None, "lo", "hi"), repeat=rows):
        act = [i for i, s in enumerate(sides) if s]
        a = np.vstack([prob.a_eq, prob.a_in[act]])
        b = np.concatenate([prob.b_eq, [prob.lower[i] if sides[i] == "lo" else prob.upper[i] for i in act]])
        if np.linalg.matrix_rank(a) < a.shape[0] if a.size else False:
            continue
        x = _kkt_solve(prob.hessian, prob.linear, a, b) if a.size else np.linalg.solve(2 * prob.hessian, -prob.linear)
        ax = prob.a_in @ x
        if np.all(ax >= prob.lower - 1e-9) and np.all(ax <= prob.upper + 1e-9):
            val = prob.objective(x)
            if val < best_val:
                best, best_val = x, val
    return best


def _spd(rng, n):
    m = rng.normal(size=(n, n))
    return m @ m.T + 0.1 * np.eye(n)


def test_equality_only_matches_kkt_solve():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n, k = 6, 2
        h, f = _spd(rng, n), rng.normal(size=n)
        a, b = rng.normal(size=(k, n)), rng.normal(size=k)
        sol = solve_qp(MpcProblem(h, f, a_eq=a, b_eq=b))
        assert sol.status == OPTIMAL and sol.kkt_residual <= 1e-6
        assert np.allclose(sol.g, _kkt_solve(h, f, a, b), atol=1e-8)


def test_toy_box_problem():
    # minimise (x1 - 2)^2 + (x2 + 1)^2 with x in [0, 1]^2 -> (1, 0)
    prob = MpcProblem(np.eye(2), [-4.0, 2.0], 5.0, a_in=np.eye(2), lower=0.0, upper=1.0)
    sol = solve_qp(prob)
    assert sol.ok and np.allclose(sol.g, [1.0, 0.0], atol=1e-8)
    assert sol.objective == pytest.approx(2.0)


@pytest.mark.parametrize("seed", range(15))
def test_small_instances_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, r = 4, 5
    h, f = _spd(rng, n), 3 * rng.normal(size=n)
    x_feas = 0.3 * rng.normal(size=n)
    a_eq = rng.normal(size=(1, n)) if seed % 2 else None
    b_eq = a_eq @ x_feas if seed % 2 else None
    a_in = rng.normal(size=(r, n))
    prob = MpcProblem(h, f, a_eq=a_eq, b_eq=b_eq, a_in=a_in, lower=a_in @ x_feas - rng.uniform(0.1, 1, r),
                      upper=a_in @ x_feas + rng.uniform(0.1, 1, r))
    sol = solve_qp(prob)
    oracle = _enumerate(prob)
    assert sol.status == OPTIMAL and sol.kkt_residual <= 1e-6
    assert np.allclose(sol.g, oracle, atol=1e-6)
    assert sol.objective == pytest.approx(prob.objective(oracle), abs=1e-8 * max(1, abs(sol.objective)))


def test_infeasible_equalities_detected():
    prob = MpcProblem(np.eye(2), np.zeros(2), a_eq=[[1.0, 0.0], [1.0, 0.0]], b_eq=[0.0, 1.0])
    assert solve_qp(prob).status == INFEASIBLE


def test_infeasible_inequalities_detected():
    prob = MpcProblem(np.eye(2), np.zeros(2), a_in=[[1.0, 0.0], [1.0, 0.0]], lower=[-np.inf, 1.0],
                      upper=[0.0, np.inf])
    assert solve_qp(prob).status == INFEASIBLE


def test_no_feasible_descent_direction():
    rng = np.random.default_rng(3)
    n = 5
    prob = MpcProblem(_spd(rng, n), rng.normal(size=n), a_eq=rng.normal(size=(2, n)), b_eq=rng.normal(size=2),
                      a_in=np.eye(n), lower=-1.0, upper=1.0)
    sol = solve_qp(prob)
    assert sol.ok
    null = np.linalg.svd(prob.a_eq)[2][2:].T
    base = prob.objective(sol.g)
    for _ in range(100):
        step = null @ rng.normal(size=n - 2)
        x = sol.g + 1e-3 * step / np.linalg.norm(step)
        if np.all(np.abs(x) <= 1.0):
            assert prob.objective(x) >= base - 1e-6


def test_problem_validation():
    with pytest.raises(ValueError):
        MpcProblem(np.eye(2), np.zeros(2), a_in=np.eye(2), lower=1.0, upper=0.0)
    prob = MpcProblem(np.eye(2), np.zeros(2), a_in=np.eye(2), lower=[-1.0, -np.inf], upper=1.0)
    assert prob.n_inequalities == 3
