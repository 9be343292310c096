import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfkmpc import hankel
from dfkmpc.traffic_sim import (OvmParams, Plant, SimulationDivergence, Trajectory, desired_velocity,
                                equilibrium_state, generate_offline_data, hdv_acceleration, simulate, step)

P = OvmParams()


def test_params_validation():
    with pytest.raises(ValueError):
        OvmParams(alpha=0.0)
    with pytest.raises(ValueError):
        OvmParams(s_st=40.0)


def test_desired_velocity_shape():
    assert desired_velocity(P.s_st, P) == 0.0
    assert desired_velocity(P.s_go, P) == pytest.approx(P.v_max)
    assert desired_velocity((P.s_st + P.s_go) / 2, P) == pytest.approx(P.v_max / 2)
    assert desired_velocity(0.0, P) == 0.0 and desired_velocity(100.0, P) == P.v_max
    s = np.linspace(P.s_st + 1e-6, P.s_go - 1e-6, 500)
    assert np.all(np.diff(desired_velocity(s, P)) > 0)


def test_equilibrium_spacing_inverts_desired_velocity():
    for v in (5.0, 15.0, 27.0):
        assert desired_velocity(P.equilibrium_spacing(v), P) == pytest.approx(v)


def test_hdv_acceleration_examples():
    s = 23.0
    v = desired_velocity(s, P)
    assert hdv_acceleration(s, v, v, P) == pytest.approx(0.0)
    assert hdv_acceleration(P.s_st, 0.0, 0.0, P) == 0.0
    # V(20) = 15 is the cosine midpoint for the default parameters
    assert hdv_acceleration(20.0, 10.0, 15.0, OvmParams(alpha=0.6, beta=0.9)) == pytest.approx(0.6 * 5 + 0.9 * 5)


def test_step_fixed_point_and_single_coupling():
    x = equilibrium_state(20.0)
    assert np.array_equal(step(x, (0.0, 15.0)), x)
    nxt = step(x, (0.0, 15.5), dt=0.05)
    assert nxt[0] == pytest.approx(20.0 + 0.5 * 0.05, abs=1e-12)
    assert np.array_equal(nxt[1:], x[1:])


def test_step_composition_matches_simulate(rng):
    x = equilibrium_state(18.0)
    u = np.column_stack([rng.uniform(-1, 1, 2), rng.uniform(12, 16, 2)])
    traj = simulate(x, u)
    assert np.array_equal(traj.outputs[1], step(x, u[0]))
    assert np.array_equal(step(traj.outputs[1], u[1]), step(step(x, u[0]), u[1]))


def test_step_saturates_cav_acceleration():
    x = equilibrium_state(20.0)
    assert step(x, (10.0, 15.0))[1] == pytest.approx(15.0 + 2.0 * 0.05)
    assert step(x, (10.0, 15.0), accel_limits=None)[1] == pytest.approx(15.0 + 10.0 * 0.05)


def test_divergence_reports_step():
    x = equilibrium_state(20.0)
    u = np.array([[0.0, 15.0], [0.0, 15.0], [np.inf, 15.0]])
    with pytest.raises(SimulationDivergence) as err:
        simulate(x, u, accel_limits=None)
    assert err.value.step == 2


def test_simulate_constant_and_length():
    x = equilibrium_state(20.0)
    traj = simulate(x, np.tile([0.0, 15.0], (1200, 1)), dt=0.05)
    assert len(traj) == 1200 and traj.outputs.shape == (1200, 10)
    assert np.all(traj.outputs == x)
    with pytest.raises(ValueError):
        simulate(x, np.zeros((0, 2)))


def test_offline_data_deterministic_and_bounded():
    a = generate_offline_data(3, 1200)
    b = generate_offline_data(3, 1200)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.outputs, b.outputs)
    big = generate_offline_data(4, 10_000)
    assert big.inputs[:, 0].min() >= -5 and big.inputs[:, 0].max() <= 5
    assert big.inputs[:, 1].min() >= 10 and big.inputs[:, 1].max() <= 20
    assert np.all(a.outputs[0, 0::2] >= 15) and np.all(a.outputs[0, 0::2] <= 25)
    assert np.all(a.outputs[0, 1::2] >= 10) and np.all(a.outputs[0, 1::2] <= 20)


def test_offline_data_is_persistently_exciting():
    data = generate_offline_data(0, 1200)
    h = hankel.hankel_matrix(data.inputs, 90)
    assert h.shape == (180, 1111)
    assert np.linalg.matrix_rank(h) == 180
    assert hankel.is_persistently_exciting(data.inputs, 90)


def test_offline_velocities_non_negative_and_spacing_euler():
    for seed in range(5):
        traj = generate_offline_data(seed, 1200)
        assert traj.outputs[:, 1::2].min() >= 0.0
        s, v = traj.outputs[:, 0::2], traj.outputs[:, 1::2]
        v_prec = np.column_stack([traj.inputs[:, 1], v[:, :-1]])
        assert np.allclose(np.diff(s, axis=0), 0.05 * (v_prec - v)[:-1], atol=1e-12, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=5.01, max_value=34.99))
def test_equilibrium_invariance(s_star):
    x = equilibrium_state(s_star)
    nxt = step(x, (0.0, desired_velocity(s_star, P)))
    assert np.allclose(nxt, x, rtol=0, atol=1e-12)


def test_csv_round_trip(tmp_path):
    traj = generate_offline_data(1, 50)
    path = tmp_path / "t.csv"
    traj.to_csv(path)
    assert path.read_text().splitlines()[0] == "k,u1,v0,s1,v1,s2,v2,s3,v3,s4,v4,s5,v5"
    back = Trajectory.from_csv(path)
    assert np.array_equal(back.inputs, traj.inputs) and np.array_equal(back.outputs, traj.outputs)


def test_plant_wrapper_tracks_step_count():
    plant = Plant(equilibrium_state(20.0))
    plant.advance(0.0, 15.0)
    plant.advance(5.0, 15.0)
    assert plant.k == 2
    assert plant.applied_accel(5.0) == 2.0
