import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kstest

from dpmpb.envbench import (Env, EnvSpec, JointReachPolicy, ReachPolicy, SmoothReachPolicy, collect_random,
                            collect_switch, collect_teacher, make_policy)
from dpmpb.errors import ConfigError


def _pm(**params):
    return Env(EnvSpec("point_mass_damped", params))


def test_point_mass_rest_is_equilibrium():
    env = _pm(stiffness=2.0)
    state = np.zeros(2)
    for _ in range(50):
        state, s, _ = env.step(state, [0.0])
    assert np.array_equal(state, [0.0, 0.0])


def test_point_mass_one_step_by_hand():
    env = Env(EnvSpec("point_mass_damped", {"mass": 1.0, "damping": 0.0}, dt=0.1))
    state, s, _ = env.step(np.zeros(2), [1.0])
    assert state[1] == pytest.approx(0.1, rel=1e-15)
    assert state[0] == pytest.approx(0.01, rel=1e-15)


def test_point_mass_energy_non_increasing_without_input():
    env = _pm(damping=0.8, stiffness=1.5)
    state = np.array([1.0, 0.5])
    k, m = 1.5, 1.0
    energies = []
    for _ in range(300):
        energies.append(0.5 * m * state[1] ** 2 + 0.5 * k * state[0] ** 2)
        state, _, _ = env.step(state, [0.0])
    # semi-implicit Euler conserves a shifted energy; allow its O(dt) wobble
    assert energies[-1] < 0.01 * energies[0]
    blocks = np.array(energies[:300]).reshape(30, 10).max(axis=1)
    assert np.all(np.diff(blocks) <= 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.9, 1.9), st.floats(-30, 30), st.floats(0.01, 1.0), st.floats(0.1, 10))
def test_kinetic_energy_non_increasing_free_mass(x0, v0, damping_ratio, mass):
    # damping_ratio = dt * c / m, over the whole admissible range (0, 1]
    env = _pm(damping=damping_ratio * mass / 0.2, mass=mass)
    state = np.array([x0, v0])
    ke = 0.5 * mass * v0 ** 2
    for _ in range(100):
        state, _, _ = env.step(state, [0.0])
        new = 0.5 * mass * state[1] ** 2
        assert new <= ke + 1e-9
        assert abs(state[0]) <= 2.0
        ke = new


def test_walls_reflect():
    env = _pm(pos_limit=1.0, damping=0.0)
    state = np.array([0.95, 1.0])
    state, _, _ = env.step(state, [0.0])
    assert abs(state[0]) <= 1.0 and state[1] < 0


def test_slider_without_sticking_is_deterministic():
    env = Env(EnvSpec("sticky_slider", {"p_stick": 0.0}))
    controls = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    a = env.rollout(controls, rng=np.random.default_rng(1))
    b = env.rollout(controls, rng=np.random.default_rng(2))
    assert np.array_equal(a.s, b.s)


def test_stuck_rate_matches_probability():
    env = Env(EnvSpec("sticky_slider", {"p_stick": 0.4}))
    rng = np.random.default_rng(3)
    stuck = 0
    for _ in range(10000):
        # fully misaligned caster, reversing with no rotation
        _, _, info = env.step(np.array([0.0, 0.0, 1.0]), np.array([-0.5, 0.0]), rng)
        stuck += info["stuck"]
    assert stuck / 10000 == pytest.approx(0.4, abs=0.05)


def test_rotation_misaligns_and_forward_realigns():
    env = Env(EnvSpec("sticky_slider", {}))
    state = np.zeros(3)
    for _ in range(20):
        state, _, _ = env.step(state, [0.0, 1.0])
    assert state[2] > 0.5
    for _ in range(40):
        state, _, _ = env.step(state, [1.0, 0.0])
    assert state[2] < 0.05


def test_same_seed_same_episode():
    spec = EnvSpec("point_mass_damped", {"gain": 2.0}, noise=0.01, class_name="n")
    a = collect_random(Env(spec), 100, seed=4)
    b = collect_random(Env(spec), 100, seed=4)
    c = collect_random(Env(spec), 100, seed=5)
    assert np.array_equal(a.s, b.s) and np.array_equal(a.u, b.u)
    assert not np.array_equal(a.s, c.s)


def test_random_controls_uniform_within_bounds():
    ep = collect_random(Env(EnvSpec("sticky_slider", {})), 5000, hold_steps=1, seed=6)
    assert np.all(ep.u >= -1.0) and np.all(ep.u <= 1.0)
    for j in range(2):
        assert kstest((ep.u[:, j] + 1.0) / 2.0, "uniform").pvalue > 0.01


def test_hold_steps_repeat_controls():
    ep = collect_random(_pm(), 12, hold_steps=4, seed=7)
    assert np.all(ep.u[0] == ep.u[3]) and not np.all(ep.u[3] == ep.u[4])


def test_out_of_bounds_controls_are_clamped_and_counted():
    env = _pm()
    a, _, _ = env.step(np.zeros(2), [5.0])
    b, _, _ = env.step(np.zeros(2), [1.0])
    assert np.array_equal(a, b) and env.clamped == 1


def test_teacher_reach_converges():
    env = _pm(damping=0.5)
    ep = collect_teacher(env, ReachPolicy(target=0.8, kp=1.0, kd=1.0), 200, seed=8)
    assert abs(ep.s[-1, 0] - 0.8) < 0.05
    smooth = collect_teacher(env, SmoothReachPolicy(target=0.8, rate=0.3), 200, seed=8)
    assert abs(smooth.s[-1, 0] - 0.8) < 0.05
    pd = 1.0 * (0.8 - smooth.s[0, 0]) - 1.0 * smooth.s[0, 1]
    assert smooth.u[0, 0] == pytest.approx(0.3 * pd, rel=1e-12)  # u_prev starts at zero


def test_two_link_follows_target():
    env = Env(EnvSpec("two_link_elastic", {}))
    ep = collect_teacher(env, JointReachPolicy((0.5, -0.5)), 300, seed=9)
    np.testing.assert_allclose(ep.s[-1], [0.5, -0.5], atol=0.05)


def test_collect_switch_layout():
    ep = collect_switch(_pm(gain=1.0), _pm(gain=2.5), 30, 20, hold_steps=2, seed=10)
    assert ep.s.shape == (50, 2) and ep.u.shape == (50, 1)
    before = collect_random(_pm(gain=1.0), 30, hold_steps=2, seed=10)
    assert np.array_equal(ep.s[:30], before.s) and np.array_equal(ep.u[:30], before.u)
    with pytest.raises(ConfigError):
        collect_switch(_pm(), Env(EnvSpec("sticky_slider", {})), 5, 5)


def test_spec_validation_and_json():
    with pytest.raises(ConfigError):
        EnvSpec("pendulum")
    with pytest.raises(ConfigError):
        EnvSpec("point_mass_damped", {"mass": 0.0})
    with pytest.raises(ConfigError):
        EnvSpec("point_mass_damped", {"p_stick": 0.1})
    with pytest.raises(ConfigError, match="unstable"):
        EnvSpec("point_mass_damped", {"damping": 5.0, "mass": 0.1})
    with pytest.raises(ConfigError, match="unstable"):
        EnvSpec("two_link_elastic", {"stiffness": 40.0})
    with pytest.raises(ConfigError):
        EnvSpec.from_json({"family": "point_mass_damped", "colour": "red"})
    spec = EnvSpec("sticky_slider", {"p_stick": 0.2}, noise=0.01, class_name="s")
    assert EnvSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ConfigError):
        make_policy({"kind": "dance"})
    assert make_policy({"kind": "joint_reach", "target": [0.1, 0.2]}).target == (0.1, 0.2)
