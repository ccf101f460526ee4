"""Cascade switching, SLERP, and run-to-completion protocol tests."""

import numpy as np
import pytest

from dscascade.controller import (CascadeController, ControlOutput,
                                  run_to_completion, slerp)
from dscascade.data import GoalFrame
from dscascade.errors import DivergenceError, ValidationError
from dscascade.sim import PointMassEnv, SimConfig


class PointPolicy:
    """Analytic stand-in policy: proportional pull toward its frame goal."""

    kind = "stable"

    def __init__(self, goal, gain=3.0, v_max=5.0):
        self.frame = GoalFrame(goal=np.asarray(goal, dtype=float))
        self.gain = gain
        self.v_max = v_max

    def velocity(self, x_frame):
        return -self.gain * np.asarray(x_frame)


class ConstantPolicy:
    """Emits a fixed world velocity; used to tell policies apart."""

    kind = "bc"

    def __init__(self, vec, v_max=10.0):
        self.frame = GoalFrame(goal=np.zeros(len(vec)))
        self.vec = np.asarray(vec, dtype=float)
        self.v_max = v_max

    def velocity(self, x_frame):
        return self.vec.copy()


def three_goal_controller(policy_cls=PointPolicy, delta=0.05):
    goals = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    if policy_cls is PointPolicy:
        policies = [PointPolicy(g) for g in goals]
    else:
        policies = [ConstantPolicy([float(k + 1), 0.0]) for k in range(3)]
    return CascadeController(policies=policies, subgoals=goals, deltas=delta,
                             gripper_actions=[1, 0, 0],
                             expected_steps=[100, 100, 100])


def test_far_from_subgoal_runs_active_policy():
    ctrl = three_goal_controller(ConstantPolicy)
    out = ctrl.step(np.array([0.0, 0.0]))
    assert ctrl.active_index == 0
    assert not out.segment_completed
    assert out.gripper_command is None
    np.testing.assert_array_equal(out.velocity, [1.0, 0.0])


def test_within_delta_advances_and_uses_next_policy():
    ctrl = three_goal_controller(ConstantPolicy)
    out = ctrl.step(np.array([1.0, 0.01]))
    assert out.segment_completed
    assert out.gripper_command == 1
    assert ctrl.active_index == 1
    np.testing.assert_array_equal(out.velocity, [2.0, 0.0])


def test_terminal_segment_holds_last_policy():
    ctrl = three_goal_controller(ConstantPolicy)
    ctrl.active_index = 2
    out = ctrl.step(np.array([0.0, 1.0]))
    assert ctrl.active_index == 2
    assert out.segment_completed
    np.testing.assert_array_equal(out.velocity, [3.0, 0.0])
    # speed never exceeds the policy's own output at that point
    assert np.linalg.norm(out.velocity) <= 3.0 + 1e-12


def test_exactly_one_switching_clause_fires():
    rng = np.random.default_rng(0)
    for _ in range(300):
        ctrl = three_goal_controller()
        k = int(rng.integers(0, 3))
        ctrl.active_index = k
        x = rng.uniform(-1.5, 2.5, size=2)
        dist = np.linalg.norm(x - ctrl.subgoals[k])
        out = ctrl.step(x)
        advanced = ctrl.active_index == k + 1
        held = ctrl.active_index == k
        if dist > ctrl.deltas[k]:
            assert held and not out.segment_completed
        elif k < 2:
            assert advanced and out.segment_completed
        else:
            assert held and out.segment_completed


def test_active_index_never_decreases():
    ctrl = three_goal_controller()
    env = PointMassEnv(SimConfig(), np.random.default_rng(0))
    x = env.reset(np.array([0.0, 0.0]))
    seen = [ctrl.active_index]
    for _ in range(600):
        out = ctrl.step(x)
        x = env.step(out)
        seen.append(ctrl.active_index)
    assert all(b >= a for a, b in zip(seen, seen[1:]))
    assert seen[-1] == 2


def test_velocity_capped_at_policy_vmax():
    pol = ConstantPolicy([100.0, 0.0], v_max=2.0)
    ctrl = CascadeController(policies=[pol], subgoals=np.array([[5.0, 0.0]]),
                             deltas=0.01, gripper_actions=[0],
                             expected_steps=[10])
    out = ctrl.step(np.zeros(2))
    assert np.linalg.norm(out.velocity) == pytest.approx(2.0)


def test_slerp_endpoints():
    q0 = np.array([1.0, 0.0, 0.0, 0.0])
    q1 = np.array([np.cos(0.9 / 2), 0.0, np.sin(0.9 / 2), 0.0])
    np.testing.assert_allclose(slerp(q0, q1, 0.0), q0, atol=1e-12)
    np.testing.assert_allclose(slerp(q0, q1, 1.0), q1, atol=1e-12)


def test_slerp_halfway_ninety_degrees_about_z():
    q0 = np.array([1.0, 0.0, 0.0, 0.0])
    q1 = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
    mid = slerp(q0, q1, 0.5)
    expected = np.array([np.cos(np.pi / 8), 0.0, 0.0, np.sin(np.pi / 8)])
    np.testing.assert_allclose(mid, expected, atol=1e-12)


def test_slerp_antipodal_representations_agree():
    rng = np.random.default_rng(3)
    q0 = rng.normal(size=4)
    q0 /= np.linalg.norm(q0)
    q1 = rng.normal(size=4)
    q1 /= np.linalg.norm(q1)
    for s in (0.2, 0.5, 0.8):
        a = slerp(q0, q1, s)
        b = slerp(q0, -q1, s)
        assert min(np.linalg.norm(a - b), np.linalg.norm(a + b)) < 1e-12


def test_slerp_output_unit_norm():
    rng = np.random.default_rng(4)
    for _ in range(10_000):
        q0 = rng.normal(size=4)
        q0 /= np.linalg.norm(q0)
        q1 = rng.normal(size=4)
        q1 /= np.linalg.norm(q1)
        out = slerp(q0, q1, float(rng.uniform()))
        assert abs(np.linalg.norm(out) - 1.0) <= 1e-9


def test_slerp_rejects_non_unit_input():
    with pytest.raises(ValidationError):
        slerp(np.array([1.0, 0.0, 0.0, 0.1]), np.array([1.0, 0.0, 0.0, 0.0]), 0.5)


def test_slerp_tiny_angle_falls_back_to_nlerp():
    q0 = np.array([1.0, 0.0, 0.0, 0.0])
    q1 = np.array([np.cos(1e-8), np.sin(1e-8), 0.0, 0.0])
    out = slerp(q0, q1, 0.5)
    assert abs(np.linalg.norm(out) - 1.0) <= 1e-12


def test_single_segment_task_succeeds():
    pol = PointPolicy([1.0, 0.5])
    ctrl = CascadeController(policies=[pol], subgoals=np.array([[1.0, 0.5]]),
                             deltas=0.008, gripper_actions=[1],
                             expected_steps=[150])
    env = PointMassEnv(SimConfig(), np.random.default_rng(0))
    result = run_to_completion(ctrl, np.zeros(2), env, horizon_per_subgoal=1000)
    assert result.total_success
    assert result.outcomes[0].attained


def test_zero_horizon_times_out_first_subgoal():
    pol = PointPolicy([1.0, 0.5])
    ctrl = CascadeController(policies=[pol], subgoals=np.array([[1.0, 0.5]]),
                             deltas=0.008, gripper_actions=[1],
                             expected_steps=[150])
    env = PointMassEnv(SimConfig(), np.random.default_rng(0))
    result = run_to_completion(ctrl, np.zeros(2), env, horizon_per_subgoal=0)
    assert not result.outcomes[0].attained
    assert not result.total_success


def test_reset_after_timeout_continues_with_next_subgoal():
    goals = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    dead = ConstantPolicy([0.0, 0.0])  # never reaches subgoal 2
    policies = [PointPolicy(goals[0]), dead, PointPolicy(goals[2])]
    ctrl = CascadeController(policies=policies, subgoals=goals, deltas=0.02,
                             gripper_actions=[1, 0, 0],
                             expected_steps=[100, 100, 100])
    env = PointMassEnv(SimConfig(), np.random.default_rng(1))
    result = run_to_completion(ctrl, np.zeros(2), env, horizon_per_subgoal=400)
    assert result.outcomes[0].attained
    assert not result.outcomes[1].attained
    assert result.outcomes[2].reset
    assert result.outcomes[2].attained  # assessed independently after reset
    assert not result.total_success


def test_three_segment_success_has_no_resets():
    ctrl = three_goal_controller()
    env = PointMassEnv(SimConfig(), np.random.default_rng(2))
    result = run_to_completion(ctrl, np.zeros(2), env, horizon_per_subgoal=1000)
    assert result.total_success
    assert not any(o.reset for o in result.outcomes)
    assert all(o.attained for o in result.outcomes)


def test_divergent_environment_raises():
    class BadEnv:
        dt = 0.01
        x_true = np.zeros(2)
        gripper_state = 0

        def reset(self, x0):
            return np.asarray(x0)

        def step(self, out):
            return np.full(2, np.nan)

    ctrl = three_goal_controller()
    with pytest.raises(DivergenceError):
        run_to_completion(ctrl, np.zeros(2), BadEnv(), horizon_per_subgoal=10)


def test_orientation_keys_produce_unit_quaternions():
    pol = PointPolicy([1.0, 0.0])
    keys = [(np.array([1.0, 0, 0, 0]),
             np.array([np.cos(0.6), 0, 0, np.sin(0.6)]))]
    ctrl = CascadeController(policies=[pol], subgoals=np.array([[1.0, 0.0]]),
                             deltas=0.01, gripper_actions=[1],
                             expected_steps=[100], orientation_keys=keys)
    out = ctrl.step(np.zeros(2), t_in_segment=0.3)
    assert out.orientation is not None
    assert abs(np.linalg.norm(out.orientation) - 1.0) <= 1e-9


def test_control_output_is_frozen():
    out = ControlOutput(velocity=np.zeros(2))
    with pytest.raises(Exception):
        out.velocity = np.ones(2)
