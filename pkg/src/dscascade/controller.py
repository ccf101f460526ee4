"""High-level cascade: switch per-segment policies on subgoal attainment.

The controller runs policy k until the observed position is within delta of
subgoal k, then advances, emitting the segment's gripper action at the moment
of attainment. Orientation is interpolated separately by SLERP over each
segment's key quaternions; the terminal policy holds at the last subgoal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Demonstration
from .errors import ConfigError, DivergenceError, ValidationError
from .segmentation import SegmentedDemo

DEFAULT_DELTA = 0.008  # meters


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    """Constant-angular-velocity interpolation with shortest-arc sign fix."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    for q in (q0, q1):
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValidationError(f"slerp needs unit quaternions, got norm "
                                  f"{np.linalg.norm(q):.9f}")
    s = float(np.clip(s, 0.0, 1.0))
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1 = -q1
        d = -d
    d = min(d, 1.0)
    angle = np.arccos(d)
    if angle < 1e-6:
        out = (1.0 - s) * q0 + s * q1
    else:
        sa = np.sin(angle)
        out = (np.sin((1.0 - s) * angle) / sa) * q0 + (np.sin(s * angle) / sa) * q1
    return out / np.linalg.norm(out)


@dataclass(frozen=True)
class ControlOutput:
    """One control decision: world velocity plus optional events."""

    velocity: np.ndarray
    gripper_command: int | None = None
    orientation: np.ndarray | None = None
    segment_completed: bool = False
    active_segment: int = 0


def _cap_speed(v: np.ndarray, v_max: float) -> np.ndarray:
    speed = float(np.linalg.norm(v))
    if v_max > 0 and speed > v_max:
        return v * (v_max / speed)
    return v


class CascadeController:
    """Single-owner state machine over K per-segment policies."""

    def __init__(self, policies, subgoals: np.ndarray, deltas,
                 gripper_actions, expected_steps,
                 orientation_keys=None):
        k = len(policies)
        subgoals = np.asarray(subgoals, dtype=np.float64)
        if subgoals.shape[0] != k:
            raise ConfigError("one subgoal per policy required")
        deltas = np.broadcast_to(np.asarray(deltas, dtype=np.float64), (k,)).copy()
        if np.any(deltas <= 0):
            raise ConfigError("attainment thresholds must be positive")
        self.policies = list(policies)
        self.subgoals = subgoals
        self.deltas = deltas
        self.gripper_actions = [int(g) for g in gripper_actions]
        self.expected_steps = [max(1, int(e)) for e in expected_steps]
        self.orientation_keys = orientation_keys
        self.active_index = 0

    @property
    def k(self) -> int:
        return len(self.policies)

    @classmethod
    def from_segments(cls, policies, segmented: SegmentedDemo, dt: float,
                      delta=DEFAULT_DELTA) -> "CascadeController":
        expected = [max(1, int(round((s.t[-1] - s.t[0]) / dt)))
                    for s in segmented.segments]
        keys = None
        if all(s.q is not None for s in segmented.segments):
            keys = [(s.q[0], s.q[-1]) for s in segmented.segments]
        return cls(policies=policies, subgoals=segmented.subgoals, deltas=delta,
                   gripper_actions=segmented.final_gripper_actions,
                   expected_steps=expected, orientation_keys=keys)

    def _segment_velocity(self, k: int, x_world: np.ndarray) -> np.ndarray:
        pol = self.policies[k]
        v_frame = pol.velocity(pol.frame.to_frame(x_world))
        return _cap_speed(pol.frame.velocity_from_frame(v_frame), pol.v_max)

    def force_advance(self) -> bool:
        """Move to the next segment without attainment (timeout reset path)."""
        if self.active_index < self.k - 1:
            self.active_index += 1
            return True
        return False

    def step(self, x: np.ndarray, t_in_segment: float = 0.0) -> ControlOutput:
        """One control decision at observed position x.

        Within delta of the current subgoal the controller advances (and
        commands the gripper); at the last subgoal it holds the terminal
        policy and only flags completion.
        """
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise DivergenceError("controller received a non-finite position")
        k = self.active_index
        dist = float(np.linalg.norm(x - self.subgoals[k]))
        gripper_cmd = None
        completed = False
        if dist > self.deltas[k]:
            vel = self._segment_velocity(k, x)
        elif k < self.k - 1:
            gripper_cmd = self.gripper_actions[k]
            completed = True
            self.active_index = k + 1
            vel = self._segment_velocity(k + 1, x)
        else:
            completed = True
            gripper_cmd = self.gripper_actions[k]
            vel = self._segment_velocity(k, x)
        orientation = None
        if self.orientation_keys is not None:
            q0, q1 = self.orientation_keys[self.active_index]
            orientation = slerp(q0, q1, t_in_segment)
        return ControlOutput(velocity=vel, gripper_command=gripper_cmd,
                             orientation=orientation, segment_completed=completed,
                             active_segment=self.active_index)


@dataclass
class SubgoalOutcome:
    attained: bool
    steps: int
    reset: bool = False


@dataclass
class RunResult:
    outcomes: list[SubgoalOutcome]
    trajectory: list[dict] = field(default_factory=list)

    @property
    def total_success(self) -> bool:
        return all(o.attained for o in self.outcomes) and \
            not any(o.reset for o in self.outcomes)


def run_to_completion(ctrl: CascadeController, x0: np.ndarray, env,
                      horizon_per_subgoal: int, record: bool = False,
                      eval_mode: bool = True) -> RunResult:
    """Drive the environment until the last subgoal is reached or times out.

    A subgoal that is not attained within the horizon is a failure; in
    evaluation mode the environment is then reset to that subgoal's state and
    the run continues so later subgoals are assessed independently. A run
    containing any reset never counts as a total success.
    """
    k_total = ctrl.k
    outcomes = [SubgoalOutcome(attained=False, steps=0) for _ in range(k_total)]
    traj: list[dict] = []
    x_obs = env.reset(np.asarray(x0, dtype=np.float64))
    t = 0.0
    while True:
        k = ctrl.active_index
        steps = 0
        attained = False
        while steps < horizon_per_subgoal:
            frac = min(1.0, steps / ctrl.expected_steps[k])
            out = ctrl.step(x_obs, frac)
            x_obs = env.step(out)
            if not np.all(np.isfinite(x_obs)):
                raise DivergenceError(f"environment diverged in segment {k}")
            steps += 1
            t += env.dt
            if record:
                traj.append({"t": t, "x": env.x_true.copy(),
                             "velocity": out.velocity.copy(),
                             "gripper": env.gripper_state,
                             "q": out.orientation,
                             "active_segment": out.active_segment})
            if out.segment_completed:
                attained = True
                break
        outcomes[k].steps = steps
        outcomes[k].attained = attained
        if attained:
            if k == k_total - 1:
                break
            continue
        # timeout
        if not eval_mode or k == k_total - 1:
            break
        outcomes[k + 1].reset = True
        x_obs = env.reset_to(ctrl.subgoals[k], gripper=ctrl.gripper_actions[k])
        ctrl.force_advance()
    return RunResult(outcomes=outcomes, trajectory=traj)
