"""Kinematic point-mass environment and synthetic desk-scale tasks.

The environment integrates commanded velocities, corrupts observations with
Gaussian noise, and injects impulse displacement kicks at seed-scheduled
steps within each segment's active window. Synthetic tasks are single smooth
demonstrations with two gripper toggles (grasp, release), built from
via-point legs with a minimum-jerk speed profile so velocities vanish exactly
at the subgoals. Transport legs retrace the approach line, which is what
makes the non-segmented baselines collapse: a single-valued velocity field
cannot traverse the same points in two directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import ControlOutput, _cap_speed
from .data import Demonstration, finite_difference_velocities
from .errors import ConfigError

CONDITIONS = ("deterministic", "noisy", "perturbed+noisy")
NOISY_SIGMA = 0.01  # meters, matches real end-effector feedback noise


@dataclass
class SimConfig:
    """Environment knobs; ``v_max`` of None defers to the policies' own caps."""

    dt: float = 0.01
    noise_sigma: float = 0.0
    perturb_count: int = 0           # impulses per segment
    perturb_magnitude: float = 0.05  # meters
    v_max: float | None = None
    horizon_per_subgoal: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.noise_sigma < 0 or self.perturb_magnitude < 0:
            raise ConfigError("noise and perturbation magnitudes must be >= 0")
        if self.perturb_count < 0 or self.horizon_per_subgoal < 0:
            raise ConfigError("counts must be nonnegative")


def condition_config(condition: str, base: SimConfig) -> SimConfig:
    """Resolve a named experimental condition into a concrete SimConfig."""
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition '{condition}', expected one of {CONDITIONS}")
    cfg = SimConfig(dt=base.dt, noise_sigma=0.0, perturb_count=0,
                    perturb_magnitude=base.perturb_magnitude, v_max=base.v_max,
                    horizon_per_subgoal=base.horizon_per_subgoal, seed=base.seed)
    if condition in ("noisy", "perturbed+noisy"):
        cfg.noise_sigma = NOISY_SIGMA
    if condition == "perturbed+noisy":
        cfg.perturb_count = max(1, base.perturb_count)
    return cfg


def env_step(x_true: np.ndarray, out: ControlOutput, cfg: SimConfig,
             rng: np.random.Generator,
             impulse: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One kinematic step: integrate velocity, add impulse, observe with noise."""
    v = np.asarray(out.velocity, dtype=np.float64)
    if cfg.v_max is not None:
        v = _cap_speed(v, cfg.v_max)
    x_next = x_true + v * cfg.dt
    if impulse is not None:
        x_next = x_next + impulse
    if cfg.noise_sigma > 0:
        x_obs = x_next + rng.normal(0.0, cfg.noise_sigma, size=x_next.shape)
    else:
        x_obs = x_next.copy()
    return x_next, x_obs


class PointMassEnv:
    """Stateful wrapper around env_step with per-segment impulse scheduling.

    Impulse steps are drawn uniformly over the segment's expected active
    window when the segment begins, so kicks land mid-flight rather than
    after attainment.
    """

    def __init__(self, cfg: SimConfig, rng: np.random.Generator,
                 expected_steps=None):
        self.cfg = cfg
        self.rng = rng
        self.expected_steps = list(expected_steps) if expected_steps is not None else None
        self.x_true: np.ndarray | None = None
        self.gripper_state = 0
        self._segment = 0
        self._step_in_segment = 0
        self._impulse_steps: set[int] = set()

    @property
    def dt(self) -> float:
        return self.cfg.dt

    def _window(self, segment: int) -> int:
        if self.expected_steps is not None and segment < len(self.expected_steps):
            return max(1, self.expected_steps[segment])
        return max(1, self.cfg.horizon_per_subgoal)

    def _draw_schedule(self, segment: int) -> None:
        self._impulse_steps = set()
        if self.cfg.perturb_count > 0 and self.cfg.perturb_magnitude > 0:
            window = self._window(segment)
            draws = self.rng.integers(0, window, size=self.cfg.perturb_count)
            self._impulse_steps = set(int(v) for v in draws)

    def reset(self, x0: np.ndarray) -> np.ndarray:
        self.x_true = np.asarray(x0, dtype=np.float64).copy()
        self.gripper_state = 0
        self._segment = 0
        self._step_in_segment = 0
        self._draw_schedule(0)
        return self.observe()

    def reset_to(self, x: np.ndarray, gripper: int | None = None) -> np.ndarray:
        """Teleport to a recorded post-subgoal state (timeout recovery)."""
        self.x_true = np.asarray(x, dtype=np.float64).copy()
        if gripper is not None:
            self.gripper_state = int(gripper)
        self._segment += 1
        self._step_in_segment = 0
        self._draw_schedule(self._segment)
        return self.observe()

    def observe(self) -> np.ndarray:
        if self.cfg.noise_sigma > 0:
            return self.x_true + self.rng.normal(0.0, self.cfg.noise_sigma,
                                                 size=self.x_true.shape)
        return self.x_true.copy()

    def step(self, out: ControlOutput) -> np.ndarray:
        impulse = None
        if self._step_in_segment in self._impulse_steps:
            direction = self.rng.normal(size=self.x_true.shape)
            norm = np.linalg.norm(direction)
            if norm > 0:
                impulse = direction / norm * self.cfg.perturb_magnitude
        self.x_true, x_obs = env_step(self.x_true, out, self.cfg, self.rng, impulse)
        self._step_in_segment += 1
        if out.gripper_command is not None:
            self.gripper_state = int(out.gripper_command)
        if out.active_segment != self._segment:
            self._segment = out.active_segment
            self._step_in_segment = 0
            self._draw_schedule(self._segment)
        return x_obs


# ---------------------------------------------------------------------------
# synthetic tasks

TASK_KINDS = ("pick-place-3seg", "s-curve", "square-nut-like")


def _min_jerk(tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5
    ds = 30 * tau ** 2 - 60 * tau ** 3 + 30 * tau ** 4
    return s, ds


def _polyline_leg(vias: np.ndarray, duration: float, n: int,
                  tau_start: float = 0.0):
    """Sample a via-point path under a minimum-jerk speed profile.

    Returns positions and velocities at n samples including both endpoints;
    speed is zero exactly at the leg end. ``tau_start`` > 0 clips the initial
    creep phase so the first sample is already in motion (a recording that
    starts mid-reach), which keeps the learned field decisive at the start.
    """
    vias = np.asarray(vias, dtype=np.float64)
    deltas = np.diff(vias, axis=0)
    seg_len = np.linalg.norm(deltas, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    tau = np.linspace(float(tau_start), 1.0, n)
    s, ds = _min_jerk(tau)
    arc = s * total
    seg_idx = np.clip(np.searchsorted(cum, arc, side="right") - 1, 0,
                      len(seg_len) - 1)
    frac = (arc - cum[seg_idx]) / seg_len[seg_idx]
    pos = vias[seg_idx] + frac[:, None] * deltas[seg_idx]
    direction = deltas[seg_idx] / seg_len[seg_idx][:, None]
    vel = direction * (ds * total / duration)[:, None]
    pos[-1] = vias[-1]
    vel[-1] = 0.0
    if tau_start == 0.0:
        pos[0] = vias[0]
        vel[0] = 0.0
    return pos, vel


def _s_curve_vias(p0: np.ndarray, p1: np.ndarray, swing: float, n: int = 40):
    """Dense via points tracing an S-shaped sweep between two points."""
    u = np.linspace(0.0, 1.0, n)[:, None]
    base = (1 - u) * p0 + u * p1
    chord = p1 - p0
    lateral = np.cross(chord, np.array([0.0, 0.0, 1.0]))
    lnorm = np.linalg.norm(lateral)
    if lnorm > 0:
        lateral = lateral / lnorm
    offset = swing * np.sin(2.0 * np.pi * u) * np.sin(np.pi * u)
    lift = 0.08 * np.sin(np.pi * u)
    return base + offset * lateral + lift * np.array([0.0, 0.0, 1.0])


def _task_geometry(kind: str, rng: np.random.Generator):
    def jit(p, s=0.012):
        return np.asarray(p) + rng.uniform(-s, s, size=3) * np.array([1, 1, 0.4])

    if kind == "pick-place-3seg":
        start = jit([0.00, 0.00, 0.25])
        hover1 = jit([0.30, 0.05, 0.15])
        grasp = jit([0.30, 0.05, 0.03])
        hover2 = jit([0.10, 0.35, 0.15])
        place = jit([0.10, 0.35, 0.04])
        park = jit([0.00, 0.15, 0.22])
        legs = [np.array([start, hover1, grasp]),
                np.array([grasp, hover1, hover2, place]),
                np.array([place, hover2, park])]
    elif kind == "s-curve":
        start = jit([0.00, 0.00, 0.20])
        above1 = jit([0.25, -0.05, 0.09])
        grasp = jit([0.25, -0.05, 0.03])
        place = jit([0.05, 0.30, 0.05])
        above2 = place + np.array([0.0, 0.0, 0.06])
        park = place + np.array([-0.08, -0.14, 0.16])
        sweep = _s_curve_vias(above1, above2, swing=0.10 + rng.uniform(-0.01, 0.01))
        legs = [np.array([start, above1, grasp]),
                np.concatenate([[grasp], sweep, [place]]),
                np.array([place, park])]
    elif kind == "square-nut-like":
        start = jit([0.00, 0.00, 0.22])
        above1 = jit([0.28, 0.00, 0.12])
        grasp = jit([0.28, 0.00, 0.02])
        c1 = jit([0.28, 0.28, 0.18])
        c2 = jit([0.06, 0.28, 0.18])
        above2 = np.array([c2[0], c2[1], 0.10])
        place = np.array([c2[0], c2[1], 0.02])
        park = place + np.array([-0.06, -0.16, 0.18])
        legs = [np.array([start, above1, grasp]),
                np.array([grasp, above1, c1, c2, above2, place]),
                np.array([place, park])]
    else:
        raise ConfigError(f"unknown task kind '{kind}', expected one of {TASK_KINDS}")
    return legs


def synthetic_task_details(kind: str, seed: int = 0, noise_sigma: float = 0.0,
                           samples_per_leg: int = 35):
    """Build a task demonstration plus its analytic ground truth."""
    rng = np.random.default_rng([seed, sum(ord(c) for c in kind)])
    legs = _task_geometry(kind, rng)
    durations = [1.0 + rng.uniform(-0.1, 0.1) for _ in legs]
    pos_parts, vel_parts, t_parts = [], [], []
    t_start = 0.0
    for i, (vias, dur) in enumerate(zip(legs, durations)):
        pos, vel = _polyline_leg(vias, dur, samples_per_leg,
                                 tau_start=0.12 if i == 0 else 0.0)
        times = np.linspace(t_start, t_start + dur, samples_per_leg)
        t_start += dur
        if i > 0:
            pos, vel, times = pos[1:], vel[1:], times[1:]
        pos_parts.append(pos)
        vel_parts.append(vel)
        t_parts.append(times)
    x = np.concatenate(pos_parts)
    xdot = np.concatenate(vel_parts)
    t = np.concatenate(t_parts)
    n = len(x)
    grasp_idx = samples_per_leg - 1
    release_idx = 2 * samples_per_leg - 2
    gripper = np.zeros(n, dtype=int)
    gripper[grasp_idx:release_idx] = 1
    # yaw schedule per leg, slerped by the controller at execution time
    yaw_keys = [0.0, 0.5, -0.3, 0.2]
    yaw = np.empty(n)
    bounds = [0, grasp_idx, release_idx, n - 1]
    for i in range(3):
        a, b = bounds[i], bounds[i + 1]
        frac = np.linspace(0.0, 1.0, b - a + 1)
        yaw[a:b + 1] = yaw_keys[i] + frac * (yaw_keys[i + 1] - yaw_keys[i])
    q = np.stack([np.cos(yaw / 2), np.zeros(n), np.zeros(n), np.sin(yaw / 2)], axis=1)
    subgoals = x[[grasp_idx, release_idx, n - 1]].copy()
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
        xdot = finite_difference_velocities(t, x)
    demo = Demonstration(t=t, x=x, xdot=xdot, gripper=gripper, q=q)
    info = {"toggle_indices": [int(grasp_idx), int(release_idx)],
            "subgoals": subgoals, "kind": kind, "seed": seed}
    return demo, info


def make_synthetic_task(kind: str, seed: int = 0,
                        noise_sigma: float = 0.0) -> Demonstration:
    """Smooth 3-D single demonstration with two gripper toggles (K = 3)."""
    demo, _ = synthetic_task_details(kind, seed, noise_sigma)
    return demo
