"""Trajectory data model, goal-frame transforms, and demonstration file I/O.

A demonstration is a timestamped sequence of end-effector positions with
velocities and a binary gripper channel, optionally carrying unit quaternions
for orientation. All containers are immutable after construction and safe to
share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSegmentError, DemoFormatError, ValidationError

QUAT_NORM_TOL = 1e-9


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class State:
    """Single sample: position, gripper flag, optional unit quaternion."""

    x: np.ndarray
    gripper: int
    q: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", _freeze(np.atleast_1d(self.x)))
        if self.x.ndim != 1 or self.x.size < 1:
            raise ValidationError(f"state position must be a vector, got shape {self.x.shape}")
        if self.gripper not in (0, 1):
            raise ValidationError(f"gripper flag must be 0 or 1, got {self.gripper}")
        if self.q is not None:
            q = _freeze(np.atleast_1d(self.q))
            if q.shape != (4,):
                raise ValidationError(f"quaternion must have 4 components, got {q.shape}")
            if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
                raise ValidationError(f"quaternion norm {np.linalg.norm(q)} not within "
                                      f"{QUAT_NORM_TOL} of 1")
            object.__setattr__(self, "q", q)

    @property
    def dim(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class Demonstration:
    """Timestamped trajectory: t (N,), x (N,d), xdot (N,d), gripper (N,).

    Timestamps are strictly increasing seconds; positions are meters. The
    quaternion channel is optional and carried opaquely.
    """

    t: np.ndarray
    x: np.ndarray
    xdot: np.ndarray
    gripper: np.ndarray
    q: np.ndarray | None = None

    def __post_init__(self):
        t = _freeze(np.atleast_1d(self.t))
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ValidationError(f"positions must be (N,d), got shape {x.shape}")
        n, d = x.shape
        if n < 2:
            raise ValidationError(f"demonstration needs at least 2 samples, got {n}")
        if d < 1:
            raise ValidationError("state dimension must be >= 1")
        if t.shape != (n,):
            raise ValidationError(f"timestamps shape {t.shape} does not match {n} samples")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        xdot = np.asarray(self.xdot, dtype=np.float64)
        if xdot.shape != (n, d):
            raise ValidationError(f"velocity shape {xdot.shape} does not match positions {(n, d)}")
        gripper = np.asarray(self.gripper)
        if gripper.shape != (n,):
            raise ValidationError(f"gripper shape {gripper.shape} does not match {n} samples")
        if not np.all(np.isin(gripper, (0, 1))):
            raise ValidationError("gripper channel must be binary (0/1)")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x)) and np.all(np.isfinite(xdot))):
            raise ValidationError("demonstration contains non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "xdot", _freeze(xdot))
        grip = np.ascontiguousarray(gripper, dtype=np.int8)
        grip.setflags(write=False)
        object.__setattr__(self, "gripper", grip)
        if self.q is not None:
            q = np.asarray(self.q, dtype=np.float64)
            if q.shape != (n, 4):
                raise ValidationError(f"quaternion channel shape {q.shape}, expected {(n, 4)}")
            norms = np.linalg.norm(q, axis=1)
            if np.any(np.abs(norms - 1.0) > QUAT_NORM_TOL):
                raise ValidationError("quaternion channel contains non-unit quaternions")
            object.__setattr__(self, "q", _freeze(q))

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def sample(self, i: int) -> State:
        q = self.q[i] if self.q is not None else None
        return State(x=self.x[i], gripper=int(self.gripper[i]), q=q)

    def median_dt(self) -> float:
        return float(np.median(np.diff(self.t)))

    def max_speed(self) -> float:
        return float(np.max(np.linalg.norm(self.xdot, axis=1)))

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x.min(axis=0), self.x.max(axis=0)

    def slice(self, start: int, stop: int) -> "Demonstration":
        """Sub-demonstration over samples [start, stop] inclusive."""
        sl = slice(start, stop + 1)
        return Demonstration(t=self.t[sl], x=self.x[sl], xdot=self.xdot[sl],
                             gripper=self.gripper[sl],
                             q=self.q[sl] if self.q is not None else None)

    def equals(self, other: "Demonstration") -> bool:
        """Bit-exact sample equality."""
        if self.dim != other.dim or len(self) != len(other):
            return False
        same = (np.array_equal(self.t, other.t) and np.array_equal(self.x, other.x)
                and np.array_equal(self.xdot, other.xdot)
                and np.array_equal(self.gripper, other.gripper))
        if (self.q is None) != (other.q is None):
            return False
        if self.q is not None:
            same = same and np.array_equal(self.q, other.q)
        return same


def finite_difference_velocities(t: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Central differences of positions over t, one-sided at the endpoints."""
    return np.gradient(np.asarray(x, dtype=np.float64),
                       np.asarray(t, dtype=np.float64), axis=0)


# ---------------------------------------------------------------------------
# file I/O

def _demo_from_obj(obj: dict) -> Demonstration:
    if not isinstance(obj, dict) or "dim" not in obj or "samples" not in obj:
        raise DemoFormatError("demonstration JSON must carry 'dim' and 'samples'")
    d = int(obj["dim"])
    samples = obj["samples"]
    if not isinstance(samples, list) or len(samples) < 2:
        raise ValidationError("demonstration needs a list of at least 2 samples")
    n = len(samples)
    t = np.empty(n)
    x = np.empty((n, d))
    xdot = np.full((n, d), np.nan)
    gripper = np.empty(n, dtype=np.int8)
    missing_v = np.zeros(n, dtype=bool)
    quats = []
    for i, s in enumerate(samples):
        try:
            t[i] = float(s["t"])
            pos = s["x"]
            if len(pos) != d:
                raise ValidationError(
                    f"sample {i} has dimension {len(pos)}, expected {d}")
            x[i] = pos
            if s.get("xdot") is None:
                missing_v[i] = True
            else:
                if len(s["xdot"]) != d:
                    raise ValidationError(
                        f"sample {i} velocity has dimension {len(s['xdot'])}, expected {d}")
                xdot[i] = s["xdot"]
            gripper[i] = int(s["gripper"])
            quats.append(s.get("q"))
        except (KeyError, TypeError) as exc:
            raise DemoFormatError(f"sample {i} is malformed: {exc}") from exc
    if np.any(missing_v):
        fd = finite_difference_velocities(t, x)
        xdot[missing_v] = fd[missing_v]
    has_q = [q is not None for q in quats]
    if any(has_q):
        if not all(has_q):
            raise ValidationError("quaternions must be present on all samples or none")
        q = np.asarray(quats, dtype=np.float64)
    else:
        q = None
    return Demonstration(t=t, x=x, xdot=xdot, gripper=gripper, q=q)


def load_demonstration(path) -> Demonstration:
    """Load and validate a demonstration JSON file.

    Velocities absent in the file are filled by central finite differences of
    the positions over the recorded timestamps.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DemoFormatError(
                f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
                f"{exc.msg}") from exc
    return _demo_from_obj(obj)


def demo_to_obj(demo: Demonstration) -> dict:
    samples = []
    for i in range(len(demo)):
        samples.append({
            "t": float(demo.t[i]),
            "x": [float(v) for v in demo.x[i]],
            "xdot": [float(v) for v in demo.xdot[i]],
            "gripper": int(demo.gripper[i]),
            "q": [float(v) for v in demo.q[i]] if demo.q is not None else None,
        })
    return {"dim": demo.dim, "samples": samples}


def save_demonstration(demo: Demonstration, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(demo_to_obj(demo), fh)


def save_csv(demo: Demonstration, path) -> None:
    """One row per sample: t,x0..x{d-1},xdot0..xdot{d-1},gripper,qw,qx,qy,qz."""
    d = demo.dim
    header = (["t"] + [f"x{i}" for i in range(d)] + [f"xdot{i}" for i in range(d)]
              + ["gripper", "qw", "qx", "qy", "qz"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(demo)):
            row = [repr(float(demo.t[i]))]
            row += [repr(float(v)) for v in demo.x[i]]
            row += [repr(float(v)) for v in demo.xdot[i]]
            row.append(str(int(demo.gripper[i])))
            if demo.q is not None:
                row += [repr(float(v)) for v in demo.q[i]]
            else:
                row += ["nan"] * 4
            fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# goal-centered frame

@dataclass(frozen=True)
class GoalFrame:
    """Affine map centering a segment's subgoal at the origin.

    Positions are scaled isotropically so the segment's bounding box has max
    extent 1; the per-axis scale vector therefore holds one repeated value.
    """

    goal: np.ndarray
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "goal", _freeze(np.atleast_1d(self.goal)))
        scale = np.atleast_1d(self.scale) if self.scale is not None \
            else np.ones_like(self.goal)
        scale = _freeze(scale)
        if scale.shape != self.goal.shape:
            raise ValidationError("frame scale and goal dimensions differ")
        if np.any(scale <= 0):
            raise ValidationError("frame scale factors must be positive")
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self) -> int:
        return self.goal.shape[0]

    def to_frame(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValidationError(f"vector dim {x.shape[-1]} != frame dim {self.dim}")
        return (x - self.goal) * self.scale

    def from_frame(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.dim:
            raise ValidationError(f"vector dim {y.shape[-1]} != frame dim {self.dim}")
        return y / self.scale + self.goal

    def velocity_to_frame(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim:
            raise ValidationError(f"vector dim {v.shape[-1]} != frame dim {self.dim}")
        return v * self.scale

    def velocity_from_frame(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.dim:
            raise ValidationError(f"vector dim {v.shape[-1]} != frame dim {self.dim}")
        return v / self.scale

    def to_obj(self) -> dict:
        return {"goal": [float(v) for v in self.goal],
                "scale": [float(v) for v in self.scale]}

    @staticmethod
    def from_obj(obj: dict) -> "GoalFrame":
        return GoalFrame(goal=np.asarray(obj["goal"]), scale=np.asarray(obj["scale"]))


def to_goal_frame(segment: Demonstration, goal: np.ndarray) -> tuple[Demonstration, GoalFrame]:
    """Center the subgoal at the origin and normalize the max box extent to 1.

    Velocities are scaled consistently with the position map (chain rule of
    the affine transform). A segment whose points are all identical cannot be
    normalized and raises DegenerateSegmentError.
    """
    goal = np.asarray(goal, dtype=np.float64)
    if goal.shape != (segment.dim,):
        raise ValidationError(f"goal dim {goal.shape} != segment dim {segment.dim}")
    lo, hi = segment.bounding_box()
    extent = float(np.max(hi - lo))
    if extent <= 0.0:
        raise DegenerateSegmentError("segment has zero spatial extent")
    scale = np.full(segment.dim, 1.0 / extent)
    frame = GoalFrame(goal=goal, scale=scale)
    framed = Demonstration(t=segment.t,
                           x=frame.to_frame(segment.x),
                           xdot=frame.velocity_to_frame(segment.xdot),
                           gripper=segment.gripper,
                           q=segment.q)
    return framed, frame


def from_goal_frame(vec: np.ndarray, frame: GoalFrame) -> np.ndarray:
    """Exact inverse of the goal-frame position map."""
    return frame.from_frame(vec)
