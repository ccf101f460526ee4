"""Minimal-cardinality waypoint selection with a reconstruction guarantee.

A waypoint set is feasible when the piecewise-linear, time-parameterized
interpolation through it stays within ``eta`` of every original sample. The
selector finds an exact minimizer by shortest path (edge count) on the DAG of
feasible chords, so the guarantee is uniform over the segment rather than on
average. The segment's final sample (the subgoal) is always kept exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Demonstration
from .errors import ValidationError


@dataclass(frozen=True)
class WaypointSet:
    """Ordered waypoint indices into a segment plus the realized error."""

    indices: np.ndarray          # (m,) ints, first 0, last len(segment)-1
    points: np.ndarray           # (m, d)
    times: np.ndarray            # (m,)
    eta: float
    achieved_error: float
    source_t: np.ndarray         # original segment timestamps
    source_gripper: np.ndarray   # original gripper channel
    source_q: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size < 2:
            raise ValidationError("waypoint set needs at least the two endpoints")
        if idx[0] != 0:
            raise ValidationError("first waypoint must be the segment start")
        if np.any(np.diff(idx) <= 0):
            raise ValidationError("waypoint indices must be strictly increasing")
        if self.achieved_error > self.eta:
            raise ValidationError(
                f"achieved error {self.achieved_error} exceeds eta {self.eta}")
        for name in ("points", "times", "source_t"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)


def _chord_error(x: np.ndarray, t: np.ndarray, i: int, j: int) -> float:
    """Max deviation of samples i..j from the time-parameterized chord (i, j)."""
    if j <= i + 1:
        return 0.0
    s = (t[i + 1:j] - t[i]) / (t[j] - t[i])
    proj = x[i] + s[:, None] * (x[j] - x[i])
    return float(np.max(np.linalg.norm(x[i + 1:j] - proj, axis=1)))


def reconstruction_error(segment: Demonstration, indices) -> float:
    """Max distance from any sample to its time-matched interpolation point."""
    idx = np.asarray(indices, dtype=np.int64)
    n = len(segment)
    if idx.size < 2 or idx[0] != 0 or idx[-1] != n - 1:
        raise ValidationError("indices must include both segment endpoints")
    if np.any(np.diff(idx) <= 0):
        raise ValidationError("indices must be strictly increasing")
    err = 0.0
    for a, b in zip(idx[:-1], idx[1:]):
        err = max(err, _chord_error(segment.x, segment.t, int(a), int(b)))
    return err


def select_waypoints_dp(segment: Demonstration, eta: float) -> WaypointSet:
    """Exact minimum-cardinality waypoint set with max deviation <= eta.

    Shortest path by edge count on the feasibility DAG; among minimal
    solutions the lexicographically smallest index sequence is returned. The
    worst case (nothing feasible but adjacent chords) keeps all samples.
    """
    if eta <= 0:
        raise ValidationError(f"eta must be positive, got {eta}")
    n = len(segment)
    x, t = segment.x, segment.t
    feasible = np.zeros((n, n), dtype=bool)
    for i in range(n - 1):
        feasible[i, i + 1] = True
        for j in range(i + 2, n):
            feasible[i, j] = _chord_error(x, t, i, j) <= eta
    big = n + 2
    # fewest edges from node 0, DAG relaxation in index order
    dist = np.full(n, big, dtype=np.int64)
    dist[0] = 0
    for j in range(1, n):
        src = np.nonzero(feasible[:j, j])[0]
        if src.size:
            dist[j] = dist[src].min() + 1
    # fewest edges to the terminal node, for lexicographic tie-breaking
    dist_end = np.full(n, big, dtype=np.int64)
    dist_end[n - 1] = 0
    for i in range(n - 2, -1, -1):
        dst = np.nonzero(feasible[i, i + 1:])[0] + i + 1
        if dst.size:
            dist_end[i] = dist_end[dst].min() + 1
    total = int(dist[n - 1])
    path = [0]
    cur, used = 0, 0
    while cur != n - 1:
        nxt = None
        for j in range(cur + 1, n):
            if feasible[cur, j] and used + 1 + dist_end[j] == total:
                nxt = j
                break
        if nxt is None:
            raise AssertionError("waypoint DP lost the optimal path")
        path.append(nxt)
        cur, used = nxt, used + 1
    idx = np.asarray(path, dtype=np.int64)
    achieved = reconstruction_error(segment, idx)
    return WaypointSet(indices=idx, points=x[idx], times=t[idx], eta=float(eta),
                       achieved_error=achieved, source_t=t,
                       source_gripper=segment.gripper,
                       source_q=segment.q)


def reconstruct(waypoints: WaypointSet, timestamps) -> Demonstration:
    """Piecewise-linear reconstruction sampled at the given timestamps.

    Velocities are the chord slope of the interval containing each timestamp;
    the gripper flag is copied from the nearest original sample.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        raise ValidationError("no timestamps to reconstruct at")
    wt, wp = waypoints.times, waypoints.points
    if np.any(ts < wt[0] - 1e-12) or np.any(ts > wt[-1] + 1e-12):
        raise ValidationError("timestamps outside the segment time range")
    seg_idx = np.clip(np.searchsorted(wt, ts, side="right") - 1, 0, len(wt) - 2)
    t0 = wt[seg_idx]
    t1 = wt[seg_idx + 1]
    frac = ((ts - t0) / (t1 - t0))[:, None]
    pos = wp[seg_idx] + frac * (wp[seg_idx + 1] - wp[seg_idx])
    vel = (wp[seg_idx + 1] - wp[seg_idx]) / (t1 - t0)[:, None]
    nearest = np.argmin(np.abs(waypoints.source_t[None, :] - ts[:, None]), axis=1)
    gripper = waypoints.source_gripper[nearest]
    q = waypoints.source_q[nearest] if waypoints.source_q is not None else None
    return Demonstration(t=ts, x=pos, xdot=vel, gripper=gripper, q=q)


def waypointset_to_obj(w: WaypointSet) -> dict:
    return {"indices": [int(i) for i in w.indices],
            "points": [[float(v) for v in p] for p in w.points],
            "eta": float(w.eta),
            "achieved_error": float(w.achieved_error)}


def waypointset_from_obj(obj: dict, segment: Demonstration) -> WaypointSet:
    idx = np.asarray(obj["indices"], dtype=np.int64)
    return WaypointSet(indices=idx, points=np.asarray(obj["points"]),
                       times=segment.t[idx], eta=float(obj["eta"]),
                       achieved_error=float(obj["achieved_error"]),
                       source_t=segment.t, source_gripper=segment.gripper,
                       source_q=segment.q)
