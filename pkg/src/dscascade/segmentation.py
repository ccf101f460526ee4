"""Split a demonstration into sub-demos at gripper open/close events.

Each gripper transition marks a subgoal; the event sample belongs to the
earlier segment and is duplicated as the start of the next one, so every
policy starts from the previous goal and ends at its own. A trailing segment
to the final sample is always present so the demo's final pose is a subgoal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Demonstration, demo_to_obj, _demo_from_obj
from .errors import ValidationError


@dataclass(frozen=True)
class SegmentedDemo:
    """K sub-demos with their subgoals and event indices into the parent."""

    segments: tuple[Demonstration, ...]
    subgoals: np.ndarray           # (K, d)
    event_indices: tuple[int, ...]  # into the parent demonstration
    final_gripper_actions: tuple[int, ...]

    def __post_init__(self):
        k = len(self.segments)
        if k < 1:
            raise ValidationError("segmentation produced no segments")
        subgoals = np.asarray(self.subgoals, dtype=np.float64)
        if subgoals.shape != (k, self.segments[0].dim):
            raise ValidationError("subgoal array shape does not match segments")
        if len(self.event_indices) != k or len(self.final_gripper_actions) != k:
            raise ValidationError("per-segment metadata length mismatch")
        if any(b <= a for a, b in zip(self.event_indices, self.event_indices[1:])):
            raise ValidationError("event indices must be strictly increasing")
        subgoals.setflags(write=False)
        object.__setattr__(self, "subgoals", subgoals)
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "event_indices", tuple(int(i) for i in self.event_indices))
        object.__setattr__(self, "final_gripper_actions",
                           tuple(int(g) for g in self.final_gripper_actions))

    @property
    def k(self) -> int:
        return len(self.segments)

    @property
    def dim(self) -> int:
        return self.segments[0].dim


def gripper_transitions(gripper: np.ndarray) -> list[int]:
    """Indices i where the flag differs from sample i-1 (forward scan)."""
    g = np.asarray(gripper)
    return [int(i) for i in np.nonzero(g[1:] != g[:-1])[0] + 1]


def segment_by_gripper(demo: Demonstration, debounce_gap: int = 0) -> SegmentedDemo:
    """Segment at every gripper transition; subgoal k is the event position.

    ``debounce_gap`` > 0 merges transitions closer than that many samples
    (keeping the last), for recordings with a chattering gripper channel. It
    is off by default: every transition is an event.
    """
    n = len(demo)
    events = gripper_transitions(demo.gripper)
    if debounce_gap > 0:
        merged: list[int] = []
        for e in events:
            if merged and e - merged[-1] < debounce_gap:
                merged[-1] = e
            else:
                merged.append(e)
        events = merged
    # the final pose is always a subgoal; skip the extra segment only when the
    # last event already sits on the final sample
    bounds = list(events)
    if not bounds or bounds[-1] != n - 1:
        bounds.append(n - 1)
    segments = []
    starts = [0] + bounds[:-1]
    for a, b in zip(starts, bounds):
        segments.append(demo.slice(a, b))
    subgoals = demo.x[np.asarray(bounds)]
    actions = [int(demo.gripper[b]) for b in bounds]
    return SegmentedDemo(segments=tuple(segments), subgoals=subgoals,
                         event_indices=tuple(bounds),
                         final_gripper_actions=tuple(actions))


def as_single_segment(demo: Demonstration) -> SegmentedDemo:
    """Treat the whole demonstration as one segment (non-segmented baseline)."""
    n = len(demo)
    return SegmentedDemo(segments=(demo.slice(0, n - 1),),
                         subgoals=demo.x[-1:][:],
                         event_indices=(n - 1,),
                         final_gripper_actions=(int(demo.gripper[-1]),))


def validate_segments(seg: SegmentedDemo, min_len: int = 5) -> list[str]:
    """Warnings for suspiciously short or spatially degenerate segments."""
    warnings = []
    for k, s in enumerate(seg.segments):
        if len(s) < min_len:
            warnings.append(f"segment {k} has only {len(s)} samples (min_len={min_len})")
        lo, hi = s.bounding_box()
        if float(np.max(hi - lo)) <= 0.0:
            warnings.append(f"segment {k} has zero spatial extent")
    return warnings


def reassemble(seg: SegmentedDemo) -> Demonstration:
    """Concatenate segments back into the parent (shared boundaries dropped)."""
    t = [seg.segments[0].t]
    x = [seg.segments[0].x]
    xdot = [seg.segments[0].xdot]
    grip = [seg.segments[0].gripper]
    qs = [seg.segments[0].q] if seg.segments[0].q is not None else None
    for s in seg.segments[1:]:
        t.append(s.t[1:])
        x.append(s.x[1:])
        xdot.append(s.xdot[1:])
        grip.append(s.gripper[1:])
        if qs is not None:
            qs.append(s.q[1:])
    return Demonstration(t=np.concatenate(t), x=np.concatenate(x),
                         xdot=np.concatenate(xdot), gripper=np.concatenate(grip),
                         q=np.concatenate(qs) if qs is not None else None)


def segmented_to_obj(seg: SegmentedDemo) -> dict:
    out = {"dim": seg.dim, "segments": []}
    for k in range(seg.k):
        entry = demo_to_obj(seg.segments[k])
        entry["subgoal"] = [float(v) for v in seg.subgoals[k]]
        entry["event_index"] = int(seg.event_indices[k])
        entry["final_gripper_action"] = int(seg.final_gripper_actions[k])
        out["segments"].append(entry)
    return out


def segmented_from_obj(obj: dict) -> SegmentedDemo:
    segments = []
    subgoals = []
    events = []
    actions = []
    for entry in obj["segments"]:
        segments.append(_demo_from_obj({"dim": obj["dim"], "samples": entry["samples"]}))
        subgoals.append(entry["subgoal"])
        events.append(int(entry["event_index"]))
        actions.append(int(entry["final_gripper_action"]))
    return SegmentedDemo(segments=tuple(segments), subgoals=np.asarray(subgoals),
                         event_indices=tuple(events),
                         final_gripper_actions=tuple(actions))
