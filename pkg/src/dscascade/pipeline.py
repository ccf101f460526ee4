"""End-to-end composition: segment, waypoint-compress, train, evaluate.

Per-segment training jobs are independent (each owns its tape and a seed
derived from the run seed and segment index), so they can fan out across
processes.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .data import Demonstration
from .policy import TrainingConfig, train_segment
from .segmentation import SegmentedDemo
from .waypoints import WaypointSet, reconstruct, select_waypoints_dp


def derive_segment_seed(run_seed: int, segment_index: int) -> int:
    return int(np.random.SeedSequence([run_seed, segment_index]).generate_state(1)[0])


def waypoint_segments(segmented: SegmentedDemo, eta: float) -> list[WaypointSet]:
    return [select_waypoints_dp(s, eta) for s in segmented.segments]


def training_segments(segmented: SegmentedDemo,
                      waypoint_sets: list[WaypointSet]) -> list[Demonstration]:
    """Waypoint-reconstructed segments resampled at the original timestamps.

    This is the noise-filtered training set: policies never see the raw
    samples, only the interpolation through the selected waypoints.
    """
    return [reconstruct(w, s.t) for w, s in zip(waypoint_sets, segmented.segments)]


def _train_one(args):
    segment, subgoal, cfg, kind = args
    return train_segment(segment, subgoal, cfg, kind)


def train_cascade(segmented: SegmentedDemo, eta: float, cfg: TrainingConfig,
                  kind: str = "stable", jobs: int = 1,
                  waypoint_sets: list[WaypointSet] | None = None):
    """Train one policy per segment on waypoint-filtered data.

    Returns (policies, waypoint_sets). Segment k trains with a seed derived
    from (cfg.seed, k) so runs are reproducible regardless of ``jobs``.
    """
    if waypoint_sets is None:
        waypoint_sets = waypoint_segments(segmented, eta)
    data = training_segments(segmented, waypoint_sets)
    tasks = [(data[k], segmented.subgoals[k],
              replace(cfg, seed=derive_segment_seed(cfg.seed, k)), kind)
             for k in range(segmented.k)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            policies = list(pool.map(_train_one, tasks))
    else:
        policies = [_train_one(t) for t in tasks]
    return policies, waypoint_sets
