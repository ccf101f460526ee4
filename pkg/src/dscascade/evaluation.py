"""Monte-Carlo evaluation of policy cascades with Table-style reporting.

Success is assessed per subgoal (horizon-limited) and for the whole task. A
subgoal timeout triggers a reset to that subgoal's state so later subgoals
are still assessed independently, but any run containing a reset is never a
total success.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .controller import CascadeController, run_to_completion
from .errors import ConfigError
from .segmentation import SegmentedDemo
from .sim import PointMassEnv, SimConfig, condition_config


@dataclass
class RateSummary:
    per_seed: list[float]          # percent, one entry per training seed
    mean: float = 0.0
    std: float = 0.0

    def __post_init__(self):
        vals = np.asarray(self.per_seed, dtype=np.float64)
        self.mean = float(vals.mean()) if vals.size else 0.0
        self.std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0


@dataclass
class EvalReport:
    condition: str
    seeds: list[int]
    rollouts_per_seed: int
    subgoal_rates: list[RateSummary]
    total_rate: RateSummary
    runs: list[dict] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {
            "condition": self.condition,
            "seeds": self.seeds,
            "rollouts_per_seed": self.rollouts_per_seed,
            "subgoal_rates": [{"per_seed": r.per_seed, "mean": r.mean, "std": r.std}
                              for r in self.subgoal_rates],
            "total_rate": {"per_seed": self.total_rate.per_seed,
                           "mean": self.total_rate.mean, "std": self.total_rate.std},
            "runs": self.runs,
        }

    @staticmethod
    def from_obj(obj: dict) -> "EvalReport":
        return EvalReport(
            condition=obj["condition"], seeds=list(obj["seeds"]),
            rollouts_per_seed=int(obj["rollouts_per_seed"]),
            subgoal_rates=[RateSummary(per_seed=r["per_seed"])
                           for r in obj["subgoal_rates"]],
            total_rate=RateSummary(per_seed=obj["total_rate"]["per_seed"]),
            runs=list(obj["runs"]),
        )


def save_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_obj(), fh, indent=1, sort_keys=True)


def load_report(path) -> EvalReport:
    with open(path, "r", encoding="utf-8") as fh:
        return EvalReport.from_obj(json.load(fh))


def evaluate(models_by_seed: dict[int, list], segmented: SegmentedDemo,
             condition: str, seeds, rollouts_per_seed: int,
             cfg: SimConfig, delta: float = 0.008) -> EvalReport:
    """Run the full protocol: per-seed cascades, repeated noisy rollouts.

    ``models_by_seed`` maps each training seed to its list of per-segment
    policies (one per segment; a single whole-demo baseline policy may be
    replicated across segments by the caller).
    """
    seeds = [int(s) for s in seeds]
    k = segmented.k
    run_cfg = condition_config(condition, cfg)
    per_seed_subgoal = [[] for _ in range(k)]
    per_seed_total = []
    runs = []
    x0 = segmented.segments[0].x[0]
    for seed in seeds:
        policies = models_by_seed.get(seed)
        if policies is None or len(policies) != k:
            raise ConfigError(f"need {k} trained policies for seed {seed}")
        sub_hits = np.zeros(k)
        total_hits = 0
        for r in range(rollouts_per_seed):
            rng = np.random.default_rng([run_cfg.seed, seed, r])
            ctrl = CascadeController.from_segments(policies, segmented,
                                                   dt=run_cfg.dt, delta=delta)
            env = PointMassEnv(run_cfg, rng, expected_steps=ctrl.expected_steps)
            result = run_to_completion(ctrl, x0, env,
                                       horizon_per_subgoal=run_cfg.horizon_per_subgoal)
            attained = [o.attained for o in result.outcomes]
            resets = [o.reset for o in result.outcomes]
            sub_hits += np.asarray(attained, dtype=float)
            total_hits += int(result.total_success)
            runs.append({"seed": seed, "rollout": r,
                         "subgoals_attained": attained, "resets": resets,
                         "steps": [o.steps for o in result.outcomes],
                         "total_success": result.total_success})
        for i in range(k):
            per_seed_subgoal[i].append(100.0 * sub_hits[i] / rollouts_per_seed)
        per_seed_total.append(100.0 * total_hits / rollouts_per_seed)
    return EvalReport(
        condition=condition, seeds=seeds, rollouts_per_seed=rollouts_per_seed,
        subgoal_rates=[RateSummary(per_seed=v) for v in per_seed_subgoal],
        total_rate=RateSummary(per_seed=per_seed_total), runs=runs)


def reports_to_csv(labeled: list[tuple[str, EvalReport]]) -> str:
    """Table-shaped CSV: one row per subgoal plus total, one column per label."""
    if not labeled:
        raise ConfigError("no reports to export")
    k = len(labeled[0][1].subgoal_rates)
    lines = ["row," + ",".join(label for label, _ in labeled)]
    for i in range(k):
        cells = [f"{rep.subgoal_rates[i].mean:.1f}+-{rep.subgoal_rates[i].std:.1f}"
                 for _, rep in labeled]
        lines.append(f"subgoal_{i + 1}," + ",".join(cells))
    cells = [f"{rep.total_rate.mean:.1f}+-{rep.total_rate.std:.1f}"
             for _, rep in labeled]
    lines.append("total," + ",".join(cells))
    return "\n".join(lines) + "\n"
