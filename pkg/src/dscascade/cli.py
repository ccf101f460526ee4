"""Command-line pipeline: segment -> waypoints -> train -> rollout/eval.

Every command resolves its parameters (flags > config file > defaults),
writes its outputs deterministically, and drops a manifest JSON next to the
primary output recording resolved parameters and input/output checksums, so
a run can be reproduced byte-for-byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .controller import CascadeController, run_to_completion
from .data import load_demonstration, save_demonstration
from .errors import ConfigError, DscascadeError
from .evaluation import evaluate, reports_to_csv, save_report
from .pipeline import train_cascade, waypoint_segments
from .policy import (TrainingConfig, load_policy, save_policy)
from .segmentation import (as_single_segment, segment_by_gripper,
                           segmented_from_obj, segmented_to_obj,
                           validate_segments)
from .sim import CONDITIONS, PointMassEnv, SimConfig, make_synthetic_task, TASK_KINDS
from .waypoints import waypointset_from_obj, waypointset_to_obj


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))


def write_manifest(primary_output, command: str, params: dict,
                   inputs: list, outputs: list) -> str:
    manifest = {
        "version": __version__,
        "command": command,
        "params": {k: v for k, v in sorted(params.items())},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path = str(primary_output) + ".manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    return obj


def _resolve(args: argparse.Namespace, keys: list[str]) -> dict:
    """Merge precedence: explicit flags > config file entries > defaults."""
    cfg_file = _load_config_file(getattr(args, "config", None))
    resolved = {}
    for key in keys:
        flag_val = getattr(args, key)
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in cfg_file:
            resolved[key] = cfg_file[key]
        else:
            resolved[key] = None
    return resolved


def _parse_seeds(text) -> list[int]:
    return [int(s) for s in str(text).split(",") if s != ""]


# ---------------------------------------------------------------------------
# artifact files

def save_waypoints_artifact(path, segmented, wp_sets, eta: float) -> None:
    obj = segmented_to_obj(segmented)
    obj["eta"] = float(eta)
    obj["waypoints"] = [waypointset_to_obj(w) for w in wp_sets]
    _dump_json(obj, path)


def load_waypoints_artifact(path):
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    segmented = segmented_from_obj(obj)
    wp_sets = [waypointset_from_obj(w, s)
               for w, s in zip(obj["waypoints"], segmented.segments)]
    return segmented, wp_sets, float(obj["eta"])


def _models_dir_for_seed(root, seed: int) -> str:
    return os.path.join(root, f"seed_{seed}")


def save_models(policies, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, pol in enumerate(policies):
        path = os.path.join(out_dir, f"segment_{k:02d}.json")
        save_policy(pol, path)
        paths.append(path)
    return paths


def load_models(models_dir) -> list:
    if not os.path.isdir(models_dir):
        raise ConfigError(f"models directory not found: {models_dir}")
    names = sorted(n for n in os.listdir(models_dir)
                   if n.startswith("segment_") and n.endswith(".json")
                   and ".manifest." not in n)
    if not names:
        raise ConfigError(f"no segment_*.json models found in {models_dir}")
    return [load_policy(os.path.join(models_dir, n)) for n in names]


# ---------------------------------------------------------------------------
# subcommands

def cmd_segment(args) -> int:
    params = _resolve(args, ["min_len"])
    min_len = int(params["min_len"] if params["min_len"] is not None else 5)
    demo = load_demonstration(args.infile)
    seg = as_single_segment(demo) if args.whole else segment_by_gripper(demo)
    for warning in validate_segments(seg, min_len=min_len):
        print(f"warning: {warning}", file=sys.stderr)
    _dump_json(segmented_to_obj(seg), args.out)
    write_manifest(args.out, "segment",
                   {"in": str(args.infile), "out": str(args.out),
                    "min_len": min_len, "whole": bool(args.whole)},
                   [args.infile], [args.out])
    print(f"wrote {seg.k} segments to {args.out}")
    return 0


def cmd_waypoints(args) -> int:
    params = _resolve(args, ["eta"])
    eta = float(params["eta"] if params["eta"] is not None else 0.01)
    with open(args.infile, "r", encoding="utf-8") as fh:
        seg = segmented_from_obj(json.load(fh))
    wp_sets = waypoint_segments(seg, eta)
    save_waypoints_artifact(args.out, seg, wp_sets, eta)
    write_manifest(args.out, "waypoints",
                   {"in": str(args.infile), "out": str(args.out), "eta": eta},
                   [args.infile], [args.out])
    total = sum(len(w) for w in wp_sets)
    print(f"selected {total} waypoints across {seg.k} segments "
          f"(errors: {[round(w.achieved_error, 5) for w in wp_sets]})")
    return 0


_TRAIN_KEYS = ["kind", "gamma", "epochs", "lr", "window", "batch", "alpha",
               "epsilon", "hidden", "jobs", "recovery_radius"]


def _training_config(params: dict, seed: int) -> TrainingConfig:
    defaults = TrainingConfig(seed=seed)
    return TrainingConfig(
        gamma=float(params["gamma"]) if params["gamma"] is not None else
        (1.0 if params["kind"] == "bc" else defaults.gamma),
        epochs=int(params["epochs"]) if params["epochs"] is not None else defaults.epochs,
        lr=float(params["lr"]) if params["lr"] is not None else defaults.lr,
        rollout_window=int(params["window"]) if params["window"] is not None
        else defaults.rollout_window,
        batch=int(params["batch"]) if params["batch"] is not None else defaults.batch,
        alpha=float(params["alpha"]) if params["alpha"] is not None else defaults.alpha,
        epsilon=float(params["epsilon"]) if params["epsilon"] is not None
        else defaults.epsilon,
        hidden=int(params["hidden"]) if params["hidden"] is not None else defaults.hidden,
        recovery_radius=float(params["recovery_radius"])
        if params["recovery_radius"] is not None else defaults.recovery_radius,
        seed=seed,
    )


def cmd_train(args) -> int:
    params = _resolve(args, _TRAIN_KEYS)
    params["kind"] = params["kind"] or "stable"
    if params["kind"] not in ("stable", "bc"):
        raise ConfigError(f"--kind must be stable or bc, got {params['kind']}")
    jobs = int(params["jobs"] or 1)
    seed = int(args.seed)
    segmented, wp_sets, eta = load_waypoints_artifact(args.segments)
    cfg = _training_config(params, seed)
    if args.whole and segmented.k > 1:
        raise ConfigError("--whole expects a single-segment artifact "
                          "(run `segment --whole` first)")
    policies, _ = train_cascade(segmented, eta, cfg, params["kind"], jobs=jobs,
                                waypoint_sets=wp_sets)
    out_dir = _models_dir_for_seed(args.out, seed)
    paths = save_models(policies, out_dir)
    write_manifest(paths[0], "train",
                   {**{k: params[k] for k in _TRAIN_KEYS}, "seed": seed,
                    "segments": str(args.segments), "out": str(args.out)},
                   [args.segments], paths)
    losses = [p.train_log["final_loss"] for p in policies]
    print(f"trained {len(policies)} {params['kind']} policies (seed {seed}) "
          f"-> {out_dir}; final losses {[f'{v:.2e}' for v in losses]}")
    return 0


def cmd_rollout(args) -> int:
    segmented, _, _ = load_waypoints_artifact(args.segments)
    policies = load_models(args.models)
    if len(policies) == 1 and segmented.k > 1:
        policies = policies * segmented.k
    cfg = SimConfig(dt=float(args.dt), noise_sigma=float(args.noise),
                    perturb_count=int(args.perturb),
                    horizon_per_subgoal=int(args.horizon), seed=int(args.seed))
    if args.start is not None:
        x0 = np.asarray([float(v) for v in args.start.split(",")])
    else:
        x0 = segmented.segments[0].x[0]
    ctrl = CascadeController.from_segments(policies, segmented, dt=cfg.dt,
                                           delta=float(args.delta))
    rng = np.random.default_rng([cfg.seed, 0, 0])
    env = PointMassEnv(cfg, rng, expected_steps=ctrl.expected_steps)
    result = run_to_completion(ctrl, x0, env, cfg.horizon_per_subgoal, record=True)
    d = segmented.dim
    with open(args.out, "w", encoding="utf-8") as fh:
        header = (["t"] + [f"x{i}" for i in range(d)]
                  + [f"xdot{i}" for i in range(d)]
                  + ["gripper", "qw", "qx", "qy", "qz", "active_segment"])
        fh.write(",".join(header) + "\n")
        for row in result.trajectory:
            cells = [repr(float(row["t"]))]
            cells += [repr(float(v)) for v in row["x"]]
            cells += [repr(float(v)) for v in row["velocity"]]
            cells.append(str(int(row["gripper"])))
            if row["q"] is not None:
                cells += [repr(float(v)) for v in row["q"]]
            else:
                cells += ["nan"] * 4
            cells.append(str(int(row["active_segment"])))
            fh.write(",".join(cells) + "\n")
    write_manifest(args.out, "rollout",
                   {"models": str(args.models), "segments": str(args.segments),
                    "noise": float(args.noise), "perturb": int(args.perturb),
                    "seed": int(args.seed), "delta": float(args.delta),
                    "dt": float(args.dt), "horizon": int(args.horizon),
                    "start": args.start},
                   [args.segments], [args.out])
    ok = result.total_success
    print(f"rollout {'succeeded' if ok else 'failed'}; outcomes "
          f"{[o.attained for o in result.outcomes]} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    segmented, _, _ = load_waypoints_artifact(args.task)
    seeds = _parse_seeds(args.seeds)
    models_by_seed = {}
    for seed in seeds:
        policies = load_models(_models_dir_for_seed(args.models_dir, seed))
        if len(policies) == 1 and segmented.k > 1:
            policies = policies * segmented.k
        models_by_seed[seed] = policies
    cfg = SimConfig(dt=float(args.dt), horizon_per_subgoal=int(args.horizon),
                    perturb_magnitude=float(args.perturb_magnitude),
                    perturb_count=int(args.perturb_count), seed=int(args.sim_seed))
    report = evaluate(models_by_seed, segmented, args.condition, seeds,
                      int(args.rollouts), cfg, delta=float(args.delta))
    save_report(report, args.out)
    outputs = [args.out]
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(reports_to_csv([(args.condition, report)]))
        outputs.append(args.csv)
    write_manifest(args.out, "eval",
                   {"models_dir": str(args.models_dir), "task": str(args.task),
                    "condition": args.condition, "seeds": seeds,
                    "rollouts": int(args.rollouts), "delta": float(args.delta),
                    "horizon": int(args.horizon), "dt": float(args.dt),
                    "sim_seed": int(args.sim_seed)},
                   [args.task], outputs)
    print(f"{args.condition}: total {report.total_rate.mean:.1f} "
          f"+- {report.total_rate.std:.1f} % "
          f"(per-subgoal {[round(r.mean, 1) for r in report.subgoal_rates]})")
    return 0


def cmd_export_field(args) -> int:
    policy = load_policy(args.model)
    if policy.kind != "stable":
        raise ConfigError("export-field requires a stable model (it plots the "
                          "energy landscape)")
    axes = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}.get(args.plane)
    if axes is None:
        raise ConfigError(f"--plane must be xy, xz or yz, got {args.plane}")
    if max(axes) >= policy.d:
        raise ConfigError(f"plane {args.plane} is out of range for d={policy.d}")
    n = int(args.grid)
    extent = float(args.extent)
    lin = np.linspace(-extent, extent, n)
    a_grid, b_grid = np.meshgrid(lin, lin, indexing="ij")
    pts = np.zeros((n * n, policy.d))
    pts[:, axes[0]] = a_grid.ravel()
    pts[:, axes[1]] = b_grid.ravel()
    vel = policy.velocity_rows(pts)
    vals = policy.lyapunov_rows(pts)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(f"{args.plane[0]},{args.plane[1]},v{args.plane[0]},"
                 f"v{args.plane[1]},lyapunov\n")
        for i in range(n * n):
            cells = (pts[i, axes[0]], pts[i, axes[1]],
                     vel[i, axes[0]], vel[i, axes[1]], vals[i])
            fh.write(",".join(repr(float(c)) for c in cells) + "\n")
    write_manifest(args.out, "export-field",
                   {"model": str(args.model), "plane": args.plane,
                    "grid": n, "extent": extent},
                   [args.model], [args.out])
    print(f"wrote {n}x{n} field grid to {args.out}")
    return 0


def cmd_pipeline(args) -> int:
    params = _resolve(args, _TRAIN_KEYS + ["eta", "rollouts", "delta"])
    params["kind"] = params["kind"] or "stable"
    eta = float(params["eta"] if params["eta"] is not None else 0.01)
    rollouts = int(params["rollouts"] if params["rollouts"] is not None else 10)
    delta = float(params["delta"] if params["delta"] is not None else 0.008)
    jobs = int(params["jobs"] or 1)
    seeds = _parse_seeds(args.seeds)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    if args.demo is not None:
        demo = load_demonstration(args.demo)
        demo_path = str(args.demo)
    else:
        demo = make_synthetic_task(args.task, seed=0)
        demo_path = os.path.join(out_dir, "demo.json")
        save_demonstration(demo, demo_path)
    seg = as_single_segment(demo) if args.whole else segment_by_gripper(demo)
    seg_path = os.path.join(out_dir, "segments.json")
    _dump_json(segmented_to_obj(seg), seg_path)
    wp_sets = waypoint_segments(seg, eta)
    wp_path = os.path.join(out_dir, "waypoints.json")
    save_waypoints_artifact(wp_path, seg, wp_sets, eta)
    models_by_seed = {}
    for seed in seeds:
        cfg = _training_config(params, seed)
        policies, _ = train_cascade(seg, eta, cfg, params["kind"], jobs=jobs,
                                    waypoint_sets=wp_sets)
        save_models(policies, _models_dir_for_seed(os.path.join(out_dir, "models"),
                                                   seed))
        models_by_seed[seed] = policies
        print(f"seed {seed}: trained {len(policies)} {params['kind']} policies")
    sim_cfg = SimConfig(horizon_per_subgoal=int(args.horizon))
    report = evaluate(models_by_seed, seg, args.condition, seeds, rollouts,
                      sim_cfg, delta=delta)
    report_path = os.path.join(out_dir, "report.json")
    save_report(report, report_path)
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(reports_to_csv([(f"{args.condition}/{params['kind']}", report)]))
    write_manifest(report_path, "pipeline",
                   {**{k: params[k] for k in _TRAIN_KEYS},
                    "eta": eta, "rollouts": rollouts, "delta": delta,
                    "demo": demo_path, "condition": args.condition,
                    "seeds": seeds, "task": args.task, "whole": bool(args.whole),
                    "horizon": int(args.horizon)},
                   [demo_path],
                   [seg_path, wp_path, report_path, csv_path])
    print(f"{args.condition}: total {report.total_rate.mean:.1f} "
          f"+- {report.total_rate.std:.1f} % -> {report_path}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dscascade",
        description="Learn and evaluate cascades of stable dynamical-system "
                    "policies from a single demonstration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="split a demonstration at gripper events")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-len", dest="min_len", type=int, default=None)
    p.add_argument("--whole", action="store_true",
                   help="treat the whole demo as one segment (baseline)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("waypoints", help="select minimal waypoints per segment")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_waypoints)

    p = sub.add_parser("train", help="train per-segment policies")
    p.add_argument("--segments", required=True, help="waypoints artifact")
    p.add_argument("--kind", choices=["stable", "bc"], default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--recovery-radius", dest="recovery_radius", type=float,
                   default=None)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--whole", action="store_true")
    p.add_argument("--out", required=True, help="models root directory")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="run the cascade once and export CSV")
    p.add_argument("--models", required=True, help="one seed's models directory")
    p.add_argument("--segments", required=True)
    p.add_argument("--start", default=None, help="comma-separated start position")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--perturb", type=int, default=0)
    p.add_argument("--horizon", type=int, default=1000)
    p.add_argument("--delta", type=float, default=0.008)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="Monte-Carlo success-rate evaluation")
    p.add_argument("--models-dir", dest="models_dir", required=True)
    p.add_argument("--task", required=True, help="waypoints artifact")
    p.add_argument("--condition", choices=list(CONDITIONS), required=True)
    p.add_argument("--seeds", required=True, help="comma-separated training seeds")
    p.add_argument("--rollouts", type=int, default=10)
    p.add_argument("--delta", type=float, default=0.008)
    p.add_argument("--horizon", type=int, default=1000)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--sim-seed", dest="sim_seed", type=int, default=0)
    p.add_argument("--perturb-count", dest="perturb_count", type=int, default=1)
    p.add_argument("--perturb-magnitude", dest="perturb_magnitude", type=float,
                   default=0.05)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-field",
                       help="vector-field + energy grid for streamplots")
    p.add_argument("--model", required=True)
    p.add_argument("--plane", default="xy")
    p.add_argument("--grid", type=int, default=40)
    p.add_argument("--extent", type=float, default=1.2,
                   help="half-width of the goal-frame grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_field)

    p = sub.add_parser("pipeline", help="demo -> report in one command")
    p.add_argument("--demo", default=None, help="demonstration JSON; omit to "
                   "generate --task synthetically")
    p.add_argument("--task", choices=list(TASK_KINDS), default="pick-place-3seg")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--kind", choices=["stable", "bc"], default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--recovery-radius", dest="recovery_radius", type=float,
                   default=None)
    p.add_argument("--seeds", required=True)
    p.add_argument("--condition", choices=list(CONDITIONS), default="noisy")
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--horizon", type=int, default=1000)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--whole", action="store_true")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DscascadeError, OSError) as exc:
        print(f"{args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
