"""``trusspick`` command line: phenotyping, pose evaluation, planning, simulation, reports.

Exit codes: 0 on success, 1 for domain errors and malformed input (message
on stderr), 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from trusspick.clustering import ClusterParams
from trusspick.errors import DomainError, PlanInfeasible
from trusspick.geometry import load_cloud, load_intrinsics
from trusspick.harness.episode import EpisodeConfig, NoiseModel, load_records, simulate
from trusspick.harness.report import RENDERERS, aggregate_report, render_markdown
from trusspick.harness.scene import SceneParams
from trusspick.phenotyping import Detection, FruitSphere, grade_quality, phenotype_trusses
from trusspick.planning import POLICIES, EffectorModel, FilterPolicy, plan_collision_free
from trusspick.pose import (
    N_KEYPOINTS,
    PedicelKeypointSet,
    accuracy_at,
    adjust_sigmas,
    estimate_sigmas,
    load_keypoint_sets,
    oks,
)


def _read_json(path: str | Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise DomainError(f"{path}: {exc.strerror}") from None


def _items(path, data, what: str) -> list:
    if isinstance(data, dict):
        data = data.get(what)
    if not isinstance(data, list):
        raise DomainError(f"{path}: expected a list of {what}")
    return data


def _parse_each(path, items, parse) -> list:
    out = []
    for k, item in enumerate(items):
        try:
            out.append(parse(item))
        except (DomainError, KeyError, TypeError, ValueError) as exc:
            raise DomainError(f"{path}: entry {k}: {exc}") from None
    return out


def _vector(path, n: int = N_KEYPOINTS) -> np.ndarray:
    data = _read_json(path)
    if not isinstance(data, list) or len(data) != n:
        raise DomainError(f"{path}: expected a JSON array of {n} numbers")
    try:
        return np.array([float(x) for x in data])
    except (TypeError, ValueError):
        raise DomainError(f"{path}: expected a JSON array of {n} numbers") from None


def _dataclass(cls, path):
    data = _read_json(path)
    if not isinstance(data, dict):
        raise DomainError(f"{path}: expected a JSON object")
    try:
        return cls(**data)
    except TypeError as exc:
        raise DomainError(f"{path}: {exc}") from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_phenotype(args) -> str:
    K = load_intrinsics(args.intrinsics)
    cloud = load_cloud(args.cloud)
    cloud.check_pixels(K)
    dets = _parse_each(args.detections, _items(args.detections, _read_json(args.detections), "detections"), Detection.from_dict)
    end_points = None
    if args.keypoints:
        raw = _items(args.keypoints, _read_json(args.keypoints), "keypoints")
        end_points = {}
        for k, item in enumerate(raw):
            if "truss_id" not in item:
                raise DomainError(f"{args.keypoints}: entry {k}: missing field 'truss_id'")
            pose = _parse_each(args.keypoints, [item], PedicelKeypointSet.from_dict)[0]
            if pose.dim != 3:
                raise DomainError(f"{args.keypoints}: entry {k}: keypoints must be 3D")
            end_points[int(item["truss_id"])] = pose.point("EP")
    params = ClusterParams(eps=args.eps, min_pts=args.min_pts)
    phenotypes, assoc = phenotype_trusses(dets, cloud, K, params, args.iou_min, end_points, args.surface_depth)
    trusses = []
    for tid, ph in phenotypes.items():
        rec = ph.to_dict()
        rec["median_volume"] = ph.median_volume
        rec["grade"] = grade_quality(ph)
        trusses.append(rec)
    return _dump({"trusses": trusses, "unassigned": assoc.unassigned, "unreached": assoc.unreached})


def cmd_pose_eval(args) -> str:
    preds = load_keypoint_sets(args.pred)
    gts = load_keypoint_sets(args.gt)
    sigmas = _vector(args.sigmas)
    scores = [oks(p, g, sigmas) for p, g in zip(preds, gts)]
    acc = accuracy_at(preds, gts, sigmas, args.threshold)
    return _dump({"threshold": args.threshold, "accuracy": acc, "count": len(scores), "oks": scores})


def cmd_sigmas(args) -> str:
    expert = load_keypoint_sets(args.expert)
    annotators = [load_keypoint_sets(p) for p in args.annotator]
    est = estimate_sigmas(annotators, expert, args.min_samples)
    out: dict[str, Any] = {
        "sigmas": [None if np.isnan(v) else float(v) for v in est.values],
        "sample_counts": [int(c) for c in est.sample_counts],
        "unestimable": list(est.unestimable),
    }
    if args.default is not None or not est.unestimable:
        filled = est.filled(args.default if args.default is not None else np.nan)
        out["sigmas_filled"] = [float(v) for v in filled]
        if args.multipliers:
            out["adjusted"] = [float(v) for v in adjust_sigmas(filled, _vector(args.multipliers))]
    elif args.multipliers:
        raise DomainError(f"slots {', '.join(est.unestimable)} are unestimable; pass --default to adjust")
    return _dump(out)


def cmd_plan(args) -> str:
    poses = load_keypoint_sets(args.pose)
    if len(poses) != 1 or poses[0].dim != 3:
        raise DomainError(f"{args.pose}: expected one 3D keypoint set")
    spheres = _parse_each(args.spheres, _items(args.spheres, _read_json(args.spheres), "spheres"), FruitSphere.from_dict)
    effector = _dataclass(EffectorModel, args.effector) if args.effector else EffectorModel()
    traj = plan_collision_free(
        poses[0], spheres, effector, clearance=args.clearance, step=args.step, max_iters=args.max_iters, max_step=args.max_step
    )
    return _dump({"waypoints": traj.to_records()})


def _policy(arg: str) -> FilterPolicy:
    if arg in POLICIES:
        return POLICIES[arg]
    data = _read_json(arg)
    if not isinstance(data, dict):
        raise DomainError(f"{arg}: expected a JSON object")
    try:
        return FilterPolicy.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"{arg}: {exc}") from None


def _render(records, fmt: str, detail: bool) -> str:
    report = aggregate_report(records)
    if fmt == "md":
        return render_markdown(report, detail)
    return RENDERERS[fmt](report)


def cmd_simulate(args) -> str:
    if args.episodes < 1:
        raise DomainError("--episodes must be at least 1")
    if args.noise:
        data = _read_json(args.noise)
        if not isinstance(data, dict):
            raise DomainError(f"{args.noise}: expected a JSON object")
        data.setdefault("rng_seed", args.seed)
        try:
            noise = NoiseModel.from_dict(data)
        except (TypeError, ValueError) as exc:
            raise DomainError(f"{args.noise}: {exc}") from None
    else:
        noise = NoiseModel(rng_seed=args.seed)
    records = simulate(args.seed, args.episodes, noise, _policy(args.policy), SceneParams(), EpisodeConfig())
    if args.records:
        Path(args.records).write_text(_dump({"records": [r.to_dict() for r in records]}), encoding="utf-8")
    if not any(r.attempted for r in records):
        return _dump({"attempted": 0, "episodes": len(records)}) if args.format == "json" else "no target was attempted\n"
    return _render(records, args.format, args.detail)


def cmd_report(args) -> str:
    return _render(load_records(args.records), args.format, args.detail)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trusspick", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phenotype", help="associate fruits with trusses and size them")
    p.add_argument("--detections", required=True, help="detections JSON")
    p.add_argument("--cloud", required=True, help="ASCII point cloud, 'x y z u v' per line")
    p.add_argument("--intrinsics", required=True, help="camera intrinsics JSON")
    p.add_argument("--keypoints", help="3D keypoint sets with truss_id, used to find terminal fruits")
    p.add_argument("--iou-min", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=ClusterParams.eps)
    p.add_argument("--min-pts", type=int, default=ClusterParams.min_pts)
    p.add_argument("--surface-depth", action="store_true", help="cloud depths are fruit surfaces, not centres")
    p.set_defaults(func=cmd_phenotype)

    p = sub.add_parser("pose-eval", help="OKS accuracy of predicted keypoints")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--sigmas", required=True, help="JSON array of 7 sigmas")
    p.add_argument("--threshold", type=float, default=0.75)
    p.set_defaults(func=cmd_pose_eval)

    p = sub.add_parser("sigmas", help="estimate OKS sigmas from annotator spread")
    p.add_argument("--expert", required=True)
    p.add_argument("--annotator", required=True, action="append", help="repeat once per annotator")
    p.add_argument("--multipliers", help="JSON array of 7 multipliers")
    p.add_argument("--default", type=float, help="sigma for slots with too few samples")
    p.add_argument("--min-samples", type=int, default=2)
    p.set_defaults(func=cmd_sigmas)

    p = sub.add_parser("plan", help="collision-free wrapping trajectory")
    p.add_argument("--pose", required=True, help="one 3D keypoint set")
    p.add_argument("--spheres", required=True, help="fruit spheres JSON")
    p.add_argument("--effector", help="effector JSON")
    p.add_argument("--clearance", type=float, default=0.005)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--max-step", type=float, default=0.05)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run synthetic harvest episodes and report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=15)
    p.add_argument("--noise", help="noise model JSON")
    p.add_argument("--policy", default="continuous", help="continuous, controlled or a policy JSON file")
    p.add_argument("--format", choices=sorted(RENDERERS), default="md")
    p.add_argument("--detail", action="store_true", help="add per-record rows to markdown")
    p.add_argument("--records", help="also write the episode records to this JSON file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render a report from episode records")
    p.add_argument("records", help="episode records JSON")
    p.add_argument("--format", choices=sorted(RENDERERS), default="md")
    p.add_argument("--detail", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        out = args.func(args)
    except (DomainError, PlanInfeasible) as exc:
        print(f"trusspick {args.command}: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"trusspick {args.command}: line {exc.lineno}, column {exc.colno}: {exc.msg}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"trusspick {args.command}: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 1
    except (KeyError, TypeError, ValueError) as exc:
        # malformed field contents that slipped past the loaders
        print(f"trusspick {args.command}: malformed input: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
