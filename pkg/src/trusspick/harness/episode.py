"""Perceive, select, plan and execute one harvest attempt on a synthetic scene."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from trusspick.clustering import BBox, ClusterParams
from trusspick.errors import DomainError, PlanInfeasible, PoseIncompleteError
from trusspick.geometry import PointCloud
from trusspick.harness.scene import SceneParams, SyntheticScene, generate_scene
from trusspick.phenotyping import TRUSS, Detection, MaturityStage, TrussPhenotype, phenotype_trusses
from trusspick.planning import (
    CONTINUOUS,
    EffectorModel,
    Event,
    FailureReason,
    FilterPolicy,
    HarvestMachine,
    HarvestPhase,
    Phase,
    TargetFeature,
    Trajectory,
    Workspace,
    check_collision,
    filter_targets,
    fruits_enveloped,
    plan_collision_free,
)
from trusspick.pose import PedicelKeypointSet, classify_orientation


@dataclass(frozen=True)
class NoiseModel:
    keypoint_sigma: float = 0.0
    depth_sigma: float = 0.0
    maturity_flip_prob: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.keypoint_sigma < 0 or self.depth_sigma < 0:
            raise DomainError("noise sigmas must be non-negative")
        if not 0.0 <= self.maturity_flip_prob <= 1.0:
            raise DomainError("maturity_flip_prob must be a probability")

    @classmethod
    def from_dict(cls, data: Mapping) -> "NoiseModel":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"noise model: unknown field {sorted(unknown)[0]!r}")
        return cls(**{k: (int(v) if k == "rng_seed" else float(v)) for k, v in data.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TimeModel:
    """Simulated arm timing: fixed seconds per phase plus travel at constant speed."""

    position_s: float = 6.0
    wrap_s: float = 5.0
    approach_s: float = 3.0
    cut_s: float = 6.0
    travel_speed: float = 0.05


@dataclass(frozen=True)
class EpisodeConfig:
    effector: EffectorModel = EffectorModel()
    workspace: Workspace = Workspace()
    clustering: ClusterParams = ClusterParams()
    timing: TimeModel = TimeModel()
    plan_clearance: float = 0.005
    shift_step: float = 0.01
    shift_iters: int = 10
    association_min: float = 0.5


@dataclass
class EpisodeRecord:
    truss_id: int
    pose_class: str
    attempted: bool = True
    sp_identified: bool | None = None
    wrapped: bool | None = None
    detached: bool | None = None
    harvested: bool | None = None
    failure_reason: str | None = None
    time_used: float | None = None
    attempts: int = 0
    final_state: str = "idle"

    def __post_init__(self) -> None:
        if self.harvested and not (self.wrapped and self.detached):
            raise DomainError(f"truss {self.truss_id}: harvested requires wrapped and detached")
        if self.wrapped is False and self.detached is not None:
            raise DomainError(f"truss {self.truss_id}: detach is undefined when wrapping failed")

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["time_used"] is not None:
            out["time_used"] = round(out["time_used"], 6)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "EpisodeRecord":
        known = {f.name for f in fields(cls)}
        for key in ("truss_id", "pose_class"):
            if key not in data:
                raise DomainError(f"episode record: missing field {key!r}")
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"episode record: unknown field {sorted(unknown)[0]!r}")
        return cls(**dict(data))


def load_records(path) -> list[EpisodeRecord]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, Mapping):
        data = data.get("records", [])
    out = []
    for k, item in enumerate(data):
        try:
            out.append(EpisodeRecord.from_dict(item))
        except (DomainError, TypeError) as exc:
            raise DomainError(f"{path}: record {k}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Perception
# ---------------------------------------------------------------------------


@dataclass
class Perception:
    phenotypes: dict[int, TrussPhenotype]
    poses: dict[int, PedicelKeypointSet]
    truss_boxes: dict[int, BBox]
    unassigned: list[int] = field(default_factory=list)


def _noisy_cloud(cloud: PointCloud, sigma: float, rng: np.random.Generator) -> PointCloud:
    dz = sigma * rng.standard_normal(len(cloud))
    if sigma == 0.0:
        return cloud
    z = cloud.points[:, 2]
    scale = np.maximum(z + dz, 1e-3) / z
    return PointCloud(cloud.points * scale[:, None], cloud.pixel_map)


def _flip(detections: Sequence[Detection], p: float, rng: np.random.Generator) -> list[Detection]:
    draws = rng.random(len(detections))
    other = rng.integers(1, 4, len(detections))
    out = []
    for d, u, k in zip(detections, draws, other):
        if d.maturity is not None and u < p:
            d = Detection(d.id, d.cls, d.bbox, d.confidence, MaturityStage((int(d.maturity) + int(k)) % 4))
        out.append(d)
    return out


def perceive(scene: SyntheticScene, noise: NoiseModel, rng: np.random.Generator, config: EpisodeConfig) -> Perception:
    """Run the perception stack on a noisy view of ``scene``.

    Noise streams are always drawn, whatever their scale, so episodes that
    differ only in noise magnitude see the same underlying random numbers.
    """
    K = scene.camera
    cloud = _noisy_cloud(scene.cloud, noise.depth_sigma, rng)
    detections = _flip(scene.detections, noise.maturity_flip_prob, rng)
    kp_noise = {tr.truss_id: noise.keypoint_sigma * rng.standard_normal((7, 3)) for tr in scene.trusses}

    poses, boxes = {}, {}
    for truss in (d for d in detections if d.cls == TRUSS):
        tr = next(t for t in scene.trusses if t.truss_id == truss.id)
        poses[truss.id] = PedicelKeypointSet.full(tr.keypoints + kp_noise[tr.truss_id], object_scale=truss.bbox.area)
        boxes[truss.id] = truss.bbox
    phenotypes, assoc = phenotype_trusses(
        detections,
        cloud,
        K,
        config.clustering,
        config.association_min,
        end_points={t: p.point("EP") for t, p in poses.items()},
        depth_at_surface=True,
    )
    return Perception(phenotypes, poses, boxes, sorted(assoc.unassigned))


def target_feature(perception: Perception, truss_id: int, config: EpisodeConfig) -> TargetFeature | None:
    ph = perception.phenotypes.get(truss_id)
    if ph is None:
        return None
    pose = perception.poses[truss_id]
    return TargetFeature(
        truss_id=truss_id,
        overall_ripe=ph.overall_ripe,
        orientation=classify_orientation(pose, ph.fruit_centroid),
        reachable=config.workspace.contains(pose.point("SP")),
        fruit_count=ph.fruit_count,
        median_volume=ph.median_volume,
        pose=pose,
    )


# ---------------------------------------------------------------------------
# Execution against ground truth
# ---------------------------------------------------------------------------


def _phase_length(traj: Trajectory, phase: Phase) -> float:
    idx = traj.indices(phase)
    if not idx:
        return 0.0
    lo = max(idx[0] - 1, 0)
    seg = traj.points[lo : idx[-1] + 1]
    return float(np.linalg.norm(np.diff(seg, axis=0), axis=1).sum())


@dataclass
class _Attempt:
    state_str: str
    sp_identified: bool
    wrapped: bool
    detached: bool | None
    reason: FailureReason | None
    time: float


def _execute(
    scene: SyntheticScene, truss_index: int, feature: TargetFeature, perception: Perception, config: EpisodeConfig
) -> _Attempt:
    truth = scene.trusses[truss_index]
    eff, timing = config.effector, config.timing
    machine = HarvestMachine(eff)
    true_sp = truth.keypoints[0]
    sp_ok = float(np.linalg.norm(feature.pose.point("SP") - true_sp)) <= eff.slot_tolerance
    spheres_est = list(perception.phenotypes[feature.truss_id].fruit_spheres.values())
    elapsed = 0.0

    def fail(reason: FailureReason, wrapped: bool) -> _Attempt:
        machine.fire(Event("fail", reason=reason))
        return _Attempt(str(machine.state), sp_ok, wrapped, None, reason, elapsed)

    machine.fire("start")
    elapsed += timing.position_s
    try:
        traj = plan_collision_free(
            feature.pose,
            spheres_est,
            eff,
            clearance=config.plan_clearance,
            step=config.shift_step,
            max_iters=config.shift_iters,
        )
    except PlanInfeasible:
        return fail(FailureReason.EFFECTOR_LIMIT, False)
    except PoseIncompleteError:
        return fail(FailureReason.POSE_ERROR, False)

    hit = check_collision(traj, truth.spheres, eff, clearance=0.0)
    hit_phase = traj.phases[hit.waypoint] if hit is not None else None

    elapsed += _phase_length(traj, Phase.POSITION) / timing.travel_speed
    if hit_phase is Phase.POSITION:
        return fail(FailureReason.COLLISION_DISPLACEMENT, False)
    machine.fire("positioned")
    elapsed += timing.wrap_s + _phase_length(traj, Phase.WRAP) / timing.travel_speed
    if hit_phase is Phase.WRAP:
        return fail(FailureReason.COLLISION_DISPLACEMENT, False)
    machine.fire("wrapped")
    elapsed += timing.approach_s + _phase_length(traj, Phase.APPROACH_SP) / timing.travel_speed
    if hit_phase is not None:
        return fail(FailureReason.COLLISION_DISPLACEMENT, False)
    if not fruits_enveloped(traj.points[-1], truth.spheres, eff):
        return fail(FailureReason.POSE_ERROR, False)
    machine.fire("reached_sp")
    elapsed += timing.cut_s
    offset = float(np.linalg.norm(traj.cut_point - true_sp))
    machine.fire(Event("cut", sp_offset=offset))
    severed = machine.state.phase is HarvestPhase.SEVERED
    return _Attempt(str(machine.state), sp_ok, True, severed, machine.state.reason, elapsed)


def run_episode(
    scene: SyntheticScene,
    truss_index: int = 0,
    noise: NoiseModel = NoiseModel(),
    policy: FilterPolicy = CONTINUOUS,
    attempt_limit: int | None = None,
    config: EpisodeConfig = EpisodeConfig(),
) -> EpisodeRecord:
    """Simulate harvesting one truss of ``scene``.

    The first perception decides whether the target is taken at all.  Each
    failed attempt is retried with fresh perception noise until
    ``attempt_limit`` (default: the policy's) is used up.  The record keeps
    the last attempt's stage outcomes and the total simulated time.
    """
    limit = policy.attempt_limit if attempt_limit is None else attempt_limit
    if limit < 1:
        raise DomainError("attempt_limit must be at least 1")
    truth = scene.trusses[truss_index]
    record = EpisodeRecord(truss_id=truth.truss_id, pose_class=truth.orientation.value)

    total = 0.0
    result = None
    for attempt in range(limit):
        rng = np.random.default_rng([noise.rng_seed, scene.rng_seed, truss_index, attempt])
        perception = perceive(scene, noise, rng, config)
        feature = target_feature(perception, truth.truss_id, config)
        if attempt == 0:
            if feature is None:
                record.attempted = False
                record.failure_reason = "filtered:no_fruit"
                return record
            _, rejected = filter_targets([feature], policy)
            if rejected:
                record.attempted = False
                record.failure_reason = f"filtered:{rejected[0].reason}"
                return record
        elif feature is None:
            break
        result = _execute(scene, truss_index, feature, perception, config)
        total += result.time
        record.attempts = attempt + 1
        if result.detached:
            break

    record.sp_identified = result.sp_identified
    record.wrapped = result.wrapped
    record.detached = result.detached
    record.harvested = bool(result.wrapped and result.detached)
    record.failure_reason = None if result.reason is None else result.reason.value
    record.time_used = total
    record.final_state = result.state_str
    return record


def simulate(
    seed: int,
    episodes: int,
    noise: NoiseModel | None = None,
    policy: FilterPolicy = CONTINUOUS,
    params: SceneParams = SceneParams(),
    config: EpisodeConfig = EpisodeConfig(),
) -> list[EpisodeRecord]:
    """One fresh scene per episode; the target is always truss 0."""
    if episodes < 1:
        raise DomainError("need at least one episode")
    noise = NoiseModel(rng_seed=seed) if noise is None else noise
    records = []
    for i in range(episodes):
        scene = generate_scene(scene_seed(seed, i), params)
        records.append(run_episode(scene, 0, noise, policy, None, config))
    return records


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def harvest_rate(records: Sequence[EpisodeRecord]) -> float:
    """Harvested fraction over all episodes, filtered targets counting as misses."""
    if not records:
        raise DomainError("no records")
    return sum(bool(r.harvested) for r in records) / len(records)

