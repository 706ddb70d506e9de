"""Target selection, bottom-up wrap trajectories and the harvest state machine.

The end-effector is an open-topped cylinder.  A waypoint is the centre of
its top rim; the wall hangs ``height`` below it (towards +y, see
:mod:`trusspick.geometry` for the frame).  Fruits inside the bore are the
point of the motion, so only contact with the wall or rim counts as a
collision.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from trusspick.errors import DomainError, PlanInfeasible, PoseIncompleteError, ProtocolError
from trusspick.geometry import ParametricCurve, curve_normal, fit_curve
from trusspick.phenotyping import FruitSphere
from trusspick.pose import OrientationClass, PedicelKeypointSet

WRAP_KEYPOINTS = ("EP", "TQP", "MP", "QP", "FP")
REQUIRED_KEYPOINTS = ("SP",) + WRAP_KEYPOINTS


@dataclass(frozen=True)
class EffectorModel:
    inner_radius: float = 0.12
    height: float = 0.20
    blade_slot_width: float = 0.01
    approach_clearance: float = 0.02
    rotation_cut_angle: float = 90.0

    def __post_init__(self) -> None:
        for name in ("inner_radius", "height", "blade_slot_width", "approach_clearance", "rotation_cut_angle"):
            if not getattr(self, name) > 0:
                raise DomainError(f"effector {name} must be positive")
        if self.blade_slot_width >= self.inner_radius:
            raise DomainError("blade slot must be narrower than the bore radius")

    @property
    def slot_tolerance(self) -> float:
        return self.blade_slot_width / 2.0


@dataclass(frozen=True)
class Workspace:
    """Annulus-plus-height-band stand-in for the SCARA arm's reach.

    ``base`` is the arm's vertical axis position in the camera frame; reach is
    measured horizontally (x, z) from it.
    """

    base: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r_min: float = 0.25
    r_max: float = 0.95
    y_min: float = -0.45
    y_max: float = 0.35

    def horizontal_reach(self, p) -> float:
        p = np.asarray(p, dtype=float)
        return math.hypot(p[0] - self.base[0], p[2] - self.base[2])

    def contains(self, p) -> bool:
        r = self.horizontal_reach(p)
        return self.r_min <= r <= self.r_max and self.y_min <= float(p[1]) <= self.y_max


# ---------------------------------------------------------------------------
# Target selection
# ---------------------------------------------------------------------------


@dataclass
class TargetFeature:
    truss_id: int
    overall_ripe: bool
    orientation: OrientationClass
    reachable: bool
    fruit_count: int
    median_volume: float
    pose: PedicelKeypointSet


@dataclass(frozen=True)
class FilterPolicy:
    name: str = "continuous"
    rejected_orientations: frozenset = frozenset(
        {OrientationClass.LEFT, OrientationClass.BACK, OrientationClass.INWARD}
    )
    min_fruit_count: int = 1
    attempt_limit: int = 1
    arm_base: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rejected_orientations": sorted(o.value for o in self.rejected_orientations),
            "min_fruit_count": self.min_fruit_count,
            "attempt_limit": self.attempt_limit,
            "arm_base": list(self.arm_base),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FilterPolicy":
        base = POLICIES.get(data.get("name", "continuous"), CONTINUOUS)
        kwargs = {}
        if "rejected_orientations" in data:
            kwargs["rejected_orientations"] = frozenset(OrientationClass(o) for o in data["rejected_orientations"])
        for key in ("min_fruit_count", "attempt_limit"):
            if key in data:
                kwargs[key] = int(data[key])
        if "arm_base" in data:
            kwargs["arm_base"] = tuple(float(c) for c in data["arm_base"])
        if "name" in data:
            kwargs["name"] = str(data["name"])
        return replace(base, **kwargs)


# Single pass per target, as in unattended operation
CONTINUOUS = FilterPolicy()
# Operator-supervised runs: up to three tries per target
CONTROLLED = FilterPolicy(name="controlled", attempt_limit=3)
POLICIES = {"continuous": CONTINUOUS, "controlled": CONTROLLED}


@dataclass
class Rejection:
    feature: TargetFeature
    reasons: tuple[str, ...]

    @property
    def reason(self) -> str:
        return self.reasons[0]


def filter_targets(
    features: Sequence[TargetFeature], policy: FilterPolicy = CONTINUOUS
) -> tuple[list[TargetFeature], list[Rejection]]:
    """Drop unripe, badly oriented, unreachable or undersized trusses.

    Accepted targets come back nearest-SP-first (distance to the arm base).
    Each rejection lists every reason that applied, most basic first.
    """
    accepted, rejected = [], []
    base = np.asarray(policy.arm_base, dtype=float)
    for f in features:
        reasons = []
        if not f.overall_ripe:
            reasons.append("immature")
        if f.fruit_count < policy.min_fruit_count:
            reasons.append("quality")
        if f.orientation in policy.rejected_orientations:
            reasons.append("orientation")
        if not f.reachable:
            reasons.append("unreachable")
        if reasons:
            rejected.append(Rejection(f, tuple(reasons)))
        else:
            accepted.append(f)
    accepted.sort(key=lambda f: (float(np.linalg.norm(f.pose.point("SP") - base)), f.truss_id))
    return accepted, rejected


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


class Phase(enum.Enum):
    POSITION = "position"
    WRAP = "wrap"
    APPROACH_SP = "approach_sp"
    ROTATE_CUT = "rotate_cut"


_PHASE_RANK = {Phase.POSITION: 0, Phase.WRAP: 1, Phase.APPROACH_SP: 2, Phase.ROTATE_CUT: 3}


@dataclass
class Trajectory:
    points: np.ndarray
    phases: list[Phase]
    yaw_deg: np.ndarray
    curve: ParametricCurve | None = None
    cut_point: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)

    def copy(self) -> "Trajectory":
        return Trajectory(
            self.points.copy(),
            list(self.phases),
            self.yaw_deg.copy(),
            self.curve,
            None if self.cut_point is None else self.cut_point.copy(),
        )

    def phase_order_ok(self) -> bool:
        ranks = [_PHASE_RANK[p] for p in self.phases]
        if any(b < a for a, b in zip(ranks, ranks[1:])):
            return False
        present = set(self.phases)
        return {Phase.POSITION, Phase.APPROACH_SP, Phase.ROTATE_CUT} <= present

    def max_step(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).max())

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def indices(self, phase: Phase) -> list[int]:
        return [i for i, p in enumerate(self.phases) if p is phase]

    def to_records(self) -> list[dict]:
        return [
            {"xyz": [round(float(c), 9) for c in p], "phase": ph.value, "yaw_deg": float(y)}
            for p, ph, y in zip(self.points, self.phases, self.yaw_deg)
        ]


def _segment(a: np.ndarray, b: np.ndarray, max_step: float, include_start: bool) -> np.ndarray:
    n = max(1, math.ceil(float(np.linalg.norm(b - a)) / max_step))
    k = np.arange(0, n) if include_start else np.arange(1, n + 1)
    return a + (k / n)[:, None] * (b - a)


def _cut_pose(sp: np.ndarray, toward: np.ndarray, effector: EffectorModel) -> np.ndarray:
    """Rim centre that puts SP in the middle of the blade slot on the rim."""
    h = toward - sp
    h[1] = 0.0
    norm = np.linalg.norm(h)
    h = np.array([1.0, 0.0, 0.0]) if norm < 1e-9 else h / norm
    reach = effector.inner_radius - effector.slot_tolerance
    return sp + reach * h


def plan_wrap_trajectory(
    pose: PedicelKeypointSet,
    spheres: Sequence[FruitSphere],
    effector: EffectorModel = EffectorModel(),
    max_step: float = 0.05,
    min_wrap: int = 8,
) -> Trajectory:
    """Bottom-up wrap: rise beneath EP, follow the peduncle EP..FP, bring
    the slotted rim to SP, then rotate to cut."""
    if pose.dim != 3:
        raise DomainError("planning needs camera-frame (3D) keypoints")
    missing = [n for n in REQUIRED_KEYPOINTS if not pose.has(n)]
    if missing:
        raise PoseIncompleteError(f"missing keypoints: {', '.join(missing)}")
    if not max_step > 0:
        raise DomainError("max_step must be positive")

    sp, ep = pose.point("SP"), pose.point("EP")
    lowest = max([float(s.center[1] + s.radius) for s in spheres] + [float(ep[1])])
    start = np.array([ep[0], lowest + effector.height + effector.approach_clearance, ep[2]])

    rise = _segment(start, ep, max_step, include_start=True)
    curve = fit_curve(np.array([pose.point(n) for n in WRAP_KEYPOINTS]))
    n_wrap = max(min_wrap, math.ceil(curve.length / max_step) + 1)
    wrap = curve.evaluate(np.linspace(0.0, 1.0, n_wrap))

    toward = np.mean([s.center for s in spheres], axis=0) if spheres else pose.point("FP")
    cut = _cut_pose(sp, toward.copy(), effector)
    approach = _segment(wrap[-1], cut, max_step, include_start=False)

    points = np.vstack([rise, wrap, approach, cut[None, :]])
    phases = (
        [Phase.POSITION] * len(rise)
        + [Phase.WRAP] * len(wrap)
        + [Phase.APPROACH_SP] * len(approach)
        + [Phase.ROTATE_CUT]
    )
    yaw = np.zeros(len(points))
    yaw[-1] = effector.rotation_cut_angle
    return Trajectory(points, phases, yaw, curve=curve, cut_point=sp.copy())


@dataclass(frozen=True)
class Violation:
    waypoint: int
    sphere: int
    penetration: float


def wall_distance(rim_centers: np.ndarray, centers: np.ndarray, effector: EffectorModel) -> np.ndarray:
    """Distance from each point to the cylinder wall (rim circle included).

    Returns an array of shape (n_waypoints, n_points).
    """
    rim = np.atleast_2d(rim_centers)[:, None, :]
    c = np.atleast_2d(centers)[None, :, :]
    rho = np.hypot(c[..., 0] - rim[..., 0], c[..., 2] - rim[..., 2])
    along = c[..., 1] - rim[..., 1]  # depth below the rim
    radial = rho - effector.inner_radius
    beyond = np.where(along < 0.0, along, np.where(along > effector.height, along - effector.height, 0.0))
    return np.hypot(radial, beyond)


def check_collision(
    traj: Trajectory,
    spheres: Sequence[FruitSphere],
    effector: EffectorModel = EffectorModel(),
    clearance: float = 0.005,
) -> Violation | None:
    """First waypoint (then lowest sphere index) where a sphere comes within
    ``clearance`` of the wall or rim."""
    if not spheres or len(traj) == 0:
        return None
    centers = np.array([s.center for s in spheres])
    radii = np.array([s.radius for s in spheres])
    gap = wall_distance(traj.points, centers, effector) - radii[None, :] - clearance
    hits = np.argwhere(gap < 0.0)
    if len(hits) == 0:
        return None
    w, s = hits[0]  # argwhere is row-major: waypoint first, then sphere
    return Violation(int(w), int(s), float(-gap[w, s]))


def shift_waypoints(
    traj: Trajectory,
    curve: ParametricCurve,
    violation: Violation | None,
    spheres: Sequence[FruitSphere],
    effector: EffectorModel = EffectorModel(),
    clearance: float = 0.005,
    step: float = 0.01,
    max_iters: int = 10,
) -> Trajectory:
    """Push offending wrap waypoints off the fruit side of the peduncle.

    Each round moves the offending waypoint and its wrap-phase neighbours by
    ``step`` against the curve's principal normal at their nearest curve
    parameter, then re-checks.  Raises :class:`PlanInfeasible` when a fruit
    cannot fit the bore, a non-wrap waypoint collides, or ``max_iters``
    rounds do not clear the path.
    """
    if violation is None:
        return traj
    too_big = [i for i, s in enumerate(spheres) if s.radius + clearance >= effector.inner_radius]
    if too_big:
        raise PlanInfeasible(f"fruit {too_big[0]} cannot fit inside the effector bore")
    out = traj.copy()
    for _ in range(max_iters):
        w = violation.waypoint
        if out.phases[w] is not Phase.WRAP:
            raise PlanInfeasible(f"collision at {out.phases[w].value} waypoint {w}")
        for i in (w - 1, w, w + 1):
            if 0 <= i < len(out) and out.phases[i] is Phase.WRAP:
                n = curve_normal(curve, curve.closest_param(out.points[i]))
                out.points[i] = out.points[i] - step * n
        violation = check_collision(out, spheres, effector, clearance)
        if violation is None:
            return out
    raise PlanInfeasible(f"still colliding after {max_iters} shifts (waypoint {violation.waypoint})")


def plan_collision_free(
    pose: PedicelKeypointSet,
    spheres: Sequence[FruitSphere],
    effector: EffectorModel = EffectorModel(),
    clearance: float = 0.005,
    step: float = 0.01,
    max_iters: int = 10,
    max_step: float = 0.05,
) -> Trajectory:
    traj = plan_wrap_trajectory(pose, spheres, effector, max_step=max_step)
    hit = check_collision(traj, spheres, effector, clearance)
    return shift_waypoints(traj, traj.curve, hit, spheres, effector, clearance, step, max_iters)


def fruits_enveloped(rim_center, spheres: Sequence[FruitSphere], effector: EffectorModel) -> bool:
    """True when every sphere sits inside the bore below the rim."""
    rim = np.asarray(rim_center, dtype=float)
    for s in spheres:
        rho = math.hypot(s.center[0] - rim[0], s.center[2] - rim[2])
        top = s.center[1] - s.radius
        bottom = s.center[1] + s.radius
        if rho + s.radius > effector.inner_radius or top < rim[1] or bottom > rim[1] + effector.height:
            return False
    return True


# ---------------------------------------------------------------------------
# Harvest state machine
# ---------------------------------------------------------------------------


class HarvestPhase(enum.Enum):
    IDLE = "idle"
    POSITIONING = "positioning"
    WRAPPING = "wrapping"
    APPROACHING_SP = "approaching_sp"
    CUTTING = "cutting"
    SEVERED = "severed"
    FAILED = "failed"


class FailureReason(enum.Enum):
    COLLISION_DISPLACEMENT = "collision_displacement"
    POSE_ERROR = "pose_error"
    EFFECTOR_LIMIT = "effector_limit"
    UNREACHABLE = "unreachable"


@dataclass(frozen=True)
class HarvestState:
    phase: HarvestPhase = HarvestPhase.IDLE
    reason: FailureReason | None = None

    @property
    def terminal(self) -> bool:
        return self.phase in (HarvestPhase.SEVERED, HarvestPhase.FAILED)

    def __str__(self) -> str:
        return self.phase.value if self.reason is None else f"{self.phase.value}({self.reason.value})"


IDLE = HarvestState()


@dataclass(frozen=True)
class Event:
    kind: str
    sp_offset: float | None = None
    reason: FailureReason | None = None


_ADVANCE = {
    (HarvestPhase.IDLE, "start"): HarvestPhase.POSITIONING,
    (HarvestPhase.POSITIONING, "positioned"): HarvestPhase.WRAPPING,
    (HarvestPhase.WRAPPING, "wrapped"): HarvestPhase.APPROACHING_SP,
    (HarvestPhase.APPROACHING_SP, "reached_sp"): HarvestPhase.CUTTING,
}


def step_harvest(state: HarvestState, event: Event, effector: EffectorModel = EffectorModel()) -> HarvestState:
    """One transition of the harvest protocol.

    ``cut`` severs the peduncle only when ``sp_offset`` (distance from the
    true SP to the slot at the final approach waypoint) is within half the
    slot width.  ``fail`` aborts from any live state with a reason.
    """
    if state.terminal:
        raise ProtocolError(f"no transitions out of {state}")
    if event.kind == "fail":
        if event.reason is None:
            raise ProtocolError("a fail event needs a reason")
        return HarvestState(HarvestPhase.FAILED, event.reason)
    nxt = _ADVANCE.get((state.phase, event.kind))
    if nxt is not None:
        return HarvestState(nxt)
    if state.phase is HarvestPhase.CUTTING and event.kind == "cut":
        if event.sp_offset is None or event.sp_offset < 0:
            raise ProtocolError("a cut event needs a non-negative sp_offset")
        if event.sp_offset <= effector.slot_tolerance:
            return HarvestState(HarvestPhase.SEVERED)
        return HarvestState(HarvestPhase.FAILED, FailureReason.POSE_ERROR)
    raise ProtocolError(f"event {event.kind!r} is not valid in state {state}")


NOMINAL_EVENTS = ("start", "positioned", "wrapped", "reached_sp")


@dataclass
class HarvestMachine:
    """Owns one harvest attempt's state and its transition history."""

    effector: EffectorModel = EffectorModel()
    state: HarvestState = IDLE
    history: list[HarvestState] = field(default_factory=lambda: [IDLE])

    def fire(self, event: Event | str) -> HarvestState:
        if isinstance(event, str):
            event = Event(event)
        self.state = step_harvest(self.state, event, self.effector)
        self.history.append(self.state)
        return self.state
