"""Seeded synthetic greenhouse scenes with rendered detections and depth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from trusspick.clustering import BBox
from trusspick.errors import DomainError
from trusspick.geometry import CameraIntrinsics, PointCloud, project
from trusspick.phenotyping import FRUIT, TRUSS, Detection, FruitSphere, MaturityStage
from trusspick.pose import OrientationClass, PedicelKeypointSet, classify_orientation

DEFAULT_CAMERA = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)

DEFAULT_MIX = {
    OrientationClass.FRONT: 0.35,
    OrientationClass.RIGHT: 0.35,
    OrientationClass.LEFT: 0.1,
    OrientationClass.BACK: 0.1,
    OrientationClass.INWARD: 0.1,
}

# heading ranges in degrees, 0 = towards the camera, +90 = camera-right
_HEADINGS = {
    OrientationClass.FRONT: (-35.0, 35.0),
    OrientationClass.RIGHT: (55.0, 125.0),
    OrientationClass.LEFT: (-125.0, -55.0),
    OrientationClass.BACK: (145.0, 175.0),
    OrientationClass.INWARD: (150.0, 180.0),
}


@dataclass(frozen=True)
class SceneParams:
    n_trusses: int = 2
    fruit_count: tuple[int, int] = (5, 9)
    orientation_mix: Mapping[OrientationClass, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    ripe_prob: float = 0.8
    background_points: int = 300
    pixel_stride: int = 3
    camera: CameraIntrinsics = DEFAULT_CAMERA

    def __post_init__(self) -> None:
        lo, hi = self.fruit_count
        if not (1 <= lo <= hi):
            raise DomainError(f"fruit_count range {self.fruit_count} is invalid")
        if self.n_trusses < 1:
            raise DomainError("a scene needs at least one truss")
        if not 0.0 <= self.ripe_prob <= 1.0:
            raise DomainError("ripe_prob must be a probability")
        if self.pixel_stride < 1 or self.background_points < 0:
            raise DomainError("pixel_stride must be >= 1 and background_points >= 0")
        weights = list(self.orientation_mix.values())
        if not weights or min(weights) < 0 or sum(weights) <= 0:
            raise DomainError("orientation_mix needs non-negative weights with a positive sum")


@dataclass
class TrussTruth:
    truss_id: int
    keypoints: np.ndarray  # (7, 3), SP..EP
    spheres: list[FruitSphere]
    maturities: list[MaturityStage]
    orientation: OrientationClass
    heading_deg: float
    terminal_index: int
    fruit_ids: list[int]

    @property
    def pose(self) -> PedicelKeypointSet:
        return PedicelKeypointSet.full(self.keypoints)


@dataclass
class SyntheticScene:
    rng_seed: int
    params: SceneParams
    camera: CameraIntrinsics
    trusses: list[TrussTruth]
    detections: list[Detection]
    cloud: PointCloud

    @property
    def truss_detections(self) -> list[Detection]:
        return [d for d in self.detections if d.cls == TRUSS]

    @property
    def fruit_detections(self) -> list[Detection]:
        return [d for d in self.detections if d.cls == FRUIT]


# ---------------------------------------------------------------------------
# Peduncle shape: an arch rising to CP, then a quadratic droop to EP
# ---------------------------------------------------------------------------


class _Arch:
    """Height profile h(x) = a*xc^2 - a*(x - xc)^2 over horizontal reach x in [0, D]."""

    def __init__(self, reach: float, drop: float, cp_frac: float = 0.2) -> None:
        self.D = reach
        self.xc = cp_frac * reach
        self.a = drop / ((reach - self.xc) ** 2 - self.xc**2)

    def height(self, x):
        return self.a * self.xc**2 - self.a * (np.asarray(x) - self.xc) ** 2

    def _prim(self, x: float) -> float:
        u = 2.0 * self.a * (x - self.xc)
        return (u * math.sqrt(1.0 + u * u) + math.asinh(u)) / (4.0 * self.a)

    def arc(self, x0: float, x1: float) -> float:
        return self._prim(x1) - self._prim(x0)

    def at_arc(self, x0: float, s: float) -> float:
        """Reach x where the arc length from x0 equals s (bisection)."""
        lo, hi = x0, self.D
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.arc(x0, mid) < s:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


FP_REACH = 0.35
TERMINAL_STUB = 0.004
TERMINAL_MARGIN = 0.003
ARC_FRACTIONS = (0.25, 0.5, 0.75)


def _sample_orientation(rng: np.random.Generator, mix: Mapping[OrientationClass, float]) -> OrientationClass:
    classes = list(mix)
    w = np.array([mix[c] for c in classes], dtype=float)
    return classes[int(rng.choice(len(classes), p=w / w.sum()))]


def _maturities(rng: np.random.Generator, n: int, ripe: bool) -> tuple[list[MaturityStage], int]:
    terminal = n - 1
    if ripe:
        stages = [MaturityStage(int(rng.integers(2, 4))) for _ in range(n)]
        stages[terminal] = MaturityStage(int(rng.integers(1, 4)))
    else:
        stages = [MaturityStage(int(rng.integers(0, 4))) for _ in range(n)]
        k = int(rng.integers(0, n))
        stages[k] = MaturityStage.GREEN_MATURE if k == terminal else MaturityStage(int(rng.integers(0, 2)))
    return stages, terminal


def _make_truss(rng: np.random.Generator, tid: int, sp: np.ndarray, params: SceneParams) -> TrussTruth:
    cls = _sample_orientation(rng, params.orientation_mix)
    lo, hi = _HEADINGS[cls]
    heading = float(rng.uniform(lo, hi))
    if cls in (OrientationClass.BACK, OrientationClass.INWARD) and rng.random() < 0.5:
        heading = -heading
    reach = float(rng.uniform(0.03, 0.045) if cls is OrientationClass.BACK else rng.uniform(0.08, 0.11))
    drop = float(rng.uniform(0.05, 0.09))
    arch = _Arch(reach, drop)

    th = math.radians(heading)
    h = np.array([math.sin(th), 0.0, -math.cos(th)])
    side = np.array([math.cos(th), 0.0, math.sin(th)])

    def at(x: float) -> np.ndarray:
        return sp + x * h + np.array([0.0, -float(arch.height(x)), 0.0])

    x_fp = FP_REACH * reach
    span = arch.arc(x_fp, reach)
    xs = [0.0, arch.xc, x_fp] + [arch.at_arc(x_fp, f * span) for f in ARC_FRACTIONS] + [reach]
    keypoints = np.array([at(x) for x in xs])

    n = int(rng.integers(params.fruit_count[0], params.fruit_count[1] + 1))
    attach = np.linspace(x_fp, reach, n)
    spheres = []
    radii = rng.uniform(0.012, 0.017, n)
    pedicels = rng.uniform(0.008, 0.015, n)
    laterals = rng.uniform(0.018, 0.028, n)
    ep = keypoints[-1]
    # the terminal fruit hangs on a short stub straight below EP
    terminal = FruitSphere(ep + np.array([0.0, TERMINAL_STUB + radii[-1], 0.0]), float(radii[-1]))
    d_term = TERMINAL_STUB + float(radii[-1])
    # alternate sides, with the terminal's neighbour on the far side so it
    # does not hide the terminal fruit from the camera
    far = 1.0 if side[2] >= 0.0 else -1.0
    for j in range(n - 1):
        sign = far if (n - 2 - j) % 2 == 0 else -far
        hang = np.array([0.0, pedicels[j] + radii[j], 0.0])
        lateral = float(laterals[j])
        center = at(float(attach[j])) + hang + sign * lateral * side
        # keep the terminal fruit strictly nearest EP
        while np.linalg.norm(center - ep) <= d_term + TERMINAL_MARGIN:
            lateral += 0.002
            center = at(float(attach[j])) + hang + sign * lateral * side
        spheres.append(FruitSphere(center, float(radii[j])))
    spheres.append(terminal)
    ripe = bool(rng.random() < params.ripe_prob)
    stages, terminal = _maturities(rng, n, ripe)

    pose = PedicelKeypointSet.full(keypoints)
    centroid = np.mean([s.center for s in spheres], axis=0)
    return TrussTruth(
        truss_id=tid,
        keypoints=keypoints,
        spheres=spheres,
        maturities=stages,
        orientation=classify_orientation(pose, centroid),
        heading_deg=heading,
        terminal_index=terminal,
        fruit_ids=[100 * (tid + 1) + j for j in range(n)],
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _fruit_bbox(s: FruitSphere, K: CameraIntrinsics) -> BBox:
    u, v = project(s.center, K)
    r_px = s.radius * K.f_mean / float(s.center[2])
    return BBox(u - r_px, v - r_px, u + r_px, v + r_px)


def _clamp(box: BBox, K: CameraIntrinsics) -> BBox | None:
    x0, y0 = max(box.x_min, 0.0), max(box.y_min, 0.0)
    x1, y1 = min(box.x_max, K.width - 1.0), min(box.y_max, K.height - 1.0)
    if x0 >= x1 or y0 >= y1:
        return None
    return BBox(x0, y0, x1, y1)


def render_depth(spheres: list[FruitSphere], K: CameraIntrinsics, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast spheres on the pixel grid ``u, v = 0, stride, 2*stride, ...``.

    Returns (points, pixels) for every grid pixel hitting a sphere, nearest
    surface kept.
    """
    zbuf: dict[tuple[int, int], float] = {}
    for s in spheres:
        box = _clamp(_fruit_bbox(s, K).expanded(2.0), K)
        if box is None:
            continue
        us = np.arange(math.ceil(box.x_min / stride) * stride, box.x_max + 1e-9, stride)
        vs = np.arange(math.ceil(box.y_min / stride) * stride, box.y_max + 1e-9, stride)
        if len(us) == 0 or len(vs) == 0:
            continue
        uu, vv = np.meshgrid(us, vs)
        d = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu, dtype=float)], axis=-1)
        dc = d @ s.center
        dd = (d * d).sum(axis=-1)
        disc = dc * dc - dd * (float(s.center @ s.center) - s.radius**2)
        hit = disc >= 0.0
        t = (dc - np.sqrt(np.where(hit, disc, 0.0))) / dd
        for u, v, z in zip(uu[hit], vv[hit], t[hit]):
            key = (int(u), int(v))
            if z < zbuf.get(key, math.inf):
                zbuf[key] = float(z)
    if not zbuf:
        return np.zeros((0, 3)), np.zeros((0, 2))
    keys = sorted(zbuf)
    pix = np.array(keys, dtype=float)
    z = np.array([zbuf[k] for k in keys])
    pts = np.column_stack([(pix[:, 0] - K.cx) * z / K.fx, (pix[:, 1] - K.cy) * z / K.fy, z])
    return pts, pix


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> SyntheticScene:
    """Build a scene deterministically from ``seed``.

    Truss 0 is the target, near the optical axis at about 0.6 m.  Further
    trusses sit either well to the side or far behind it; the ones behind
    overlap it in the image and exercise depth-based association.
    """
    rng = np.random.default_rng(seed)
    K = params.camera
    trusses = []
    base = np.array([rng.uniform(-0.04, 0.04), rng.uniform(-0.12, -0.06), rng.uniform(0.55, 0.65)])
    for t in range(params.n_trusses):
        if t == 0:
            sp = base
        elif rng.random() < 0.5:
            dx = rng.choice([-1.0, 1.0]) * rng.uniform(0.06, 0.12)
            sp = base + np.array([dx, rng.uniform(-0.03, 0.03), rng.uniform(0.30, 0.40)])
        else:
            sp = base + np.array([rng.choice([-1.0, 1.0]) * rng.uniform(0.30, 0.36), rng.uniform(-0.03, 0.03), rng.uniform(-0.05, 0.1)])
        trusses.append(_make_truss(rng, t, sp, params))

    detections: list[Detection] = []
    all_spheres: list[FruitSphere] = []
    for tr in trusses:
        boxes = []
        for fid, s, m in zip(tr.fruit_ids, tr.spheres, tr.maturities):
            box = _clamp(_fruit_bbox(s, K), K)
            if box is None:
                continue
            boxes.append(box)
            detections.append(Detection(fid, FRUIT, box, 0.9, m))
        kp_px = np.array([project(p, K) for p in tr.keypoints])
        x0 = min([b.x_min for b in boxes] + list(kp_px[:, 0])) - 4.0
        y0 = min([b.y_min for b in boxes] + list(kp_px[:, 1])) - 4.0
        x1 = max([b.x_max for b in boxes] + list(kp_px[:, 0])) + 4.0
        y1 = max([b.y_max for b in boxes] + list(kp_px[:, 1])) + 4.0
        tbox = _clamp(BBox(x0, y0, x1, y1), K)
        if tbox is not None:
            detections.append(Detection(tr.truss_id, TRUSS, tbox, 0.95))
        all_spheres.extend(tr.spheres)

    pts, pix = render_depth(all_spheres, K, params.pixel_stride)
    if params.background_points:
        st = params.pixel_stride
        bu = rng.integers(0, (K.width - 1) // st + 1, params.background_points) * st
        bv = rng.integers(0, (K.height - 1) // st + 1, params.background_points) * st
        bz = rng.uniform(1.2, 2.0, params.background_points)
        taken = {tuple(p) for p in pix.astype(int).tolist()}
        keep = [i for i in range(params.background_points) if (int(bu[i]), int(bv[i])) not in taken]
        bu, bv, bz = bu[keep].astype(float), bv[keep].astype(float), bz[keep]
        bpts = np.column_stack([(bu - K.cx) * bz / K.fx, (bv - K.cy) * bz / K.fy, bz])
        pts = np.vstack([pts, bpts])
        pix = np.vstack([pix, np.column_stack([bu, bv])])
    return SyntheticScene(seed, params, K, trusses, detections, PointCloud(pts, pix))
