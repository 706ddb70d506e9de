"""Peduncle keypoints, OKS scoring, sigma calibration and truss orientation."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from trusspick.errors import DomainError

KEYPOINT_NAMES: tuple[str, ...] = ("SP", "CP", "FP", "QP", "MP", "TQP", "EP")
N_KEYPOINTS = len(KEYPOINT_NAMES)
SIGMA_FLOOR = 1e-3

# SP and CP are tightened, the evenly spaced FP..EP points relaxed
DEFAULT_MULTIPLIERS: tuple[float, ...] = (0.5, 0.5, 1.0, 1.5, 1.5, 1.5, 1.5)


class Visibility(enum.IntEnum):
    ABSENT = 0
    OCCLUDED = 1
    VISIBLE = 2


class OrientationClass(enum.Enum):
    FRONT = "front"
    RIGHT = "right"
    LEFT = "left"
    BACK = "back"
    INWARD = "inward"


def kp_index(name: str) -> int:
    try:
        return KEYPOINT_NAMES.index(name)
    except ValueError:
        raise DomainError(f"unknown keypoint {name!r}") from None


@dataclass
class PedicelKeypointSet:
    """Seven peduncle keypoints in fixed SP..EP order.

    ``coords`` is (7, 2) for image keypoints or (7, 3) for camera-frame ones.
    ``object_scale`` is the truss box area in px^2 and sets the OKS scale.
    """

    coords: np.ndarray
    visibility: np.ndarray
    object_scale: float = 1.0
    fruit_keypoints: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=float)
        self.visibility = np.asarray(self.visibility, dtype=int)
        if self.coords.ndim != 2 or self.coords.shape[0] != N_KEYPOINTS or self.coords.shape[1] not in (2, 3):
            raise DomainError(f"expected 7 keypoints of dimension 2 or 3, got shape {self.coords.shape}")
        if self.visibility.shape != (N_KEYPOINTS,):
            raise DomainError("visibility must have one flag per keypoint")
        if np.any((self.visibility < 0) | (self.visibility > 2)):
            raise DomainError("visibility flags must be 0, 1 or 2")
        if not self.object_scale > 0:
            raise DomainError(f"object_scale must be positive, got {self.object_scale}")

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def labeled(self) -> np.ndarray:
        return self.visibility > Visibility.ABSENT

    def has(self, name: str) -> bool:
        return bool(self.labeled[kp_index(name)])

    def point(self, name: str) -> np.ndarray:
        return self.coords[kp_index(name)]

    @classmethod
    def full(cls, coords, object_scale: float = 1.0, fruit_keypoints=None) -> "PedicelKeypointSet":
        """All seven keypoints visible."""
        return cls(coords, np.full(N_KEYPOINTS, Visibility.VISIBLE), object_scale, fruit_keypoints)

    @classmethod
    def from_dict(cls, data: Mapping) -> "PedicelKeypointSet":
        if "keypoints" not in data:
            raise DomainError("keypoint annotation: missing field 'keypoints'")
        rows = np.asarray(data["keypoints"], dtype=float)
        if rows.ndim != 2 or rows.shape[0] != N_KEYPOINTS or rows.shape[1] not in (3, 4):
            raise DomainError(f"keypoint annotation: 'keypoints' must be 7 rows of [u, v, vis] or [x, y, z, vis], got {rows.shape}")
        scale = data.get("object_scale")
        if scale is None and "bbox" in data:
            x0, y0, x1, y1 = (float(b) for b in data["bbox"])
            scale = (x1 - x0) * (y1 - y0)
        fk = data.get("fruit_keypoints")
        return cls(
            coords=rows[:, :-1],
            visibility=rows[:, -1].astype(int),
            object_scale=float(scale) if scale is not None else 1.0,
            fruit_keypoints=np.asarray(fk, dtype=float) if fk else None,
        )

    def to_dict(self) -> dict:
        out = {
            "keypoints": [[*map(float, c), int(v)] for c, v in zip(self.coords, self.visibility)],
            "object_scale": self.object_scale,
        }
        if self.fruit_keypoints is not None:
            out["fruit_keypoints"] = self.fruit_keypoints.tolist()
        return out


def load_keypoint_sets(path) -> list[PedicelKeypointSet]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    items = data if isinstance(data, list) else [data]
    out = []
    for k, item in enumerate(items):
        try:
            out.append(PedicelKeypointSet.from_dict(item))
        except DomainError as exc:
            raise DomainError(f"{path}: entry {k}: {exc}") from None
    return out


def _check_sigmas(sigmas) -> np.ndarray:
    s = np.asarray(sigmas, dtype=float)
    if s.shape != (N_KEYPOINTS,):
        raise DomainError(f"need 7 sigmas, got shape {s.shape}")
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise DomainError("sigmas must be positive and finite")
    return s


# ---------------------------------------------------------------------------
# OKS
# ---------------------------------------------------------------------------


def oks(pred: PedicelKeypointSet, gt: PedicelKeypointSet, sigmas) -> float:
    """COCO object keypoint similarity with per-keypoint constants k = 2 sigma.

    Keypoints absent from the ground truth are skipped; occluded but labelled
    ones count.  The prediction's own visibility flags are ignored.
    """
    s = _check_sigmas(sigmas)
    if pred.dim != gt.dim:
        raise DomainError("prediction and ground truth live in different coordinate spaces")
    mask = gt.labeled
    if not mask.any():
        raise DomainError("ground truth has no labelled keypoints")
    d2 = ((pred.coords - gt.coords) ** 2).sum(axis=1)
    k2 = (2.0 * s) ** 2
    e = d2 / (2.0 * gt.object_scale * k2)
    return float(np.exp(-e[mask]).sum() / mask.sum())


def accuracy_at(
    preds: Sequence[PedicelKeypointSet],
    gts: Sequence[PedicelKeypointSet],
    sigmas,
    threshold: float = 0.75,
) -> float:
    if len(preds) != len(gts):
        raise DomainError(f"{len(preds)} predictions for {len(gts)} ground-truth sets")
    if not preds:
        raise DomainError("nothing to evaluate")
    hits = sum(oks(p, g, sigmas) >= threshold for p, g in zip(preds, gts))
    return hits / len(preds)


# ---------------------------------------------------------------------------
# Sigma calibration
# ---------------------------------------------------------------------------


@dataclass
class SigmaEstimate:
    """Per-keypoint sigmas; slots with too few samples hold NaN and are
    listed in ``unestimable``."""

    values: np.ndarray
    sample_counts: np.ndarray
    unestimable: tuple[str, ...] = field(default_factory=tuple)

    def filled(self, default) -> np.ndarray:
        out = self.values.copy()
        fill = np.broadcast_to(np.asarray(default, dtype=float), out.shape)
        out[np.isnan(out)] = fill[np.isnan(out)]
        return _check_sigmas(np.maximum(out, SIGMA_FLOOR))


def estimate_sigmas(
    annotator_sets: Sequence[Sequence[PedicelKeypointSet]],
    expert_gt: Sequence[PedicelKeypointSet],
    min_samples: int = 2,
) -> SigmaEstimate:
    """Spread of annotator keypoints around the expert's, per slot.

    Each sample is the annotator-to-expert distance divided by the square
    root of the expert's object scale.  The sigma is the population standard
    deviation of those samples over all annotators and objects, floored at
    ``SIGMA_FLOOR``.
    """
    samples: list[list[float]] = [[] for _ in range(N_KEYPOINTS)]
    for a, sets in enumerate(annotator_sets):
        if len(sets) != len(expert_gt):
            raise DomainError(f"annotator {a} has {len(sets)} objects, expert has {len(expert_gt)}")
        for ann, exp in zip(sets, expert_gt):
            if ann.dim != exp.dim:
                raise DomainError("annotator and expert coordinates differ in dimension")
            both = ann.labeled & exp.labeled
            dist = np.linalg.norm(ann.coords - exp.coords, axis=1) / math.sqrt(exp.object_scale)
            for i in np.flatnonzero(both):
                samples[i].append(float(dist[i]))
    values = np.full(N_KEYPOINTS, np.nan)
    missing = []
    for i, xs in enumerate(samples):
        if len(xs) < min_samples:
            missing.append(KEYPOINT_NAMES[i])
        else:
            values[i] = max(float(np.std(xs)), SIGMA_FLOOR)
    return SigmaEstimate(values, np.array([len(x) for x in samples]), tuple(missing))


def adjust_sigmas(sigmas, multipliers=DEFAULT_MULTIPLIERS) -> np.ndarray:
    s = _check_sigmas(sigmas)
    m = np.asarray(multipliers, dtype=float)
    if m.shape != (N_KEYPOINTS,):
        raise DomainError(f"need 7 multipliers, got shape {m.shape}")
    if np.any(~(m > 0)):
        raise DomainError("multipliers must be positive")
    return np.maximum(s * m, SIGMA_FLOOR)


# ---------------------------------------------------------------------------
# Orientation
# ---------------------------------------------------------------------------


def growth_angle_deg(growth) -> float:
    """Horizontal heading of a growth vector; 0 faces the camera, +90 is camera-right."""
    g = np.asarray(growth, dtype=float)
    if math.hypot(g[0], g[2]) < 1e-12:
        return 0.0
    return math.degrees(math.atan2(g[0], -g[2]))


def classify_orientation(
    pose: PedicelKeypointSet,
    fruit_centroid=None,
    inward_margin: float = 0.05,
) -> OrientationClass:
    """Classify the horizontal heading of the truss from SP towards its fruit.

    The growth vector runs from SP to the fruit centroid (EP if no centroid is
    given).  Trusses reaching deeper than ``inward_margin`` away from the
    camera are INWARD regardless of heading.  A truss hanging straight down
    counts as FRONT.
    """
    if pose.dim != 3:
        raise DomainError("orientation needs camera-frame (3D) keypoints")
    if not pose.has("SP"):
        raise DomainError("orientation needs the SP keypoint")
    if fruit_centroid is not None:
        target = np.asarray(fruit_centroid, dtype=float)
    elif pose.has("EP"):
        target = pose.point("EP")
    else:
        raise DomainError("orientation needs a fruit centroid or the EP keypoint")
    g = target - pose.point("SP")
    if g[2] > inward_margin:
        return OrientationClass.INWARD
    theta = growth_angle_deg(g)
    if abs(theta) <= 45.0:
        return OrientationClass.FRONT
    if 45.0 < theta <= 135.0:
        return OrientationClass.RIGHT
    if -135.0 <= theta < -45.0:
        return OrientationClass.LEFT
    return OrientationClass.BACK
