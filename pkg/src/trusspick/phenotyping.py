"""Fruit-to-truss association, truss ripeness, fruit counts and sizes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from trusspick.clustering import (
    UNREACHED,
    BBox,
    ClusterParams,
    ClusterResult,
    adaptive_dbscan,
    seed_index_lookup,
)
from trusspick.errors import DomainError, EmptyTrussError, SeedResolutionError
from trusspick.geometry import (
    CameraIntrinsics,
    PointCloud,
    backproject,
    pixel_radius_to_metric,
)


class MaturityStage(enum.IntEnum):
    GREEN_MATURE = 0
    TURNING = 1
    RIPE = 2
    FULLY_RIPE = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "MaturityStage":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise DomainError(f"unknown maturity stage {text!r}") from None


TRUSS = "truss"
FRUIT = "fruit"


@dataclass(frozen=True)
class Detection:
    id: int
    cls: str
    bbox: BBox
    confidence: float = 1.0
    maturity: MaturityStage | None = None

    def __post_init__(self) -> None:
        if self.cls not in (TRUSS, FRUIT):
            raise DomainError(f"detection {self.id}: class must be 'truss' or 'fruit', got {self.cls!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DomainError(f"detection {self.id}: confidence {self.confidence} outside [0, 1]")
        if (self.cls == FRUIT) != (self.maturity is not None):
            raise DomainError(f"detection {self.id}: maturity is required for fruits and only for fruits")

    @classmethod
    def from_dict(cls, data: Mapping) -> "Detection":
        for key in ("id", "class", "bbox"):
            if key not in data:
                raise DomainError(f"detection: missing field {key!r}")
        maturity = data.get("maturity")
        return cls(
            id=int(data["id"]),
            cls=str(data["class"]),
            bbox=BBox.from_list(data["bbox"]),
            confidence=float(data.get("conf", 1.0)),
            maturity=MaturityStage.parse(maturity) if maturity is not None else None,
        )

    def to_dict(self) -> dict:
        out = {"id": self.id, "class": self.cls, "bbox": self.bbox.as_list(), "conf": self.confidence}
        if self.maturity is not None:
            out["maturity"] = self.maturity.label
        return out


@dataclass(frozen=True)
class FruitSphere:
    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise DomainError(f"sphere radius must be positive, got {self.radius}")

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.radius**3

    def to_dict(self) -> dict:
        return {"center": [float(c) for c in self.center], "radius": self.radius, "volume": self.volume}

    @classmethod
    def from_dict(cls, data: Mapping) -> "FruitSphere":
        try:
            return cls(np.asarray(data["center"], dtype=float), float(data["radius"]))
        except KeyError as exc:
            raise DomainError(f"sphere: missing field {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# 2D association
# ---------------------------------------------------------------------------


def _intersection(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(w, 0.0) * max(h, 0.0)


def iou(a: BBox, b: BBox) -> float:
    if a.area <= 0 or b.area <= 0:
        raise DomainError("IOU of a zero-area box is undefined")
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def overlap_of_fruit(fruit: BBox, truss: BBox) -> float:
    """Fraction of the fruit box covered by the truss box."""
    return _intersection(fruit, truss) / fruit.area


ASSOCIATION_SCORES = {"iou": iou, "ioa": overlap_of_fruit}


@dataclass
class Association:
    assigned: dict[int, int] = field(default_factory=dict)
    ambiguous: dict[int, list[int]] = field(default_factory=dict)
    unassigned: list[int] = field(default_factory=list)
    unreached: list[int] = field(default_factory=list)

    def fruits_of(self, truss_id: int) -> list[int]:
        return sorted(f for f, t in self.assigned.items() if t == truss_id)


def associate_fruits_2d(
    fruits: Sequence[Detection],
    trusses: Sequence[Detection],
    iou_min: float = 0.5,
    score: str = "ioa",
) -> Association:
    """Assign each fruit to the truss box it overlaps best.

    A fruit clearing ``iou_min`` against two or more trusses is ambiguous and
    left for :func:`disambiguate_3d`.  ``score="iou"`` uses plain
    intersection-over-union; the default ``"ioa"`` normalises by the fruit
    box, since a small fruit box fully inside a large truss box has a tiny IOU.
    """
    metric = ASSOCIATION_SCORES[score]
    result = Association()
    for fruit in fruits:
        if fruit.cls != FRUIT:
            raise DomainError(f"detection {fruit.id} is not a fruit")
        scored = []
        for truss in trusses:
            if truss.cls != TRUSS:
                raise DomainError(f"detection {truss.id} is not a truss")
            scored.append((metric(fruit.bbox, truss.bbox), truss.id))
        above = sorted((t for s, t in scored if s >= iou_min))
        if not above:
            result.unassigned.append(fruit.id)
        elif len(above) == 1:
            result.assigned[fruit.id] = above[0]
        else:
            result.ambiguous[fruit.id] = above
    return result


def disambiguate_3d(
    association: Association,
    clusters: ClusterResult,
    seed_fruit_ids: Sequence[int],
    cloud: PointCloud,
    max_depth_gap: float | None = 0.15,
) -> Association:
    """Resolve ambiguous fruits with the clusters grown from fruit seeds.

    ``seed_fruit_ids[k]`` names the fruit whose box centre produced seed ``k``
    of ``clusters``.  An ambiguous fruit goes to the candidate truss whose
    anchor fruits share its cluster.  If none or several do, it goes to the
    candidate whose anchors' median seed depth is nearest the fruit's own
    seed depth.  A fruit whose seed was never reached stays unassigned and
    is listed in ``unreached``.  When the nearest anchor median is more than
    ``max_depth_gap`` away the fruit most likely belongs to a truss with no
    anchors at all, so it is left unassigned rather than forced.
    """
    if len(seed_fruit_ids) != len(clusters.seed_assignments):
        raise DomainError("seed_fruit_ids must align with the clustering seeds")
    cluster_of = dict(zip(seed_fruit_ids, clusters.seed_assignments))
    depth_of = {
        f: float(cloud.points[i, 2]) for f, i in zip(seed_fruit_ids, clusters.seed_indices) if i >= 0
    }

    out = Association(
        assigned=dict(association.assigned),
        unassigned=list(association.unassigned),
        unreached=list(association.unreached),
    )
    anchors: dict[int, list[int]] = {}
    for f, t in association.assigned.items():
        anchors.setdefault(t, []).append(f)

    for fruit_id, candidates in sorted(association.ambiguous.items()):
        cid = cluster_of.get(fruit_id, UNREACHED)
        if cid == UNREACHED or fruit_id not in depth_of:
            out.unassigned.append(fruit_id)
            out.unreached.append(fruit_id)
            continue
        sharing = [t for t in candidates if any(cluster_of.get(a) == cid for a in anchors.get(t, ()))]
        if len(sharing) == 1:
            out.assigned[fruit_id] = sharing[0]
            continue
        pool = sharing or candidates
        ranked = []
        for t in pool:
            depths = [depth_of[a] for a in anchors.get(t, ()) if a in depth_of]
            if depths:
                ranked.append((abs(float(np.median(depths)) - depth_of[fruit_id]), t))
        if ranked and (max_depth_gap is None or min(ranked)[0] <= max_depth_gap):
            out.assigned[fruit_id] = min(ranked)[1]
        else:
            out.unassigned.append(fruit_id)
    out.unassigned.sort()
    out.unreached.sort()
    return out


# ---------------------------------------------------------------------------
# Ripeness and sizing
# ---------------------------------------------------------------------------


def truss_maturity(maturities: Sequence[MaturityStage], terminal_index: int) -> bool:
    """Harvestable iff the terminal fruit is at least turning and every
    other fruit is at least ripe."""
    if not maturities:
        raise DomainError("a truss needs at least one fruit")
    if not 0 <= terminal_index < len(maturities):
        raise DomainError(f"terminal index {terminal_index} out of range")
    if maturities[terminal_index] < MaturityStage.TURNING:
        return False
    return all(m >= MaturityStage.RIPE for i, m in enumerate(maturities) if i != terminal_index)


def identify_terminal_fruit(
    fruits: Sequence[Detection],
    spheres: Mapping[int, FruitSphere] | None = None,
    end_point=None,
) -> int:
    """Fruit nearest the peduncle end point, or the lowest box in the image
    when no pose is available.  Ties go to the lower fruit id."""
    if not fruits:
        raise DomainError("no fruits to choose from")
    if end_point is not None and spheres is not None:
        ep = np.asarray(end_point, dtype=float)
        return min(fruits, key=lambda f: (float(np.linalg.norm(spheres[f.id].center - ep)), f.id)).id
    return min(fruits, key=lambda f: (-f.bbox.center[1], f.id)).id


def estimate_fruit_sphere(
    fruit: Detection,
    depth: float,
    K: CameraIntrinsics,
    depth_at_surface: bool = False,
) -> FruitSphere:
    """Sphere from a fruit box and one depth reading.

    The box's mean extent is taken as the fruit diameter, so the pixel
    radius is (w + h) / 4.  With ``depth_at_surface`` the depth is read as
    the front of the fruit and the centre is pushed back by the radius.
    """
    if not (depth > 0 and math.isfinite(depth)):
        raise DomainError(f"depth must be positive, got {depth}")
    r_px = (fruit.bbox.width + fruit.bbox.height) / 4.0
    z = depth
    if depth_at_surface:
        ratio = r_px / K.f_mean
        if ratio >= 1.0:
            raise DomainError(f"fruit {fruit.id}: box too large for a surface-depth sphere")
        z = depth / (1.0 - ratio)
    center = backproject(fruit.bbox.center, z, K)
    return FruitSphere(center, pixel_radius_to_metric(r_px, z, K))


def fruit_depths_from_cloud(
    fruits: Sequence[Detection], cloud: PointCloud, window: int = 2
) -> dict[int, float]:
    """Median depth near each fruit box centre; fruits over depth holes are skipped."""
    out = {}
    for f in fruits:
        idx = seed_index_lookup(f.bbox.center, cloud, window)
        if idx is not None:
            out[f.id] = float(cloud.points[idx, 2])
    return out


# ---------------------------------------------------------------------------
# Truss record
# ---------------------------------------------------------------------------


@dataclass
class TrussPhenotype:
    truss_id: int
    fruit_ids: list[int]
    fruit_maturities: list[MaturityStage]
    terminal_fruit_id: int
    fruit_spheres: dict[int, FruitSphere]
    overall_ripe: bool

    @property
    def fruit_count(self) -> int:
        return len(self.fruit_ids)

    @property
    def median_volume(self) -> float:
        vols = [s.volume for s in self.fruit_spheres.values()]
        return float(np.median(vols)) if vols else 0.0

    @property
    def fruit_centroid(self) -> np.ndarray | None:
        if not self.fruit_spheres:
            return None
        return np.mean([s.center for s in self.fruit_spheres.values()], axis=0)

    def recompute_ripe(self) -> bool:
        return truss_maturity(self.fruit_maturities, self.fruit_ids.index(self.terminal_fruit_id))

    def to_dict(self) -> dict:
        return {
            "truss_id": self.truss_id,
            "fruit_ids": list(self.fruit_ids),
            "fruit_maturities": [m.label for m in self.fruit_maturities],
            "terminal_fruit_id": self.terminal_fruit_id,
            "fruit_spheres": {str(k): s.to_dict() for k, s in sorted(self.fruit_spheres.items())},
            "overall_ripe": self.overall_ripe,
            "fruit_count": self.fruit_count,
        }


def build_phenotype(
    truss: Detection,
    fruits: Sequence[Detection],
    K: CameraIntrinsics,
    depths: Mapping[int, float],
    end_point=None,
    depth_at_surface: bool = False,
) -> TrussPhenotype:
    """Assemble the record for one truss from its assigned fruits.

    ``depths`` maps fruit id to a depth reading; fruits without one keep
    their maturity vote but get no sphere.  ``end_point`` is the 3D EP
    keypoint when a pose is available.
    """
    if not fruits:
        raise EmptyTrussError(f"truss {truss.id} has no assigned fruits")
    ordered = sorted(fruits, key=lambda f: f.id)
    spheres = {
        f.id: estimate_fruit_sphere(f, depths[f.id], K, depth_at_surface)
        for f in ordered
        if f.id in depths
    }
    if end_point is not None and spheres:
        terminal = identify_terminal_fruit([f for f in ordered if f.id in spheres], spheres, end_point)
    else:
        terminal = identify_terminal_fruit(ordered)
    ids = [f.id for f in ordered]
    maturities = [f.maturity for f in ordered]
    return TrussPhenotype(
        truss_id=truss.id,
        fruit_ids=ids,
        fruit_maturities=maturities,
        terminal_fruit_id=terminal,
        fruit_spheres=spheres,
        overall_ripe=truss_maturity(maturities, ids.index(terminal)),
    )


def _union(boxes: Sequence[BBox]) -> BBox:
    return BBox(
        min(b.x_min for b in boxes),
        min(b.y_min for b in boxes),
        max(b.x_max for b in boxes),
        max(b.y_max for b in boxes),
    )


def associate_fruits(
    detections: Sequence[Detection],
    cloud: PointCloud,
    K: CameraIntrinsics,
    params: ClusterParams = ClusterParams(),
    iou_min: float = 0.5,
) -> Association:
    """2D association, with ambiguous fruits settled by seeded clustering.

    Clustering runs once over the union box of every truss involved in an
    ambiguity, seeded from the centres of the ambiguous fruits and of those
    trusses' anchor fruits.
    """
    fruits = [d for d in detections if d.cls == FRUIT]
    trusses = [d for d in detections if d.cls == TRUSS]
    assoc = associate_fruits_2d(fruits, trusses, iou_min)
    if not assoc.ambiguous:
        return assoc
    involved = sorted({t for c in assoc.ambiguous.values() for t in c})
    boxes = {t.id: t.bbox for t in trusses}
    seeds = [f for f in fruits if f.id in assoc.ambiguous or assoc.assigned.get(f.id) in involved]
    try:
        clusters = adaptive_dbscan(
            cloud,
            _union([boxes[t] for t in involved]),
            [f.bbox.center for f in seeds],
            params,
            image_size=(K.width, K.height),
        )
    except SeedResolutionError:
        return Association(dict(assoc.assigned), {}, sorted(assoc.unassigned + list(assoc.ambiguous)), sorted(assoc.ambiguous))
    return disambiguate_3d(assoc, clusters, [f.id for f in seeds], cloud)


def phenotype_trusses(
    detections: Sequence[Detection],
    cloud: PointCloud,
    K: CameraIntrinsics,
    params: ClusterParams = ClusterParams(),
    iou_min: float = 0.5,
    end_points: Mapping[int, np.ndarray] | None = None,
    depth_at_surface: bool = False,
) -> tuple[dict[int, TrussPhenotype], Association]:
    """Phenotype every detected truss; trusses left without fruit are omitted."""
    assoc = associate_fruits(detections, cloud, K, params, iou_min)
    fruits = {d.id: d for d in detections if d.cls == FRUIT}
    depths = fruit_depths_from_cloud(list(fruits.values()), cloud, params.seed_window)
    out = {}
    for truss in sorted((d for d in detections if d.cls == TRUSS), key=lambda d: d.id):
        members = [fruits[f] for f in assoc.fruits_of(truss.id)]
        if members:
            ep = None if end_points is None else end_points.get(truss.id)
            out[truss.id] = build_phenotype(truss, members, K, depths, ep, depth_at_surface)
    return out, assoc


# (grade, minimum fruit count, minimum median volume in m^3), best first
DEFAULT_GRADES: tuple[tuple[str, int, float], ...] = (
    ("A", 8, 1.4e-5),
    ("B", 5, 8.0e-6),
    ("C", 1, 0.0),
)


def grade_quality(phenotype: TrussPhenotype, table=DEFAULT_GRADES) -> str:
    """First grade whose count and median-volume floors the truss clears."""
    for grade, min_count, min_volume in table:
        if phenotype.fruit_count >= min_count and phenotype.median_volume >= min_volume:
            return grade
    return "ungraded"
