"""Detection-seeded DBSCAN over organised depth clouds.

Two implementations live here:

* :func:`naive_dbscan` scans every point in index order and answers every
  region query by brute force.  It is the reference the faster path is
  tested against.
* :func:`adaptive_dbscan` crops the cloud to the truss box, resolves the
  fruit-box centres to 3D seeds and grows clusters only from those seeds,
  answering region queries from a voxel grid with cell size ``eps``.

Both count every point-pair distance they evaluate, so work reductions are
measured rather than assumed.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from trusspick.errors import DomainError, SeedResolutionError
from trusspick.geometry import PointCloud

NOISE = -1
UNVISITED = -2
UNREACHED = -1


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DomainError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    def expanded(self, margin: float, image_size: tuple[int, int] | None = None) -> "BBox":
        x0, y0 = self.x_min - margin, self.y_min - margin
        x1, y1 = self.x_max + margin, self.y_max + margin
        if image_size is not None:
            w, h = image_size
            x0, y0 = max(x0, 0.0), max(y0, 0.0)
            x1, y1 = min(x1, w - 1.0), min(y1, h - 1.0)
        return BBox(x0, y0, x1, y1)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values) -> "BBox":
        if len(values) != 4:
            raise DomainError(f"bbox needs 4 numbers, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class ClusterParams:
    eps: float = 0.03
    min_pts: int = 8
    crop_margin: float = 0.0
    seed_window: int = 2

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise DomainError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise DomainError(f"min_pts must be >= 1, got {self.min_pts}")
        if self.crop_margin < 0 or self.seed_window < 0:
            raise DomainError("crop_margin and seed_window must be non-negative")


@dataclass
class ClusterStats:
    distance_computations: int = 0
    points_visited: int = 0


@dataclass
class ClusterResult:
    """Labels are indexed like the cloud passed in (the uncropped one for the
    adaptive variant).  ``seed_indices`` holds the resolved point index per
    seed, -1 when the seed had no depth."""

    labels: np.ndarray
    seed_assignments: list[int] = field(default_factory=list)
    seed_indices: list[int] = field(default_factory=list)
    stats: ClusterStats = field(default_factory=ClusterStats)

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) and self.labels.max() >= 0 else 0

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)


def _require_pixels(cloud: PointCloud) -> np.ndarray:
    if cloud.pixel_map is None:
        raise DomainError("operation needs a cloud with a pixel map")
    return cloud.pixel_map


def crop_by_bbox(
    cloud: PointCloud,
    bbox: BBox,
    margin: float = 0.0,
    image_size: tuple[int, int] | None = None,
) -> tuple[PointCloud, np.ndarray]:
    """Keep points whose source pixel lies in the (expanded) box, edges inclusive.

    Returns the cropped cloud and the original index of each kept point.
    """
    pix = _require_pixels(cloud)
    box = bbox.expanded(margin, image_size) if margin or image_size else bbox
    u, v = pix[:, 0], pix[:, 1]
    keep = np.flatnonzero((u >= box.x_min) & (u <= box.x_max) & (v >= box.y_min) & (v <= box.y_max))
    return cloud.subset(keep), keep


def seed_index_lookup(pixel, cloud: PointCloud, window: int) -> int | None:
    """Index of the median-depth point in the (2*window+1)^2 square around ``pixel``."""
    pix = _require_pixels(cloud)
    cu, cv = round(float(pixel[0])), round(float(pixel[1]))
    near = np.flatnonzero((np.abs(pix[:, 0] - cu) <= window) & (np.abs(pix[:, 1] - cv) <= window))
    if len(near) == 0:
        return None
    order = near[np.argsort(cloud.points[near, 2], kind="stable")]
    return int(order[(len(order) - 1) // 2])


def seed_point_lookup(pixel, cloud: PointCloud, window: int) -> np.ndarray | None:
    idx = seed_index_lookup(pixel, cloud, window)
    return None if idx is None else cloud.points[idx].copy()


def _check_params(eps: float, min_pts: int) -> None:
    if not (eps > 0 and math.isfinite(eps)):
        raise DomainError(f"eps must be positive, got {eps}")
    if min_pts < 1:
        raise DomainError(f"min_pts must be >= 1, got {min_pts}")


def naive_dbscan(cloud: PointCloud | np.ndarray, eps: float, min_pts: int) -> ClusterResult:
    """Textbook DBSCAN with brute-force region queries.

    Points are scanned in index order; a border point stays with the first
    cluster that claims it.  A point's neighbourhood includes itself.
    """
    _check_params(eps, min_pts)
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if not np.all(np.isfinite(pts)):
        raise DomainError("cloud contains non-finite coordinates")
    n = len(pts)
    eps2 = eps * eps
    labels = np.full(n, UNVISITED, dtype=int)
    stats = ClusterStats()

    def region(i: int) -> np.ndarray:
        stats.distance_computations += n
        stats.points_visited += 1
        return np.flatnonzero(((pts - pts[i]) ** 2).sum(axis=1) <= eps2)

    cluster = -1
    for i in range(n):
        if labels[i] != UNVISITED:
            continue
        nbrs = region(i)
        if len(nbrs) < min_pts:
            labels[i] = NOISE
            continue
        cluster += 1
        labels[i] = cluster
        queue = deque(nbrs.tolist())
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cluster
            if labels[j] != UNVISITED:
                continue
            labels[j] = cluster
            nj = region(j)
            if len(nj) >= min_pts:
                queue.extend(nj.tolist())
    return ClusterResult(labels=labels, stats=stats)


class _VoxelGrid:
    """Uniform grid with cell size ``eps``; candidates come from the 27
    cells around a point's own cell and are cached per cell."""

    def __init__(self, pts: np.ndarray, eps: float) -> None:
        self.pts = pts
        self.keys = np.floor(pts / eps).astype(np.int64)
        self.cells: dict[tuple[int, int, int], list[int]] = {}
        for i, k in enumerate(map(tuple, self.keys)):
            self.cells.setdefault(k, []).append(i)
        self._cache: dict[tuple[int, int, int], np.ndarray] = {}

    def candidates(self, i: int) -> np.ndarray:
        key = tuple(self.keys[i])
        hit = self._cache.get(key)
        if hit is None:
            x, y, z = key
            found: list[int] = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        found.extend(self.cells.get((x + dx, y + dy, z + dz), ()))
            hit = np.array(sorted(found), dtype=np.int64)
            self._cache[key] = hit
        return hit


def adaptive_dbscan(
    cloud: PointCloud,
    truss_bbox: BBox,
    fruit_seed_pixels,
    params: ClusterParams = ClusterParams(),
    image_size: tuple[int, int] | None = None,
) -> ClusterResult:
    """DBSCAN grown only from detection seeds inside the truss crop.

    Points the expansion never reaches keep the ``UNVISITED`` label: they
    were not examined, which is different from being rejected as noise.
    Cluster ids are dense and follow seed order.
    """
    _require_pixels(cloud)
    if len(fruit_seed_pixels) == 0:
        raise DomainError("need at least one seed pixel")
    cropped, kept = crop_by_bbox(cloud, truss_bbox, params.crop_margin, image_size)
    pts = cropped.points
    if not np.all(np.isfinite(pts)):
        raise DomainError("cloud contains non-finite coordinates")

    seeds = [seed_index_lookup(p, cropped, params.seed_window) for p in fruit_seed_pixels]
    if all(s is None for s in seeds):
        raise SeedResolutionError("no seed pixel has depth points within its window")

    labels = np.full(len(pts), UNVISITED, dtype=int)
    stats = ClusterStats()
    eps2 = params.eps * params.eps
    grid = _VoxelGrid(pts, params.eps) if len(pts) else None

    def region(i: int) -> np.ndarray:
        cand = grid.candidates(i)
        stats.distance_computations += len(cand)
        stats.points_visited += 1
        return cand[((pts[cand] - pts[i]) ** 2).sum(axis=1) <= eps2]

    core_cache: dict[int, np.ndarray] = {}

    def neighbours(i: int) -> np.ndarray:
        hit = core_cache.get(i)
        if hit is None:
            hit = core_cache[i] = region(i)
        return hit

    n_clusters = 0
    assignments: list[int] = []
    for s in seeds:
        if s is None:
            assignments.append(UNREACHED)
            continue
        if labels[s] >= 0:
            assignments.append(int(labels[s]))
            continue
        start = s
        nbrs = neighbours(s)
        if len(nbrs) < params.min_pts:
            # a non-core seed can still be the border of a cluster; grow from
            # its first core neighbour in index order
            start = None
            for j in nbrs:
                if j != s and len(neighbours(int(j))) >= params.min_pts:
                    start = int(j)
                    break
            if start is None:
                labels[s] = NOISE
                assignments.append(UNREACHED)
                continue
            if labels[start] >= 0:
                if labels[s] < 0:
                    labels[s] = labels[start]
                assignments.append(int(labels[start]))
                continue
        cid = n_clusters
        n_clusters += 1
        labels[start] = cid
        queue = deque(neighbours(start).tolist())
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cid
            if labels[j] != UNVISITED:
                continue
            labels[j] = cid
            nj = neighbours(j)
            if len(nj) >= params.min_pts:
                queue.extend(nj.tolist())
        assignments.append(int(labels[s]) if labels[s] >= 0 else UNREACHED)

    full = np.full(len(cloud), UNVISITED, dtype=int)
    full[kept] = labels
    seed_indices = [int(kept[s]) if s is not None else -1 for s in seeds]
    return ClusterResult(labels=full, seed_assignments=assignments, seed_indices=seed_indices, stats=stats)


def split_foreground_background(clusters: ClusterResult, cloud: PointCloud) -> list[tuple[int, float]]:
    """``(cluster_id, median_z)`` pairs, nearest first; ties go to the lower id."""
    ids = sorted(set(int(c) for c in clusters.labels if c >= 0))
    if not ids:
        raise DomainError("clustering produced no clusters")
    z = cloud.points[:, 2]
    medians = [(cid, float(np.median(z[clusters.labels == cid]))) for cid in ids]
    return sorted(medians, key=lambda item: (item[1], item[0]))
