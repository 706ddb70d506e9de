"""Camera model, metric sizing, virtual spheres and peduncle curves.

Frame convention used across the package (camera frame):

    x  right,  y  down,  z  forward (optical axis), metres.
    u  right,  v  down,  pixels, origin at the top-left image corner.

"Up" in the greenhouse therefore means decreasing y.  Every module that
reasons about vertical motion (planning, harness) inherits this.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trusspick.errors import DomainError

WORLD_DOWN = np.array([0.0, 1.0, 0.0])
_FALLBACK_AXIS = np.array([1.0, 0.0, 0.0])
_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))

SAMPLES_PER_SEGMENT = 64
STRAIGHT_CURVATURE = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def f_mean(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def contains(self, u: float, v: float) -> bool:
        return 0.0 <= u < self.width and 0.0 <= v < self.height

    @classmethod
    def from_dict(cls, data: dict) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                cx=float(data["cx"]),
                cy=float(data["cy"]),
                width=int(data["width"]),
                height=int(data["height"]),
            )
        except KeyError as exc:
            raise DomainError(f"intrinsics: missing field {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


def load_intrinsics(path: str | Path) -> CameraIntrinsics:
    with open(path, encoding="utf-8") as fh:
        return CameraIntrinsics.from_dict(json.load(fh))


@dataclass
class PointCloud:
    """Points in the camera frame, optionally with their source pixels.

    ``points`` has shape (N, 3); ``pixel_map``, when present, has shape
    (N, 2) holding (u, v) of the depth pixel each point came from.
    """

    points: np.ndarray
    pixel_map: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.pixel_map is not None:
            self.pixel_map = np.asarray(self.pixel_map, dtype=float).reshape(-1, 2)
            if len(self.pixel_map) != len(self.points):
                raise DomainError(
                    f"pixel_map has {len(self.pixel_map)} entries for {len(self.points)} points"
                )

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index: np.ndarray) -> "PointCloud":
        pix = None if self.pixel_map is None else self.pixel_map[index]
        return PointCloud(self.points[index], pix)

    def check_pixels(self, K: CameraIntrinsics) -> None:
        if self.pixel_map is None:
            return
        u, v = self.pixel_map[:, 0], self.pixel_map[:, 1]
        bad = ~((u >= 0) & (u < K.width) & (v >= 0) & (v < K.height))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(f"point {i}: pixel {tuple(self.pixel_map[i])} outside image")


def load_cloud(path: str | Path) -> PointCloud:
    """Read an ASCII cloud: one ``x y z [u v]`` per line, ``#`` starts a comment."""
    pts: list[tuple[float, float, float]] = []
    pix: list[tuple[float, float]] = []
    with_pixels: bool | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (3, 5):
                raise DomainError(f"{path}:{lineno}: expected 3 or 5 columns, got {len(fields)}")
            try:
                values = [float(f) for f in fields]
            except ValueError:
                raise DomainError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
            has_pix = len(values) == 5
            if with_pixels is None:
                with_pixels = has_pix
            elif with_pixels != has_pix:
                raise DomainError(f"{path}:{lineno}: mixed 3- and 5-column rows")
            pts.append((values[0], values[1], values[2]))
            if has_pix:
                pix.append((values[3], values[4]))
    points = np.array(pts, dtype=float).reshape(-1, 3)
    return PointCloud(points, np.array(pix, dtype=float).reshape(-1, 2) if with_pixels else None)


def save_cloud(cloud: PointCloud, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x y z" + (" u v" if cloud.pixel_map is not None else "") + "\n")
        for i, p in enumerate(cloud.points):
            row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
            if cloud.pixel_map is not None:
                row += f" {cloud.pixel_map[i, 0]:.9g} {cloud.pixel_map[i, 1]:.9g}"
            fh.write(row + "\n")


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def backproject(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    u, v = float(pixel[0]), float(pixel[1])
    if not (depth > 0 and math.isfinite(depth)):
        raise DomainError(f"depth must be positive and finite, got {depth}")
    if not K.contains(u, v):
        raise DomainError(f"pixel ({u}, {v}) outside {K.width}x{K.height} image")
    return np.array([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth])


def project(p, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise DomainError(f"cannot project point behind the camera (z={z})")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def pixel_radius_to_metric(r_px: float, depth: float, K: CameraIntrinsics) -> float:
    """Metric size of ``r_px`` pixels seen at ``depth``, using the mean focal length."""
    if not (r_px > 0 and depth > 0):
        raise DomainError(f"radius and depth must be positive, got r_px={r_px}, depth={depth}")
    return r_px * depth / K.f_mean


def sphere_virtual_cloud(center, radius: float, n: int) -> PointCloud:
    """Deterministic, near-uniform points on a sphere surface.

    Fibonacci spiral on the upper hemisphere mirrored through the centre, so
    the layout is point-symmetric and its centroid is the centre itself.  Odd
    counts get an extra equilateral triangle on the equator.
    """
    if not (radius > 0 and math.isfinite(radius)):
        raise DomainError(f"radius must be positive, got {radius}")
    if n < 4:
        raise DomainError(f"need at least 4 points, got {n}")
    c = np.asarray(center, dtype=float)

    m = n // 2 if n % 2 == 0 else (n - 3) // 2
    i = np.arange(m)
    z = 1.0 - (i + 0.5) / m  # strictly inside (0, 1]
    ring = np.sqrt(1.0 - z * z)
    phi = i * _GOLDEN_ANGLE
    upper = np.column_stack([ring * np.cos(phi), ring * np.sin(phi), z])
    unit = [upper, -upper]
    if n % 2:
        a = np.array([0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0]) + 0.5 * _GOLDEN_ANGLE
        unit.append(np.column_stack([np.cos(a), np.sin(a), np.zeros(3)]))
    return PointCloud(c + radius * np.vstack(unit))


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


class ParametricCurve:
    """Interpolating centripetal Catmull-Rom curve, arc-length parameterised.

    The curve passes through every control point.  End tangents follow the
    first and last chords (the duplicated-endpoint limit).  ``t`` in [0, 1] is
    normalised arc length, resolved through a table of
    ``SAMPLES_PER_SEGMENT`` chords per segment.
    """

    def __init__(self, control_points) -> None:
        pts = np.asarray(control_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise DomainError("a curve needs at least 2 three-dimensional points")
        chords = np.diff(pts, axis=0)
        chord_len = np.linalg.norm(chords, axis=1)
        if np.any(chord_len <= 1e-12):
            k = int(np.flatnonzero(chord_len <= 1e-12)[0])
            raise DomainError(f"control points {k} and {k + 1} coincide")
        self.control_points = pts
        self._dt = np.sqrt(chord_len)  # centripetal knot spacing
        slopes = chords / self._dt[:, None]
        n = len(pts)
        vel = np.empty_like(pts)
        vel[0] = slopes[0]
        vel[-1] = slopes[-1]
        for k in range(1, n - 1):
            a, b = self._dt[k - 1], self._dt[k]
            vel[k] = (b * slopes[k - 1] + a * slopes[k]) / (a + b)
        # Hermite tangents in per-segment units
        self._m0 = vel[:-1] * self._dt[:, None]
        self._m1 = vel[1:] * self._dt[:, None]
        self._build_table()

    @property
    def n_segments(self) -> int:
        return len(self.control_points) - 1

    def _build_table(self) -> None:
        s = SAMPLES_PER_SEGMENT
        g = np.concatenate(
            [[0.0]] + [k + np.arange(1, s + 1) / s for k in range(self.n_segments)]
        )
        pos = self._eval_g(g)
        steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        self._table_g = g
        self._table_s = np.concatenate([[0.0], np.cumsum(steps)])
        self.length = float(self._table_s[-1])

    def _split(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        seg = np.clip(np.floor(g).astype(int), 0, self.n_segments - 1)
        return seg, g - seg

    def _eval_g(self, g: np.ndarray, order: int = 0) -> np.ndarray:
        seg, u = self._split(np.asarray(g, dtype=float))
        u = u[:, None]
        p0 = self.control_points[seg]
        p1 = self.control_points[seg + 1]
        m0, m1 = self._m0[seg], self._m1[seg]
        if order == 0:
            u2, u3 = u * u, u * u * u
            return (
                (2 * u3 - 3 * u2 + 1) * p0
                + (u3 - 2 * u2 + u) * m0
                + (-2 * u3 + 3 * u2) * p1
                + (u3 - u2) * m1
            )
        if order == 1:
            u2 = u * u
            return (6 * u2 - 6 * u) * p0 + (3 * u2 - 4 * u + 1) * m0 + (-6 * u2 + 6 * u) * p1 + (3 * u2 - 2 * u) * m1
        return (12 * u - 6) * p0 + (6 * u - 4) * m0 + (6 - 12 * u) * p1 + (6 * u - 2) * m1

    def _t_to_g(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
            raise DomainError(f"curve parameter must lie in [0, 1], got {t[(t < 0) | (t > 1)][:3]}")
        return np.interp(t * self.length, self._table_s, self._table_g)

    def evaluate(self, t) -> np.ndarray:
        """Point(s) at normalised arc length ``t``; shape (3,) for scalar input."""
        out = self._eval_g(self._t_to_g(t))
        return out[0] if np.ndim(t) == 0 else out

    def tangent(self, t) -> np.ndarray:
        d = self._eval_g(self._t_to_g(t), order=1)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        return d[0] if np.ndim(t) == 0 else d

    def derivatives(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """First and second derivative with respect to the local segment parameter."""
        g = self._t_to_g(t)
        return self._eval_g(g, order=1)[0], self._eval_g(g, order=2)[0]

    def curvature(self, t: float) -> float:
        d1, d2 = self.derivatives(t)
        speed = np.linalg.norm(d1)
        return float(np.linalg.norm(np.cross(d1, d2)) / speed**3)

    @property
    def knot_params(self) -> np.ndarray:
        """Arc-length parameter at which each control point is reached."""
        idx = np.arange(self.n_segments + 1) * SAMPLES_PER_SEGMENT
        return self._table_s[idx] / self.length

    def closest_param(self, point) -> float:
        p = np.asarray(point, dtype=float)
        grid = np.linspace(0.0, 1.0, 64 * self.n_segments + 1)
        dist = np.linalg.norm(self.evaluate(grid) - p, axis=1)
        k = int(np.argmin(dist))
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
        # golden-section refinement inside the bracketing cell pair
        inv = (math.sqrt(5.0) - 1.0) / 2.0
        f = lambda s: float(np.linalg.norm(self.evaluate(s) - p))  # noqa: E731
        a, b = lo, hi
        c, d = b - inv * (b - a), a + inv * (b - a)
        fc, fd = f(c), f(d)
        for _ in range(40):
            if fc < fd:
                b, d, fd = d, c, fc
                c = b - inv * (b - a)
                fc = f(c)
            else:
                a, c, fc = c, d, fd
                d = a + inv * (b - a)
                fd = f(d)
        best = 0.5 * (a + b)
        return best if f(best) <= dist[k] else float(grid[k])


def fit_curve(points) -> ParametricCurve:
    return ParametricCurve(points)


def _unit_perpendicular(axis: np.ndarray, tangent: np.ndarray) -> np.ndarray | None:
    v = axis - np.dot(axis, tangent) * tangent
    n = np.linalg.norm(v)
    return None if n < 1e-9 else v / n


def curve_normal(curve: ParametricCurve, t: float) -> np.ndarray:
    """Unit principal normal at ``t``.

    On locally straight stretches (curvature below 1e-6) the normal is the
    direction perpendicular to the tangent in the plane of the tangent and
    world-down; a vertical tangent falls back to the camera x axis.
    """
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"curve parameter must lie in [0, 1], got {t}")
    d1, d2 = curve.derivatives(t)
    speed = np.linalg.norm(d1)
    tangent = d1 / speed
    kappa = np.linalg.norm(np.cross(d1, d2)) / speed**3
    if kappa >= STRAIGHT_CURVATURE:
        n = _unit_perpendicular(d2, tangent)
        if n is not None:
            return n
    n = _unit_perpendicular(WORLD_DOWN, tangent)
    if n is None:
        n = _unit_perpendicular(_FALLBACK_AXIS, tangent)
    return n
