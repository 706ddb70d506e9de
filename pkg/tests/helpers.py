"""Scene builders and independent oracles shared by the test modules."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from trusspick.clustering import BBox
from trusspick.geometry import CameraIntrinsics, PointCloud

ACCEPTANCE_LINES: list[str] = []

CAMERA = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def blob_scene(rng: np.random.Generator, max_points: int = 2000, K: CameraIntrinsics = CAMERA):
    """Random dense blobs plus sparse clutter, each point tagged with its pixel.

    Returns (cloud, blob_centres, blob_point_index_lists).
    """
    n_blobs = int(rng.integers(3, 7))
    budget = int(rng.integers(max_points // 3, max_points + 1))
    n_clutter = budget // 10
    per_blob = (budget - n_clutter) // n_blobs
    pts, groups, centres = [], [], []
    offset = 0
    for _ in range(n_blobs):
        z = rng.uniform(0.5, 1.4)
        u, v = rng.uniform(60, K.width - 60), rng.uniform(60, K.height - 60)
        c = np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])
        r = rng.uniform(0.03, 0.05)
        d = rng.standard_normal((per_blob, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d *= r * rng.random(per_blob)[:, None] ** (1 / 3)
        groups.append(np.arange(offset, offset + per_blob))
        offset += per_blob
        pts.append(c + d)
        centres.append(c)
    clutter_uv = np.column_stack([rng.uniform(0, K.width - 1, n_clutter), rng.uniform(0, K.height - 1, n_clutter)])
    clutter_z = rng.uniform(0.4, 2.0, n_clutter)
    clutter = np.column_stack(
        [(clutter_uv[:, 0] - K.cx) * clutter_z / K.fx, (clutter_uv[:, 1] - K.cy) * clutter_z / K.fy, clutter_z]
    )
    pts.append(clutter)
    P = np.vstack(pts)
    uv = np.column_stack([K.fx * P[:, 0] / P[:, 2] + K.cx, K.fy * P[:, 1] / P[:, 2] + K.cy])
    uv = np.clip(uv, 0.0, [K.width - 1e-6, K.height - 1e-6])
    return PointCloud(P, uv), centres, groups


def crop_box_around(cloud: PointCloud, idx, pad: float = 10.0) -> BBox:
    uv = cloud.pixel_map[idx]
    return BBox(
        max(uv[:, 0].min() - pad, 0.0),
        max(uv[:, 1].min() - pad, 0.0),
        min(uv[:, 0].max() + pad, CAMERA.width - 1.0),
        min(uv[:, 1].max() + pad, CAMERA.height - 1.0),
    )


def kdtree_dbscan_cores(points: np.ndarray, eps: float, min_pts: int):
    """Core flags and connected core components via a k-d tree.

    Returns (is_core, component_of_core) where the component id is -1 for
    non-core points.  Border points are not assigned: their membership is
    order-dependent in DBSCAN.
    """
    tree = cKDTree(points)
    nbrs = tree.query_ball_point(points, r=eps * (1 + 1e-12))
    is_core = np.array([len(n) >= min_pts for n in nbrs])
    rows, cols = [], []
    for i, n in enumerate(nbrs):
        if is_core[i]:
            for j in n:
                if is_core[j]:
                    rows.append(i)
                    cols.append(j)
    m = len(points)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
    _, comp = connected_components(graph, directed=False)
    comp = np.where(is_core, comp, -1)
    return is_core, comp, nbrs


def curved_peduncle(rng: np.random.Generator, n: int = 6) -> np.ndarray:
    """Smoothly arching 3D polyline, distinct consecutive points."""
    s = np.linspace(0.0, 1.0, n)
    heading = rng.uniform(0, 2 * np.pi)
    h = np.array([np.cos(heading), 0.0, np.sin(heading)])
    reach, drop = rng.uniform(0.08, 0.15), rng.uniform(0.03, 0.08)
    base = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.2, 0.0), rng.uniform(0.5, 0.8)])
    return base + np.outer(s * reach, h) + np.outer(drop * (s**2 - 0.3 * s), [0.0, 1.0, 0.0])


def clustering_case(seed: int, eps: float = 0.015, min_pts: int = 6) -> dict:
    """Run adaptive and naive DBSCAN on one random scene and compare them.

    Core membership must match the k-d tree oracle exactly; border points
    may differ (they go to whichever cluster reaches them first), so their
    disagreement is reported as a fraction of all points in seeded clusters.
    """
    from trusspick.clustering import UNREACHED, ClusterParams, adaptive_dbscan, crop_by_bbox, naive_dbscan

    rng = np.random.default_rng(seed)
    cloud, _, groups = blob_scene(rng)
    chosen = rng.choice(len(groups), size=int(rng.integers(1, 3)), replace=False)
    box = crop_box_around(cloud, np.concatenate([groups[c] for c in chosen]))
    seeds = [cloud.pixel_map[int(rng.choice(groups[c]))] for c in chosen]
    params = ClusterParams(eps=eps, min_pts=min_pts, seed_window=1)

    adaptive = adaptive_dbscan(cloud, box, seeds, params)
    cropped, kept = crop_by_bbox(cloud, box)
    naive = naive_dbscan(cropped, eps, min_pts)
    is_core, comp, nbrs = kdtree_dbscan_cores(cropped.points, eps, min_pts)
    local = adaptive.labels[kept]

    core_ok, unreached_ok = True, True
    differing, covered = set(), set()
    for k, cid in enumerate(adaptive.seed_assignments):
        if cid == UNREACHED:
            if adaptive.seed_indices[k] >= 0:
                s = int(np.flatnonzero(kept == adaptive.seed_indices[k])[0])
                unreached_ok &= not is_core[s] and not any(is_core[j] for j in nbrs[s])
            continue
        A = np.flatnonzero(local == cid)
        a_core = A[is_core[A]]
        if len(a_core) == 0:
            core_ok = False
            continue
        naive_ids = set(naive.labels[a_core].tolist())
        oracle_ids = set(comp[a_core].tolist())
        if len(naive_ids) != 1 or len(oracle_ids) != 1:
            core_ok = False
            continue
        N = np.flatnonzero(naive.labels == naive_ids.pop())
        O = np.flatnonzero(comp == oracle_ids.pop())
        core_ok &= set(a_core) == set(N[is_core[N]]) == set(O)
        differing |= set(A) ^ set(N)
        covered |= set(A) | set(N)
    # a disagreement is only legitimate on a border point that touches
    # cores of two different clusters
    ambiguous_only = all(
        not is_core[p] and len({comp[j] for j in nbrs[p] if is_core[j]}) >= 2 for p in differing
    )
    n = len(cloud)
    return {
        "ambiguous_only": bool(ambiguous_only),
        "differing": len(differing),
        "covered": len(covered),
        "core_ok": bool(core_ok),
        "unreached_ok": bool(unreached_ok),
        "border_slack": len(differing) / len(covered) if covered else 0.0,
        "crop_fraction": 1.0 - len(kept) / n,
        "distance_ratio": adaptive.stats.distance_computations / float(n * n),
        "naive_full_count": n * n,
        "n_points": n,
    }


def cylinder_surface_samples(effector, n_around: int = 200, n_along: int = 50) -> np.ndarray:
    """n_around * n_along points on the effector wall relative to the rim
    centre; the first ring is the rim itself (y down, body below the rim)."""
    ang = np.linspace(0.0, 2 * np.pi, n_around, endpoint=False)
    along = np.linspace(0.0, effector.height, n_along)
    a, h = np.meshgrid(ang, along, indexing="ij")
    r = effector.inner_radius
    return np.column_stack([r * np.cos(a).ravel(), h.ravel(), r * np.sin(a).ravel()])


def collision_oracle_case(seed: int, clearance: float = 0.005, n_waypoints: int = 6, n_spheres: int = 4):
    """Compare check_collision with a brute-force surface-sampling distance.

    Every (waypoint, sphere) pair is checked on its own through a one-point
    trajectory.  ``fp_excess`` lists, per false positive, how far beyond the
    clearance shell the sampled distance lies.  ``first_ok`` says whether the
    earliest violation of the whole trajectory matches the oracle's (a false
    positive may legitimately move it earlier).
    """
    from trusspick.planning import EffectorModel, Phase, Trajectory, check_collision
    from trusspick.phenotyping import FruitSphere

    rng = np.random.default_rng(seed)
    eff = EffectorModel(inner_radius=rng.uniform(0.08, 0.14), height=rng.uniform(0.12, 0.25))
    surf = cylinder_surface_samples(eff)
    rims = rng.uniform([-0.2, -0.2, 0.4], [0.2, 0.2, 0.9], (n_waypoints, 3))
    spheres = []
    for _ in range(n_spheres):
        base = rims[rng.integers(n_waypoints)]
        r = rng.uniform(0.008, 0.03)
        rho = eff.inner_radius + rng.uniform(-0.05, 0.05)
        ang = rng.uniform(0, 2 * np.pi)
        along = rng.uniform(-0.04, eff.height + 0.04)
        spheres.append(FruitSphere(base + [rho * np.cos(ang), along, rho * np.sin(ang)], r))

    fn, fp_excess, agree, hits = 0, [], 0, 0
    oracle_first = None
    for w, rim in enumerate(rims):
        pts = rim + surf
        one = Trajectory(rim[None, :], [Phase.WRAP], np.zeros(1))
        for s_idx, s in enumerate(spheres):
            sampled = float(np.min(np.linalg.norm(pts - s.center, axis=1)))
            oracle_hit = sampled < s.radius + clearance
            impl_hit = check_collision(one, [s], eff, clearance) is not None
            hits += oracle_hit
            if oracle_hit and oracle_first is None:
                oracle_first = (w, s_idx)
            if oracle_hit and not impl_hit:
                fn += 1
            elif impl_hit and not oracle_hit:
                fp_excess.append(sampled - s.radius - clearance)
            else:
                agree += 1
    full = check_collision(Trajectory(rims, [Phase.WRAP] * n_waypoints, np.zeros(n_waypoints)), spheres, eff, clearance)
    impl_first = None if full is None else (full.waypoint, full.sphere)
    return {
        "false_negatives": fn,
        "fp_excess": fp_excess,
        "agree": agree,
        "oracle_hits": hits,
        "pairs": n_waypoints * n_spheres,
        "first_ok": impl_first == oracle_first or bool(fp_excess),
    }


def normal_fd_angles(seed: int, samples: int = 50) -> list[float]:
    """Angle between curve_normal and the finite-difference derivative of the
    unit tangent, away from knots (where the curve is only C1)."""
    from trusspick.geometry import curve_normal, fit_curve

    c = fit_curve(curved_peduncle(np.random.default_rng(seed)))
    knots = c.knot_params
    out = []
    h = 1e-5
    for t in np.linspace(0.01, 0.99, samples):
        if np.min(np.abs(knots - t)) < 5 * h or c.curvature(float(t)) < 1e-3:
            continue
        dT = (c.tangent(t + h) - c.tangent(t - h)) / (2 * h)
        dT /= np.linalg.norm(dT)
        n = curve_normal(c, float(t))
        out.append(math.degrees(math.acos(np.clip(np.dot(dT, n), -1, 1))))
    return out


def rule_oracle(stages, t):
    """Harvest rule written out from the stage names."""
    terminal_ok = stages[t] in ("turning", "ripe", "fully_ripe")
    rest_ok = all(s in ("ripe", "fully_ripe") for i, s in enumerate(stages) if i != t)
    return terminal_ok and rest_ok


def maturity_mismatches(max_n: int = 5) -> int:
    from trusspick.phenotyping import MaturityStage, truss_maturity

    G, T, R, F = MaturityStage
    names = {G: "green_mature", T: "turning", R: "ripe", F: "fully_ripe"}
    bad = 0
    for n in range(1, max_n + 1):
        for combo in itertools.product(list(MaturityStage), repeat=n):
            labels = [names[m] for m in combo]
            for t in range(n):
                bad += truss_maturity(list(combo), t) != rule_oracle(labels, t)
    return bad


def verdict(name: str, ok: bool, detail: str = "") -> None:
    """Record and print one acceptance line, then assert it."""
    line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
