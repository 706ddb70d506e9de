"""
From detections to a truss phenotype
====================================

Associate fruit with trusses, read their maturity, find the terminal fruit,
size every fruit as a sphere and classify the truss heading from its
keypoints.  The ground truth of the synthetic scene is printed alongside.
"""

import numpy as np

from trusspick.geometry import project
from trusspick.harness.scene import generate_scene
from trusspick.phenotyping import grade_quality, phenotype_trusses
from trusspick.pose import PedicelKeypointSet, classify_orientation, oks

scene = generate_scene(4)
end_points = {t.truss_id: t.keypoints[-1] for t in scene.trusses}

# the synthetic cloud holds visible fruit surfaces, not centres
phenos, assoc = phenotype_trusses(
    scene.detections, scene.cloud, scene.camera, end_points=end_points, depth_at_surface=True
)
print(f"assigned fruit: {len(assoc.assigned)}, ambiguous: {len(assoc.ambiguous)}, "
      f"unassigned: {len(assoc.unassigned)}")

for truth in scene.trusses:
    p = phenos.get(truth.truss_id)
    if p is None:
        print(f"truss {truth.truss_id}: no fruit found")
        continue
    est = classify_orientation(truth.pose, p.fruit_centroid)
    print(f"truss {truth.truss_id}")
    print(f"  fruit {p.fruit_count} (truth {len(truth.fruit_ids)}), ripe={p.overall_ripe}, grade {grade_quality(p)}")
    print(f"  terminal fruit {p.terminal_fruit_id} (truth {truth.fruit_ids[truth.terminal_index]})")
    radii = [s.radius * 1000 for s in p.fruit_spheres.values()]
    true_radii = [s.radius * 1000 for s in truth.spheres]
    print(f"  radii mm {np.round(radii, 1)} (truth {np.round(true_radii, 1)})")
    print(f"  heading {est.value} (truth {truth.orientation.value})")

# keypoint similarity: a small pixel error on a large truss still scores high
rng = np.random.default_rng(0)
gt = scene.trusses[0].pose
sigmas = np.full(7, 0.05)
uv = np.array([project(p, scene.camera) for p in gt.coords])
truth2d = PedicelKeypointSet.full(uv, object_scale=float(np.ptp(uv, axis=0).prod()))
for px in (1.0, 5.0, 20.0):
    guess = PedicelKeypointSet.full(uv + rng.normal(0, px, uv.shape), truth2d.object_scale)
    print(f"keypoint noise {px:>4} px -> OKS {oks(guess, truth2d, sigmas):.3f}")
