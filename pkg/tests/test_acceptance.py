"""Acceptance criteria for the full pipeline, one PASS/FAIL line each.

Each test prints its verdict (visible with ``-s``) and the lines are also
collected into an "acceptance criteria" section of the pytest summary.
"""

import contextlib
import io
import math
import time
from pathlib import Path

import numpy as np

from helpers import (
    clustering_case,
    collision_oracle_case,
    curved_peduncle,
    maturity_mismatches,
    normal_fd_angles,
    verdict,
)
from trusspick.geometry import CameraIntrinsics, backproject, curve_normal, fit_curve, project
from trusspick.harness.cli import main
from trusspick.harness.episode import NoiseModel, harvest_rate, load_records, run_episode, scene_seed, simulate
from trusspick.harness.report import aggregate_report
from trusspick.harness.scene import generate_scene
from trusspick.pose import PedicelKeypointSet, accuracy_at, oks

FIXTURES = Path(__file__).parent / "fixtures"
SIGMAS = np.array([0.025, 0.03, 0.035, 0.04, 0.045, 0.05, 0.055])


def test_clustering_oracle_suite():
    start = time.perf_counter()
    cases = [clustering_case(seed) for seed in range(100)]
    elapsed = time.perf_counter() - start
    assert all(c["n_points"] <= 2000 for c in cases)
    equal = all(c["core_ok"] and c["unreached_ok"] and c["ambiguous_only"] for c in cases)
    slack = sum(c["differing"] for c in cases) / sum(c["covered"] for c in cases)
    cropped = [c for c in cases if c["crop_fraction"] >= 0.5]
    worst_ratio = max(c["distance_ratio"] for c in cropped)
    ok = equal and slack < 0.01 and elapsed < 10.0 and len(cropped) > 0 and worst_ratio <= 0.5
    detail = (
        f"equal={equal} border slack={slack:.2e} time={elapsed:.2f}s "
        f"cropped scenes={len(cropped)} worst distance ratio={worst_ratio:.3f}"
    )
    verdict("clustering oracle suite", ok, detail)


def test_maturity_rule_exhaustive():
    start = time.perf_counter()
    bad = maturity_mismatches(5)
    elapsed = time.perf_counter() - start
    verdict("maturity rule", bad == 0 and elapsed < 1.0, f"mismatches={bad} time={elapsed:.3f}s")


def test_oks_suite():
    rng = np.random.default_rng(0)
    identity_err = scale_err = 0.0
    for _ in range(200):
        gt = PedicelKeypointSet.full(rng.uniform(0, 500, (7, 2)), rng.uniform(100, 5000))
        identity_err = max(identity_err, abs(oks(gt, gt, SIGMAS) - 1.0))
        pred = PedicelKeypointSet.full(gt.coords + rng.normal(0, 4, (7, 2)), gt.object_scale)
        lam = rng.uniform(0.05, 20)
        a = oks(pred, gt, SIGMAS)
        b = oks(
            PedicelKeypointSet.full(pred.coords * lam, pred.object_scale * lam**2),
            PedicelKeypointSet.full(gt.coords * lam, gt.object_scale * lam**2),
            SIGMAS,
        )
        scale_err = max(scale_err, abs(a - b))
    # every keypoint displaced by exactly sqrt(2 s) k_i gives exp(-1)
    s = 400.0
    gt = PedicelKeypointSet.full(np.zeros((7, 2)), s)
    pred = PedicelKeypointSet.full(np.column_stack([np.sqrt(2 * s) * 2 * SIGMAS, np.zeros(7)]), s)
    closed_err = abs(oks(pred, gt, SIGMAS) - math.exp(-1))

    gts = [PedicelKeypointSet.full(rng.uniform(0, 100, (7, 2)), 900.0) for _ in range(60)]
    preds = [PedicelKeypointSet.full(g.coords + rng.normal(0, rng.uniform(0, 8), (7, 2)), 900.0) for g in gts]
    accs = [accuracy_at(preds, gts, SIGMAS, t) for t in np.linspace(0, 1, 20)]
    monotone = all(b <= a for a, b in zip(accs, accs[1:]))

    ok = identity_err <= 1e-9 and closed_err <= 1e-9 and scale_err <= 1e-9 and monotone
    detail = f"identity={identity_err:.1e} exp(-1)={closed_err:.1e} scale={scale_err:.1e} monotone={monotone}"
    verdict("OKS suite", ok, detail)


def test_geometry_suite():
    rng = np.random.default_rng(0)
    K = CameraIntrinsics(fx=615.3, fy=614.9, cx=322.1, cy=238.7, width=640, height=480)
    uv = rng.uniform([0, 0], [K.width, K.height], (1000, 2))
    z = rng.uniform(0.1, 3.0, 1000)
    round_trip = max(float(np.max(np.abs(project(backproject(p, d, K), K) - p))) for p, d in zip(uv, z))

    interp = orth = 0.0
    angles = []
    for seed in range(20):
        pts = curved_peduncle(np.random.default_rng(seed), n=int(3 + seed % 5))
        c = fit_curve(pts)
        interp = max(interp, float(np.max(np.linalg.norm(c.evaluate(c.knot_params) - pts, axis=1))))
        for t in np.linspace(0, 1, 51):
            orth = max(orth, abs(float(np.dot(curve_normal(c, float(t)), c.tangent(float(t))))))
        angles += normal_fd_angles(seed)
    worst = max(angles)
    ok = round_trip < 1e-6 and interp < 1e-6 and orth < 1e-6 and worst <= 5.0
    detail = f"round trip={round_trip:.1e}px interpolation={interp:.1e}m orthogonality={orth:.1e} fd angle={worst:.3f}deg"
    verdict("geometry", ok, detail)


def test_collision_surface_oracle():
    clearance = 0.005
    cases = [collision_oracle_case(seed, clearance) for seed in range(200)]
    fn = sum(c["false_negatives"] for c in cases)
    excess = [e for c in cases for e in c["fp_excess"]]
    in_band = all(e <= clearance / 10 for e in excess)
    first_ok = all(c["first_ok"] for c in cases)
    hits = sum(c["oracle_hits"] for c in cases)
    ok = fn == 0 and in_band and first_ok
    detail = f"false negatives={fn} false positives={len(excess)} max excess={max(excess, default=0.0):.1e}m hits={hits}"
    verdict("collision vs surface oracle", ok, detail)


def test_end_to_end_zero_noise_soundness():
    accepted = []
    i = 0
    while len(accepted) < 50:
        rec = run_episode(generate_scene(scene_seed(0, i)), 0, NoiseModel())
        if rec.attempted:
            accepted.append(rec)
        i += 1
    severed = sum(r.harvested and r.final_state == "severed" for r in accepted)
    verdict("zero-noise soundness", severed == 50, f"{severed}/50 severed ({i} scenes drawn)")


def test_end_to_end_monotone_degradation():
    levels = [0.0, 0.002, 0.005, 0.01]
    rates = [harvest_rate(simulate(7, 200, NoiseModel(keypoint_sigma=s, rng_seed=7))) for s in levels]
    ok = all(b <= a + 0.02 for a, b in zip(rates, rates[1:]))
    detail = " ".join(f"{s * 1000:g}mm={r:.3f}" for s, r in zip(levels, rates))
    verdict("monotone degradation", ok, detail)


def test_end_to_end_byte_identical():
    outs = []
    for _ in range(2):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main(["simulate", "--seed", "11", "--episodes", "25", "--format", "json"])
        outs.append((code, buf.getvalue()))
    ok = outs[0] == outs[1] and outs[0][0] == 0 and len(outs[0][1]) > 0
    verdict("byte-identical reruns", ok, f"{len(outs[0][1])} bytes")


def test_table4_fixture():
    rep = aggregate_report(load_records(FIXTURES / "table4_records.json"))
    got = rep.overall.cells()[1:]
    want = ["93.33% (14/15)", "92.86% (13/14)", "86.67% (13/15)"]
    verdict("Table 4 fixture", got == want, f"got {got}")


def test_table3_fixture():
    rep = aggregate_report(load_records(FIXTURES / "table3_records.json"))
    got = rep.overall.cells()
    want = ["85.41% (41/48)", "93.75% (44/48)", "95.56% (43/45)", "89.58% (43/48)"]
    diffs = [f"{w!r} -> {g!r}" for w, g in zip(want, got) if w != g]
    verdict("Table 3 fixture", got == want, "mismatches " + "; ".join(diffs) if diffs else "")
