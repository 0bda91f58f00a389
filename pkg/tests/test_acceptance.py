"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The experiment criteria run the five experiments at their default settings
(seed 0), each from a cold cache so its runtime stands alone. Expect roughly
a quarter of an hour on one core.
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest

from calib_probe import experiments as X
from calib_probe import pnp, sensor
from calib_probe.datagen import LABEL_AXES
from calib_probe.geometry import (
    EulerPerturbation,
    PerturbRange,
    calib_error,
    compose,
    from_euler,
    ground_truth_from_perturbation,
    identity,
    invert,
    sample_perturbations,
    to_euler,
)
from calib_probe.scene import default_rig

from conftest import record

SEED = 0
LIMITS = {"E1": 300, "E2": 300, "E3": 600, "E4": 600, "E5": 300}


@pytest.fixture(scope="module")
def suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("suite")
    reps = {}
    for eid in X.EXPERIMENTS:
        X.clear_cache()
        rep = X.run_experiment(X.make_config({"seed": SEED}, eid), threads=1)
        X.write_report(rep, out / eid)
        reps[eid] = rep
    X.clear_cache()
    return reps, out


def runtime_note(rep):
    return f"runtime {rep.runtime:.0f}s (limit {LIMITS[rep.id]}s)"


# ---------------------------------------------------------------- 1-3: numerical suites


def test_criterion_1_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    a = sample_perturbations(PerturbRange(5.0, 80.0), rng, 10_000)
    b = sample_perturbations(PerturbRange(5.0, 80.0), rng, 10_000)
    worst = 0.0
    for va, vb in zip(a, b):
        ea = EulerPerturbation.from_vector(va)
        ta, tb = from_euler(ea), from_euler(EulerPerturbation.from_vector(vb))
        worst = max(worst, np.abs(compose(ta, invert(ta)).matrix - np.eye(4)).max())
        worst = max(worst, np.abs(to_euler(ta).as_vector() - va).max())
        worst = max(worst, np.abs(to_euler(from_euler(ea, LABEL_AXES), axes=LABEL_AXES).as_vector() - va).max())
        # de-calibrate then undo: the label recovers the initial extrinsic
        decal = compose(from_euler(ea, LABEL_AXES), tb)
        worst = max(worst, np.abs(compose(invert(from_euler(ea, LABEL_AXES)), decal).matrix - tb.matrix).max())
        gt = ground_truth_from_perturbation(tb, ta)
        worst = max(worst, np.abs(compose(gt, ta).matrix - tb.matrix).max())
    dt = time.perf_counter() - t0
    ok = worst < 1e-9 and dt < 5.0
    record(1, ok, f"geometry: 10^4 cases, worst deviation {worst:.1e} (tol 1e-9), {dt:.1f}s (limit 5s)")
    assert ok


def test_criterion_2_projection():
    t0 = time.perf_counter()
    rig = default_rig()
    k = rig["left"].intrinsics
    t = rig["left"].t_lidar_to_cam
    rng = np.random.default_rng(2)
    z = rng.uniform(2, 60, 1000)
    cam = np.c_[(rng.uniform(-0.49, k.width - 0.51, 1000) - k.cx) * z / k.fx,
                (rng.uniform(-0.49, k.height - 0.51, 1000) - k.cy) * z / k.fy, z]
    pts = invert(t).apply(cam)
    worst = 0.0
    for p, c in zip(pts, cam):
        col, row, d = sensor.project_point(p, t, k)
        q = sensor.backproject(col, row, d, k)
        u = np.array([k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy])
        worst = max(worst, np.abs(u - [k.fx * q[0] / q[2] + k.cx, k.fy * q[1] / q[2] + k.cy]).max())
    cloud = sensor.PointCloud(invert(t).apply(np.c_[rng.uniform(-30, 30, 20000), rng.uniform(-3, 3, 20000),
                                                    rng.uniform(1, 60, 20000)]))
    full = sensor.project(cloud, t, k)
    exact = True
    for _ in range(50):
        w, h = int(rng.integers(50, k.width + 1)), int(rng.integers(20, k.height + 1))
        x0, y0 = int(rng.integers(0, k.width - w + 1)), int(rng.integers(0, k.height - h + 1))
        c = sensor.crop(full, x0, y0, w, h)
        exact &= np.array_equal(c.data, sensor.project(cloud, t, c.intrinsics).data)
    dt = time.perf_counter() - t0
    ok = worst <= 0.5 + 1e-9 and exact and dt < 5.0
    record(2, ok, f"projection: 10^3 points, worst round-trip {worst:.3f}px (tol 0.5), "
                  f"crop re-projection {'pixel-exact' if exact else 'MISMATCH'} on 50 crops, {dt:.1f}s (limit 5s)")
    assert ok


def test_criterion_3_epnp_oracle():
    t0 = time.perf_counter()
    rig = default_rig()
    k = rig["left"].intrinsics
    t_gt = rig["left"].t_lidar_to_cam
    rng = np.random.default_rng(3)

    def points(n):
        z = rng.uniform(4, 50, n)
        cam = np.c_[rng.uniform(-0.7, 0.7, n) * z, rng.uniform(-0.15, 0.25, n) * z, z]
        return invert(t_gt).apply(cam)

    clean = calib_error(pnp.epnp(pnp.synthesize(points(100), t_gt, k), k), t_gt)
    errs, monotone = [], True
    for _ in range(100):
        corr = pnp.synthesize(points(100), t_gt, k, 0.5, rng)
        res = pnp.refine_detailed(pnp.epnp(corr, k), corr, k)
        monotone &= all(b <= a for a, b in zip(res.costs, res.costs[1:]))
        e = calib_error(res.pose, t_gt)
        errs.append((e.e_t, e.e_r))
    p95 = np.percentile(np.array(errs), 95, axis=0)
    dt = time.perf_counter() - t0
    ok = clean.e_r < 1e-5 and clean.e_t < 1e-4 and p95[0] < 2.0 and p95[1] < 0.1 and monotone and dt < 30
    record(3, ok, f"EPnP: noise-free e_r {clean.e_r:.1e} deg, e_t {clean.e_t:.1e} cm; 0.5px p95 e_t {p95[0]:.2f} cm "
                  f"(<2), e_r {p95[1]:.3f} deg (<0.1); refine cost non-increasing: {monotone}; {dt:.1f}s (limit 30s)")
    assert ok


# ---------------------------------------------------------------- 4-9: experiments


def test_criterion_4_cross_camera(suite):
    rep = suite[0]["E1"]
    s = rep.summary
    b = s["baseline_cm"]
    checks = [
        s["left_x_cm"] < 18.0,
        0.75 * b <= s["right_x_cm"] <= 1.25 * b,
        s["corrected_over_left_e_t"] <= 2.0 and s["corrected_over_left_e_r"] <= 2.0,
        s["pnp_right_over_left_e_t"] < 1.2,
        rep.runtime < LIMITS["E1"],
    ]
    ok = all(checks)
    record(4, ok, f"E1: left x {s['left_x_cm']:.1f} cm (<18); right x {s['right_x_cm']:.1f} cm "
                  f"(in [{0.75 * b:.1f}, {1.25 * b:.1f}]); corrected/left e_t {s['corrected_over_left_e_t']:.2f}, "
                  f"e_r {s['corrected_over_left_e_r']:.2f} (<=2); pnp right/left e_t "
                  f"{s['pnp_right_over_left_e_t']:.3f} (<1.2); {runtime_note(rep)}")
    assert ok


def test_criterion_5_classification_recovery(suite):
    rep = suite[0]["E2"]
    s = rep.summary
    ok = s["x_drop_points"] >= 15 and s["x_regenerated_gap_points"] <= 5 and rep.runtime < LIMITS["E2"]
    record(5, ok, f"E2: x accuracy left {s['left_accuracy']['x']:.3f}, right {s['right_accuracy']['x']:.3f} "
                  f"(drop {s['x_drop_points']:.1f} pts, need >=15), regenerated {s['regenerated_accuracy']['x']:.3f} "
                  f"(gap {s['x_regenerated_gap_points']:.1f} pts, need <=5); {runtime_note(rep)}")
    assert ok


def test_criterion_6_cropping(suite):
    rep = suite[0]["E3"]
    s = rep.summary
    base = s["none"]
    worse = all(s[m]["e_t"] >= base["e_t"] and s[m]["e_r"] >= base["e_r"] for m in X.CROP_MODES[1:])
    d = {m: (s[m]["pitch"] - base["pitch"], s[m]["yaw"] - base["yaw"]) for m in ("vertical", "horizontal")}
    pattern = d["vertical"][0] > d["vertical"][1] and d["horizontal"][1] > d["horizontal"][0]
    ok = worse and pattern and rep.runtime < LIMITS["E3"]
    detail = ", ".join(f"{m} e_t {s[m]['e_t']:.2f} e_r {s[m]['e_r']:.3f}" for m in X.CROP_MODES)
    record(6, ok, f"E3: {detail}; vertical crop adds pitch {d['vertical'][0]:+.3f} / yaw {d['vertical'][1]:+.3f} deg, "
                  f"horizontal adds pitch {d['horizontal'][0]:+.3f} / yaw {d['horizontal'][1]:+.3f} deg; "
                  f"{runtime_note(rep)}")
    assert ok


def test_criterion_7_clues(suite):
    rep = suite[0]["E4"]
    parts, ok = [], rep.runtime < LIMITS["E4"]
    for cond, series in rep.summary.items():
        e_t = [p["e_t"] for p in series]
        mono = all(b >= a for a, b in zip(e_t, e_t[1:]))
        ok &= mono
        parts.append(f"{cond} e_t {'/'.join(f'{v:.1f}' for v in e_t)} {'monotone' if mono else 'NOT monotone'}")
    record(7, ok, "E4: " + "; ".join(parts) + f"; {runtime_note(rep)}")
    assert ok


def test_criterion_8_mixed_training(suite):
    rep = suite[0]["E5"]
    s = rep.summary
    ok, parts = rep.runtime < LIMITS["E5"], []
    for cam in ("left", "right"):
        c = s[cam]
        between = c["in_distribution"]["x"] < c["mixed"]["x"] < c["cross_camera"]["x"]
        rel = abs(c["mixed"]["e_r"] - c["in_distribution"]["e_r"]) / c["in_distribution"]["e_r"]
        ok &= between and rel < 0.5
        parts.append(f"{cam} x {c['in_distribution']['x']:.1f} < {c['mixed']['x']:.1f} < {c['cross_camera']['x']:.1f} cm "
                     f"({'yes' if between else 'no'}), e_r change {100 * rel:.0f}% (<50%)")
    record(8, ok, "E5: " + "; ".join(parts) + f"; {runtime_note(rep)}")
    assert ok


def test_criterion_9_modality_parity(suite):
    s = suite[0]["E1"].summary
    rt, rr = s["intensity_over_depth_e_t"], s["intensity_over_depth_e_r"]
    ok = abs(rt - 1) < 0.1 and abs(rr - 1) < 0.1
    record(9, ok, f"E1 in-distribution, depth+intensity over depth-only: e_t x{rt:.3f}, e_r x{rr:.3f} (need within 10%)")
    assert ok


# ---------------------------------------------------------------- 10: determinism


def test_criterion_10_determinism(suite, tmp_path):
    """Rerun every experiment in fresh processes (two worker threads) and compare report bytes."""
    _, first = suite
    env = dict(os.environ)
    env.pop("CALIB_PROBE_THREADS", None)
    diffs = []
    for eid in X.EXPERIMENTS:
        out = tmp_path / eid
        subprocess.run([sys.executable, "-m", "calib_probe.cli", "experiment", "--id", eid, "--seed", str(SEED),
                        "--out", str(out), "--threads", "2"], check=True, env=env, capture_output=True)
        for name in X.REPORT_FILES:
            if (first / eid / name).read_bytes() != (out / name).read_bytes():
                diffs.append(f"{eid}/{name}")
    ok = not diffs
    record(10, ok, "determinism: rerun of E1-E5 in fresh processes with 2 threads, "
                   + ("all report files byte-identical" if ok else "differences in " + ", ".join(diffs)))
    assert ok
