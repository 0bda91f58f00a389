"""Compiled kernels vs the numpy fallback on desk-scale inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is run on identical inputs through both backends; outputs are
checked for equality before timings are reported (best of ``--repeat``).
"""

import argparse
import json
import sys
import time

import numpy as np

from calib_probe import _kernels_py, scene
from calib_probe.scene import LidarSpec, default_rig, generate_world, vehicle_pose

try:
    from calib_probe import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    out, best = None, float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def cases():
    w = generate_world(80, 15.0, seed=1, forward_extent=60.0)
    lo, hi, _ = w.box_arrays()
    pose = vehicle_pose()
    spec = LidarSpec()
    d_world = spec.ray_directions() @ pose.rotation.T
    origins = np.ascontiguousarray(np.broadcast_to(pose.translation, d_world.shape))
    d_world = np.ascontiguousarray(d_world)
    cloud = scene.lidar_scan(w, pose, spec)
    cam = default_rig()["left"]
    from calib_probe.sensor import project, project_indices

    cols, rows, depth, _ = project_indices(cloud, cam.t_lidar_to_cam, cam.intrinsics)
    k = cam.intrinsics
    raster = project(cloud, cam.t_lidar_to_cam, k).data
    return {
        "raycast (32x1024 rays, 80 boxes)": lambda m: m.raycast(origins, d_world, lo, hi, True, spec.max_range),
        "zbuffer (one scan, 160x512)": lambda m: m.zbuffer(cols, rows, depth.astype(np.float32), k.height, k.width),
        "densify_min (k=5, 160x512)": lambda m: m.densify_min(raster, 5),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; only the fallback can be timed", file=sys.stderr)
    results = []
    print(f"{'kernel':36s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  equal")
    for name, fn in cases().items():
        ref, t_py = best_of(lambda: fn(_kernels_py), args.repeat)
        row = {"kernel": name, "python_ms": 1e3 * t_py}
        if _kernels is not None:
            got, t_c = best_of(lambda: fn(_kernels), args.repeat)
            row.update(compiled_ms=1e3 * t_c, speedup=t_py / t_c, equal=bool(same(ref, got)))
            print(f"{name:36s} {1e3 * t_py:10.2f} {1e3 * t_c:12.2f} {t_py / t_c:8.1f}  {row['equal']}")
        else:
            print(f"{name:36s} {1e3 * t_py:10.2f} {'-':>12s} {'-':>8s}  -")
        results.append(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0 if all(r.get("equal", True) for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
