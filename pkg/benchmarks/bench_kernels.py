#!/usr/bin/env python3
"""Benchmark the numba-compiled kernels against their pure-numpy fallbacks.

Runs every hot kernel on representative workloads with both backends and
prints a timing table. The active package-level backend is irrelevant here;
both implementations are invoked directly.

    python benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from footfield import kernels as K
from footfield import mesh, synth
from footfield.render import auto_frame_camera, project_points


def timed(fn, *args, repeats=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if K.BACKEND != "numba":
        print("note: numba unavailable or disabled; only the numpy fallback runs")

    rng = np.random.default_rng(0)
    foot, _ = synth.build_foot(synth.mean_shape(), synth.FootPose(), quality=1.3)
    cam = auto_frame_camera(foot.vertices, [1.0, 0.4, 0.5], height=128, width=128)
    ndc, z = project_points(foot.vertices, cam)
    face_xy = np.ascontiguousarray(ndc.data[foot.faces])
    face_z = np.ascontiguousarray(z.data[:, 0][foot.faces])
    zc = face_z.mean(axis=1)
    depth = (zc - zc.min()) / (zc.max() - zc.min())
    valid = np.ones(foot.n_faces, dtype=bool)
    tri = np.ascontiguousarray(foot.vertices[foot.faces])

    cases = [
        ("nearest_neighbours 5000x5000",
         (np.ascontiguousarray(rng.random((5000, 3))),
          np.ascontiguousarray(rng.random((5000, 3)))),
         K._nn_brute_loops, K._nn_brute_numpy),
        ("kmeans_assign 20000x20x6",
         (np.ascontiguousarray(rng.random((20000, 6))),
          np.ascontiguousarray(rng.random((20, 6)))),
         K._kmeans_assign_loops, K._kmeans_assign_numpy),
        ("closest_on_mesh 1600 pts",
         (np.ascontiguousarray(rng.random((1600, 3)) * 0.25), tri),
         K._closest_on_mesh_loops, K._closest_on_mesh_numpy),
        ("select_faces 128x128 K=8",
         (face_xy, depth, valid, 128, 128, 8, 0.06),
         K._select_faces_loops, K._select_faces_numpy),
        ("hard_raster 128x128",
         (face_xy, face_z, valid, 128, 128),
         K._hard_raster_loops, K._hard_raster_numpy),
    ]

    print(f"{'kernel':34s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for name, data, loops_fn, numpy_fn in cases:
        t_numpy = timed(numpy_fn, *data, repeats=args.repeats)
        if K.BACKEND == "numba":
            t_numba = timed(loops_fn, *data, repeats=args.repeats)
            print(f"{name:34s} {t_numba * 1e3:8.2f}ms {t_numpy * 1e3:8.2f}ms "
                  f"{t_numpy / t_numba:7.1f}x")
        else:
            print(f"{name:34s} {'-':>10s} {t_numpy * 1e3:8.2f}ms {'-':>8s}")


if __name__ == "__main__":
    main()
