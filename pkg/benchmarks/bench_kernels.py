"""Compare the compiled kernels against the numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [--quick]

Times the three hot kernels on representative workloads and prints a table
with the speedup of the compiled extension. Requires the extension to be
built (python setup.py build_ext --inplace).
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np
from scipy import ndimage


def build_workloads(quick: bool):
    rng = np.random.default_rng(0)
    size = 48 if quick else 96
    field = ndimage.gaussian_filter(rng.random((size, size, size)), 3.0)
    mask = (field > np.quantile(field, 0.75)).astype(np.uint8)
    values = np.pad(mask.astype(np.float64), 1)

    from mitoforge import _kernels_py
    from mitoforge.mesh import TriangleMesh

    tri_edges = _kernels_py.mc_collect(values, 0.5)
    uniq, inv = np.unique(tri_edges.ravel(), return_inverse=True)
    # vertex positions are irrelevant for timing; decode roughly
    ny, nz = values.shape[1], values.shape[2]
    axis = uniq % 3
    rest = uniq // 3
    coords = np.stack([rest // (ny * nz), (rest // nz) % ny, rest % nz], axis=1).astype(float)
    coords[np.arange(len(uniq)), axis] += 0.5
    mesh = TriangleMesh(coords * 24.0, inv.reshape(-1, 3))

    n_pts = 20_000 if quick else 100_000
    lo, hi = mesh.bounds()
    pts = rng.uniform(lo, hi, size=(n_pts, 3))
    diag = mesh.bbox_diagonal()

    cc_size = 64 if quick else 128
    cc_mask = (rng.random((cc_size, cc_size, cc_size)) < 0.3).astype(np.uint8)

    return {
        "mc_collect": ((values, 0.5), {}),
        "ray_crossings": (
            (mesh.vertices, mesh.triangles, pts, 1e-9 * diag, 1e-12 * diag * diag, 1e-9 * diag),
            {},
        ),
        "label_components": ((cc_mask, 26), {}),
    }


def time_call(fn, args, kwargs, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args, **kwargs)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="smaller workloads")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)

    from mitoforge import _kernels_py

    try:
        from mitoforge import _kernels_cy
    except ImportError:
        print("compiled extension not built; run: python setup.py build_ext --inplace")
        return 1

    workloads = build_workloads(args.quick)
    print(f"{'kernel':<18} {'python':>10} {'cython':>10} {'speedup':>9}")
    print("-" * 50)
    for name, (wargs, wkwargs) in workloads.items():
        t_py = time_call(getattr(_kernels_py, name), wargs, wkwargs, args.repeats)
        t_cy = time_call(getattr(_kernels_cy, name), wargs, wkwargs, args.repeats)
        print(f"{name:<18} {t_py * 1e3:>8.1f}ms {t_cy * 1e3:>8.1f}ms {t_py / t_cy:>8.1f}x")

    # sanity: same results on the ray workload
    wargs, _ = workloads["ray_crossings"]
    c_py, f_py = _kernels_py.ray_crossings(*wargs)
    c_cy, f_cy = _kernels_cy.ray_crossings(*wargs)
    agree = (c_py == c_cy).all() and (f_py == f_cy).all()
    print(f"\nbackend agreement on ray workload: {bool(agree)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
