"""Compiled vs numpy-fallback kernels on the renderer and density grid.

    python3 benchmarks/bench_render.py [--gaussians 64 256] [--size 64] [--repeat 5]

Reports the best-of-N wall time per backend and the speedup, and checks that
both backends agree on the outputs.
"""
import argparse
import time

import numpy as np

from sugarsplat.camera import orbit_camera
from sugarsplat.mesh import density_grid
from sugarsplat.render import COMPILED_AVAILABLE, RenderAdjoint, cloud_gradients, render
from sugarsplat.scene import GaussianCloud, normalize_quaternions


def make_cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.4, 0.9, n)
    return GaussianCloud(rng.uniform(-0.3, 0.3, (n, 3)), normalize_quaternions(rng.normal(size=(n, 4))),
                         np.log(rng.uniform(0.03, 0.08, (n, 3))), np.log(p / (1 - p)), rng.random((n, 3)))


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def cases(n, size):
    cloud = make_cloud(n)
    view = orbit_camera(30, 20, 1.3, 50, size)
    rng = np.random.default_rng(1)
    adj = RenderAdjoint(color=rng.normal(size=(size, size, 3)), normal=rng.normal(size=(size, size, 3)))
    return {
        f"render {n}g {size}px": lambda b: render(cloud, view, (1, 1, 1), backend=b).color,
        f"backward {n}g {size}px": lambda b: cloud_gradients(cloud, view, (1, 1, 1), adj, b)["centers"],
        f"density {n}g 48^3": lambda b: density_grid(cloud, 48, backend=b)[0],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, nargs="+", default=[64, 256])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not COMPILED_AVAILABLE:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    print(f"{'case':<24}{'python s':>11}{'compiled s':>12}{'speedup':>9}{'max diff':>11}")
    for n in args.gaussians:
        for name, fn in cases(n, args.size).items():
            tp, out_p = best_of(lambda: fn("python"), args.repeat)
            tc, out_c = best_of(lambda: fn("compiled"), args.repeat)
            diff = float(np.max(np.abs(np.asarray(out_p) - np.asarray(out_c))))
            print(f"{name:<24}{tp:>11.4f}{tc:>12.4f}{tp / tc:>8.1f}x{diff:>11.1e}")


if __name__ == "__main__":
    main()
