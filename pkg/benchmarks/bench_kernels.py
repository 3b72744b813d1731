"""Time the compiled and numpy shading backends on a bundled scene.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from dpillum import kernels
from dpillum.render import render, render_loss_and_grads
from dpillum.scenes import load_bundled


def bench(fn, repeat):
    fn()  # warm caches
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scene", default="toy_inversion")
    args = ap.parse_args()
    b = load_bundled(args.scene)
    env, mat = b.gt_env, b.gt_mat
    views = b.train_views
    results = {}
    ref = {}
    for name in kernels.available():
        kernels.use_backend(name)
        fwd = bench(lambda: render(b.scene, env, mat, 0, b.render), args.repeat)
        grad = bench(lambda: render_loss_and_grads(b.scene, env, mat, views, b.render), args.repeat)
        results[name] = (fwd, grad)
        ref[name] = render_loss_and_grads(b.scene, env, mat, views, b.render).env
    print(f"{'backend':10s} {'render 1 view':>16s} {'loss+grads':>16s}")
    for name, (fwd, grad) in results.items():
        print(f"{name:10s} {fwd * 1e3:13.2f} ms {grad * 1e3:13.2f} ms")
    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print(f"speedup: render {py[0] / cy[0]:.1f}x, loss+grads {py[1] / cy[1]:.1f}x")
        diff = np.max(np.abs(ref["python"] - ref["cython"]))
        print(f"max env-gradient difference between backends: {diff:.3g}")


if __name__ == "__main__":
    main()
