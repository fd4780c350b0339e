"""Time the compiled kernels against the numpy fallback.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat R]``. Each kernel is
run on identical inputs with both backends; outputs are checked to agree
before timings are reported.
"""

import argparse
import time

import numpy as np

from kpeflow.kernels import available_backends, get_backend


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(rng):
    a = rng.standard_normal((16, 16))
    sym = np.ascontiguousarray(a + a.T)
    cost = np.ascontiguousarray(rng.random((128, 128)))
    pts = np.ascontiguousarray(rng.standard_normal((2000, 2)))
    h = np.array([0.2, 0.2])
    return {
        "jacobi_eigh 16x16": (lambda k: k.jacobi_eigh(sym), lambda x, y: np.allclose(x[0], y[0], atol=1e-10)),
        "hungarian 128x128": (lambda k: k.hungarian(cost), lambda x, y: np.array_equal(x, y)),
        "knn k=50, n=2000": (lambda k: k.knn_kth_distance(pts, pts, 50, True), lambda x, y: np.allclose(x, y, rtol=1e-12)),
        "kde n=2000": (lambda k: k.kde_log_density(pts, pts, h, False), lambda x, y: np.allclose(x, y, rtol=1e-10)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if "cython" not in available_backends():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    cy, py = get_backend("cython"), get_backend("python")
    print(f"{'kernel':<22} {'cython (s)':>11} {'python (s)':>11} {'speedup':>8}")
    for name, (run, agree) in cases(np.random.default_rng(0)).items():
        tc, oc = best_of(lambda: run(cy), args.repeat)
        tp, op = best_of(lambda: run(py), args.repeat)
        if not agree(oc, op):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<22} {tc:11.4f} {tp:11.4f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
