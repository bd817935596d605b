"""Compare the numba and numpy paths of the hot kernels.

    python benchmarks/bench_kernels.py [--repeats 5]

Inputs mirror what the pipeline feeds the kernels: a long noisy trace for
peak detection and a training set the size of the default branch model for
the kNN classifier. Each path is timed after one warm-up call, so numba
compilation is excluded, and the two outputs are checked to agree.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from scafuzz import kernels
from scafuzz._accel import HAVE_NUMBA
from scafuzz.device import default_device, execute, synthesize_trace
from scafuzz.features import PeakParams
from scafuzz.targets import generate_synthetic_program


def _best(fn, repeats):
    fn()  # warm-up (jit compile, caches)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_peaks(repeats):
    dev = default_device().with_snr(10.0)
    prog = generate_synthetic_program(1, 42)
    rec = execute(prog, bytes(prog.input_width), dev.samples_per_cycle)
    # ten concatenated runs, roughly the length of a long session trace
    x = np.concatenate([synthesize_trace(dev, rec, s).samples for s in range(10)]).astype(np.float64)
    p = PeakParams.for_device(dev)
    args = (x, p.min_separation, p.prominence, p.wlen)
    a = kernels.find_peaks(*args, use_numba=True)
    b = kernels.find_peaks(*args, use_numba=False)
    assert np.array_equal(a, b), "find_peaks paths disagree"
    t_nb = _best(lambda: kernels.find_peaks(*args, use_numba=True), repeats)
    t_np = _best(lambda: kernels.find_peaks(*args, use_numba=False), repeats)
    return f"find_peaks  n={len(x):>7d} peaks={len(a):>6d}", t_nb, t_np


def bench_knn(repeats, n_train=6000, n_query=1500, dim=24, k=3):
    rng = np.random.default_rng(0)
    train = rng.standard_normal((n_train, dim))
    labels = rng.integers(0, 15, n_train)
    queries = rng.standard_normal((n_query, dim))
    a = kernels.knn_predict(train, labels, queries, k, 15, use_numba=True)
    b = kernels.knn_predict(train, labels, queries, k, 15, use_numba=False)
    assert np.array_equal(a, b), "knn_predict paths disagree"
    t_nb = _best(lambda: kernels.knn_predict(train, labels, queries, k, 15, use_numba=True), repeats)
    t_np = _best(lambda: kernels.knn_predict(train, labels, queries, k, 15, use_numba=False), repeats)
    return f"knn_predict train={n_train} queries={n_query} dim={dim}", t_nb, t_np


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; both columns time the numpy path")
    print(f"{'kernel':<48s} {'numba [ms]':>11s} {'numpy [ms]':>11s} {'speedup':>8s}")
    for name, t_nb, t_np in (bench_peaks(args.repeats), bench_knn(args.repeats)):
        print(f"{name:<48s} {1e3 * t_nb:11.2f} {1e3 * t_np:11.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
