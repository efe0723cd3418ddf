"""Benchmark the numba kernels against their pure-Python fallbacks.

Run: python benchmarks/bench_kernels.py [--repeat N]

Times the assignment solve and the oriented-box clipping volume on seeded
workloads and prints per-call timings for both backends. The jit columns are
skipped when numba is unavailable.
"""

import argparse
import time

import numpy as np

from pixelbox import _kernels as K
from pixelbox.geometry import CUBE_TEMPLATE
from pixelbox.synth import random_rotation


def _time(fn, payloads, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for args in payloads:
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / len(payloads))
    return best


def bench_assignment(repeat):
    rng = np.random.default_rng(0)
    for n in (8, 32, 128):
        payloads = [(rng.uniform(0.0, 10.0, size=(n, n)),) for _ in range(30)]
        t_py = _time(K.assignment_py, payloads, repeat)
        row = f"assignment {n:>4}x{n:<4} python {t_py * 1e6:10.1f} us"
        if K.assignment_jit is not None:
            K.assignment_jit(payloads[0][0])  # compile outside the timing
            t_jit = _time(K.assignment_jit, payloads, repeat)
            row += f"   numba {t_jit * 1e6:10.1f} us   speedup {t_py / t_jit:6.1f}x"
        print(row)


def bench_clip_volume(repeat):
    rng = np.random.default_rng(1)
    payloads = []
    for _ in range(200):
        verts = (CUBE_TEMPLATE * rng.uniform(0.4, 2.0, 3)) @ random_rotation(rng).T
        verts = verts + rng.uniform(-0.5, 0.5, 3)
        payloads.append((np.ascontiguousarray(verts), rng.uniform(0.3, 1.2, 3)))
    t_py = _time(K.box_clip_volume_py, payloads, repeat)
    row = f"clip_volume  8v/6pl  python {t_py * 1e6:10.1f} us"
    if K.box_clip_volume_jit is not None:
        K.box_clip_volume_jit(*payloads[0])
        t_jit = _time(K.box_clip_volume_jit, payloads, repeat)
        row += f"   numba {t_jit * 1e6:10.1f} us   speedup {t_py / t_jit:6.1f}x"
    print(row)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"numba available: {K.NUMBA_AVAILABLE}; selected backend: "
          f"{'numba' if K.USING_NUMBA else 'python'} (PIXELBOX_NUMBA to override)")
    bench_assignment(args.repeat)
    bench_clip_volume(args.repeat)


if __name__ == "__main__":
    main()
