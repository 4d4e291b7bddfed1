#!/usr/bin/env python3
"""Time the hot kernels under both backends (numba JIT vs pure NumPy).

Usage: python benchmarks/bench_backends.py [--repeat N] [--cells N] [--samples N]
"""

import argparse
import time

import numpy as np

from coopdet.backend import available_backends, get_backend


def make_inputs(rng, n_cells, channels, h, w):
    lin = rng.choice(h * w, size=min(n_cells, h * w), replace=False)
    idx = np.stack([lin // w, lin % w], axis=1).astype(np.int64)
    feats = rng.normal(size=(idx.shape[0], channels))
    kw = rng.normal(size=(9, channels, channels)) * 0.1
    kb = rng.normal(size=channels) * 0.01
    scores = rng.uniform(0, 1, idx.shape[0])
    return idx, feats, kw, kb, scores


def timed(fn, repeat):
    fn()  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--cells", type=int, default=4000)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--grid", type=int, default=256)
    ap.add_argument("--samples", type=int, default=1_000_000)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    h = w = args.grid
    idx, feats, kw, kb, scores = make_inputs(rng, args.cells, args.channels, h, w)
    box_a = np.array([0.0, 0.0, 2.0, 4.5, 0.4])
    box_b = np.array([0.8, 0.4, 2.0, 4.5, -0.3])

    workloads = {
        "conv_active (stride 2)": lambda k: k.conv_active(
            idx, feats, kw, kb, 2, (h - 1) // 2 + 1, (w - 1) // 2 + 1
        ),
        "subm_active": lambda k: k.subm_active(idx, feats, kw, kb, h, w),
        "maxpool_keep (win 5)": lambda k: k.maxpool_keep(idx, scores, 5, h, w),
        "mc_iou (1e6 samples)": lambda k: k.mc_iou(box_a, box_b, args.samples, 7),
    }

    backends = available_backends()
    print(f"active cells: {idx.shape[0]}, channels: {args.channels}, grid {h}x{w}, "
          f"repeat {args.repeat}")
    header = f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, work in workloads.items():
        times = {}
        for bname in backends:
            k = get_backend(bname)
            times[bname] = timed(lambda: work(k), args.repeat)
        row = f"{name:<24}" + "".join(f"{times[b]*1000:>10.2f}ms" for b in backends)
        if "numpy" in times and "numba" in times:
            row += f"{times['numpy'] / times['numba']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
