"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Inputs are DRIVE-sized: one 588 x 568 padded raster, the full stride-5
grid of 48 x 48 patches (11,445), and 48 x 48 warps for augmentation.
"""
import argparse
import time

import numpy as np

from awnet import _kernels


def timeit(fn, repeat):
    fn()  # warm-up (JIT compile on the numba path)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        print("numba unavailable or disabled (AWNET_DISABLE_NUMBA); only the numpy path is timed")

    rng = np.random.default_rng(0)
    image = rng.random((1, 588, 568), dtype=np.float32)
    rows, cols = np.meshgrid(np.arange(0, 541, 5), np.arange(0, 521, 5), indexing="ij")
    origins = np.stack([rows.ravel(), cols.ravel()], 1).astype(np.int64)
    preds = rng.random((len(origins), 48, 48))
    pred_mask = (rng.random((584, 565)) > 0.5).astype(np.uint8)
    truth = (rng.random((584, 565)) > 0.9).astype(np.uint8)
    fov = (rng.random((584, 565)) > 0.3).astype(np.uint8)
    patch = rng.random((48, 48))
    r, c = np.mgrid[0:48, 0:48].astype(np.float64)
    wr, wc = r + rng.normal(0, 1.5, r.shape), c + rng.normal(0, 1.5, c.shape)

    def accumulate(use):
        total = np.zeros((588, 568))
        count = np.zeros((588, 568), dtype=np.int64)
        _kernels.accumulate_patches(total, count, preds, origins, use_numba=use)

    cases = {
        "gather_patches (11445 x 48x48)": lambda use: _kernels.gather_patches(image, origins, 48, use_numba=use),
        "accumulate_patches (11445)": accumulate,
        "confusion_counts (584x565)": lambda use: _kernels.confusion_counts(pred_mask, truth, fov, use_numba=use),
        "remap bilinear (48x48) x200": lambda use: [_kernels.remap(patch, wr, wc, 1, use_numba=use)
                                                     for _ in range(200)],
        "remap nearest (48x48) x200": lambda use: [_kernels.remap(patch, wr, wc, 0, use_numba=use)
                                                    for _ in range(200)],
    }
    print(f"{'kernel':<32} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8}")
    for name, fn in cases.items():
        t_np = timeit(lambda: fn(False), args.repeat) * 1e3
        if _kernels.HAS_NUMBA:
            t_nb = timeit(lambda: fn(True), args.repeat) * 1e3
            print(f"{name:<32} {t_np:11.2f} {t_nb:11.2f} {t_np / t_nb:7.1f}x")
        else:
            print(f"{name:<32} {t_np:11.2f} {'-':>11} {'-':>8}")


if __name__ == "__main__":
    main()
