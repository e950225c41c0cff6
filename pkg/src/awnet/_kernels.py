"""Hot numeric loops with a numba path and a pure-numpy fallback.

The numba kernels are used when numba imports cleanly and the environment
variable ``AWNET_DISABLE_NUMBA`` is unset (or ``0``).  Both paths compute
the same arithmetic in the same order, so results agree bit for bit on the
integer kernels and to float64 rounding on the interpolation kernels.
"""
import os

import numpy as np

_DISABLED = os.environ.get("AWNET_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAS_NUMBA = False


def backend():
    return "numba" if HAS_NUMBA else "numpy"


# --------------------------------------------------------------------------
# pure numpy implementations
# --------------------------------------------------------------------------


def _gather_patches_np(image, origins, size):
    c = image.shape[0]
    n = origins.shape[0]
    out = np.empty((n, c, size, size), dtype=image.dtype)
    for k in range(n):
        r, col = origins[k]
        out[k] = image[:, r:r + size, col:col + size]
    return out


def _accumulate_patches_np(total, count, preds, origins):
    size = preds.shape[-1]
    for k in range(origins.shape[0]):
        r, c = origins[k]
        total[r:r + size, c:c + size] += preds[k]
        count[r:r + size, c:c + size] += 1


def _confusion_counts_np(pred, truth, fov):
    inside = fov != 0
    p = pred[inside] != 0
    t = truth[inside] != 0
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(inside.sum()) - tp - fp - fn
    return tp, fp, tn, fn


def _reflect_np(idx, n):
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _remap_linear_np(image, rows, cols):
    h, w = image.shape
    y0 = np.floor(rows)
    x0 = np.floor(cols)
    dy = rows - y0
    dx = cols - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    ya = _reflect_np(y0, h)
    yb = _reflect_np(y0 + 1, h)
    xa = _reflect_np(x0, w)
    xb = _reflect_np(x0 + 1, w)
    top = (1.0 - dx) * image[ya, xa] + dx * image[ya, xb]
    bot = (1.0 - dx) * image[yb, xa] + dx * image[yb, xb]
    return (1.0 - dy) * top + dy * bot


def _remap_nearest_np(image, rows, cols):
    h, w = image.shape
    y = _reflect_np(np.floor(rows + 0.5).astype(np.int64), h)
    x = _reflect_np(np.floor(cols + 0.5).astype(np.int64), w)
    return image[y, x]


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _gather_patches_nb(image, origins, size):
        c = image.shape[0]
        n = origins.shape[0]
        out = np.empty((n, c, size, size), dtype=image.dtype)
        for k in range(n):
            r0 = origins[k, 0]
            c0 = origins[k, 1]
            for ch in range(c):
                for i in range(size):
                    for j in range(size):
                        out[k, ch, i, j] = image[ch, r0 + i, c0 + j]
        return out

    @njit(cache=True)
    def _accumulate_patches_nb(total, count, preds, origins):
        size = preds.shape[-1]
        for k in range(origins.shape[0]):
            r0 = origins[k, 0]
            c0 = origins[k, 1]
            for i in range(size):
                for j in range(size):
                    total[r0 + i, c0 + j] += preds[k, i, j]
                    count[r0 + i, c0 + j] += 1

    @njit(cache=True)
    def _confusion_counts_nb(pred, truth, fov):
        tp = 0
        fp = 0
        tn = 0
        fn = 0
        flat_p = pred.ravel()
        flat_t = truth.ravel()
        flat_f = fov.ravel()
        for i in range(flat_f.shape[0]):
            if flat_f[i] == 0:
                continue
            p = flat_p[i] != 0
            t = flat_t[i] != 0
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
        return tp, fp, tn, fn

    @njit(cache=True, inline="always")
    def _reflect_nb(i, n):
        if n == 1:
            return 0
        period = 2 * n - 2
        i = abs(i) % period
        if i >= n:
            i = period - i
        return i

    @njit(cache=True)
    def _remap_linear_nb(image, rows, cols):
        h, w = image.shape
        out = np.empty(rows.shape, dtype=np.float64)
        for r in range(rows.shape[0]):
            for c in range(rows.shape[1]):
                yf = np.floor(rows[r, c])
                xf = np.floor(cols[r, c])
                dy = rows[r, c] - yf
                dx = cols[r, c] - xf
                y0 = int(yf)
                x0 = int(xf)
                ya = _reflect_nb(y0, h)
                yb = _reflect_nb(y0 + 1, h)
                xa = _reflect_nb(x0, w)
                xb = _reflect_nb(x0 + 1, w)
                top = (1.0 - dx) * image[ya, xa] + dx * image[ya, xb]
                bot = (1.0 - dx) * image[yb, xa] + dx * image[yb, xb]
                out[r, c] = (1.0 - dy) * top + dy * bot
        return out

    @njit(cache=True)
    def _remap_nearest_nb(image, rows, cols):
        h, w = image.shape
        out = np.empty(rows.shape, dtype=image.dtype)
        for r in range(rows.shape[0]):
            for c in range(rows.shape[1]):
                y = _reflect_nb(int(np.floor(rows[r, c] + 0.5)), h)
                x = _reflect_nb(int(np.floor(cols[r, c] + 0.5)), w)
                out[r, c] = image[y, x]
        return out


# --------------------------------------------------------------------------
# public dispatchers
# --------------------------------------------------------------------------


def gather_patches(image, origins, size, use_numba=False):
    """Copy ``size``-square windows out of a (C, H, W) array at ``origins``.

    Defaults to the numpy path: the copy is memory-bound and numpy's slice
    copies beat the jitted loop (see benchmarks/bench_kernels.py).
    """
    origins = np.ascontiguousarray(origins, dtype=np.int64)
    image = np.ascontiguousarray(image)
    if _pick(use_numba):
        return _gather_patches_nb(image, origins, size)
    return _gather_patches_np(image, origins, size)


def accumulate_patches(total, count, preds, origins, use_numba=None):
    """Add each (size, size) prediction into ``total`` and bump ``count``.

    Patches are added in the order given, so any contiguous batching of the
    same ordered patch list yields identical sums.
    """
    origins = np.ascontiguousarray(origins, dtype=np.int64)
    preds = np.ascontiguousarray(preds, dtype=total.dtype)
    if _pick(use_numba):
        _accumulate_patches_nb(total, count, preds, origins)
    else:
        _accumulate_patches_np(total, count, preds, origins)


def confusion_counts(pred, truth, fov, use_numba=None):
    pred = np.ascontiguousarray(pred, dtype=np.uint8)
    truth = np.ascontiguousarray(truth, dtype=np.uint8)
    fov = np.ascontiguousarray(fov, dtype=np.uint8)
    if _pick(use_numba):
        return tuple(int(v) for v in _confusion_counts_nb(pred, truth, fov))
    return _confusion_counts_np(pred, truth, fov)


def remap(image, rows, cols, order=1, use_numba=None):
    """Sample ``image`` at fractional (rows, cols) with reflect-101 borders.

    ``order=1`` is bilinear and returns float64; ``order=0`` is nearest and
    keeps the input dtype.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    nb = _pick(use_numba)
    if order == 1:
        image = np.ascontiguousarray(image, dtype=np.float64)
        return _remap_linear_nb(image, rows, cols) if nb else _remap_linear_np(image, rows, cols)
    if order == 0:
        image = np.ascontiguousarray(image)
        return _remap_nearest_nb(image, rows, cols) if nb else _remap_nearest_np(image, rows, cols)
    raise ValueError(f"unsupported interpolation order {order}")


def _pick(use_numba):
    if use_numba is None:
        return HAS_NUMBA
    if use_numba and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but unavailable")
    return bool(use_numba)
