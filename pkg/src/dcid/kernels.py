"""Pixel- and point-level inner loops.

Every kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version. The public name dispatches to numba unless ``DCID_DISABLE_NUMBA`` is
set (see :mod:`dcid._accel`). Both paths are kept numerically equivalent and
are compared in ``tests/test_kernels.py`` and ``benchmarks/bench_kernels.py``.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

__all__ = ["bilinear_sample", "greedy_nms", "ransac_scores", "HAVE_NUMBA"]


# --------------------------------------------------------------------------
# bilinear sampling with validity mask
# --------------------------------------------------------------------------

@njit(cache=True)
def _bilinear_sample_numba(img, xs, ys):
    H, W, C = img.shape
    h, w = xs.shape
    out = np.zeros((h, w, C), dtype=np.float64)
    valid = np.zeros((h, w), dtype=np.bool_)
    xmax = W - 1.0
    ymax = H - 1.0
    for i in range(h):
        for j in range(w):
            x = xs[i, j]
            y = ys[i, j]
            if not (x >= 0.0 and x <= xmax and y >= 0.0 and y <= ymax):
                continue
            valid[i, j] = True
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            if x0 > W - 2:
                x0 = W - 2
            if y0 > H - 2:
                y0 = H - 2
            fx = x - x0
            fy = y - y0
            w00 = (1.0 - fx) * (1.0 - fy)
            w01 = fx * (1.0 - fy)
            w10 = (1.0 - fx) * fy
            w11 = fx * fy
            for c in range(C):
                out[i, j, c] = (w00 * img[y0, x0, c] + w01 * img[y0, x0 + 1, c]
                                + w10 * img[y0 + 1, x0, c] + w11 * img[y0 + 1, x0 + 1, c])
    return out, valid


def _bilinear_sample_numpy(img, xs, ys):
    H, W, C = img.shape
    valid = (xs >= 0.0) & (xs <= W - 1.0) & (ys >= 0.0) & (ys <= H - 1.0)
    xv = np.where(valid, xs, 0.0)
    yv = np.where(valid, ys, 0.0)
    x0 = np.minimum(np.floor(xv).astype(np.int64), W - 2)
    y0 = np.minimum(np.floor(yv).astype(np.int64), H - 2)
    fx = (xv - x0)[..., None]
    fy = (yv - y0)[..., None]
    out = ((1.0 - fx) * (1.0 - fy) * img[y0, x0] + fx * (1.0 - fy) * img[y0, x0 + 1]
           + (1.0 - fx) * fy * img[y0 + 1, x0] + fx * fy * img[y0 + 1, x0 + 1])
    out[~valid] = 0.0
    return out, valid


def bilinear_sample(img, xs, ys):
    """Sample ``img`` (H, W, C) at float coordinates ``xs``/``ys`` (h, w).

    Returns ``(out, valid)``; samples outside ``[0, W-1] x [0, H-1]`` are 0 and
    flagged invalid. Integer coordinates reproduce source pixels exactly.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise ValueError("bilinear_sample needs a source of at least 2x2 pixels")
    if HAVE_NUMBA:
        return _bilinear_sample_numba(img, xs, ys)
    return _bilinear_sample_numpy(img, xs, ys)


# --------------------------------------------------------------------------
# greedy non-maximum suppression with a minimum spacing
# --------------------------------------------------------------------------

@njit(cache=True)
def _greedy_nms_numba(xs, ys, min_dist, max_n):
    n = xs.shape[0]
    keep = np.empty(min(n, max_n), dtype=np.int64)
    k = 0
    d2 = min_dist * min_dist
    for i in range(n):
        if k >= max_n:
            break
        ok = True
        for j in range(k):
            dx = xs[i] - xs[keep[j]]
            dy = ys[i] - ys[keep[j]]
            if dx * dx + dy * dy < d2:
                ok = False
                break
        if ok:
            keep[k] = i
            k += 1
    return keep[:k]


def _greedy_nms_numpy(xs, ys, min_dist, max_n):
    keep = []
    kx = np.empty(0)
    ky = np.empty(0)
    d2 = min_dist * min_dist
    for i in range(xs.shape[0]):
        if len(keep) >= max_n:
            break
        if kx.size and np.any((xs[i] - kx) ** 2 + (ys[i] - ky) ** 2 < d2):
            continue
        keep.append(i)
        kx = xs[np.asarray(keep)]
        ky = ys[np.asarray(keep)]
    return np.asarray(keep, dtype=np.int64)


def greedy_nms(xs, ys, min_dist, max_n):
    """Indices of candidates kept by greedy suppression.

    Candidates must already be sorted by descending score. A candidate is
    kept when it lies at least ``min_dist`` (Euclidean) from every kept one.
    """
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    if HAVE_NUMBA:
        return _greedy_nms_numba(xs, ys, float(min_dist), int(max_n))
    return _greedy_nms_numpy(xs, ys, float(min_dist), int(max_n))


# --------------------------------------------------------------------------
# RANSAC hypothesis scoring
# --------------------------------------------------------------------------

@njit(cache=True)
def _ransac_scores_numba(hs, src, dst, thresh):
    n = hs.shape[0]
    m = src.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    cost = np.zeros(n, dtype=np.float64)
    t2 = thresh * thresh
    for k in range(n):
        h = hs[k]
        c = 0
        s = 0.0
        for i in range(m):
            x = src[i, 0]
            y = src[i, 1]
            wz = h[2, 0] * x + h[2, 1] * y + h[2, 2]
            if wz == 0.0:
                s += t2
                continue
            px = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / wz
            py = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / wz
            e = (px - dst[i, 0]) ** 2 + (py - dst[i, 1]) ** 2
            if e < t2:
                c += 1
                s += e
            else:
                s += t2
        counts[k] = c
        cost[k] = s
    return counts, cost


def _ransac_scores_numpy(hs, src, dst, thresh):
    t2 = thresh * thresh
    ph = np.concatenate([src, np.ones((src.shape[0], 1))], axis=1)
    proj = np.einsum("kij,mj->kmi", hs, ph)
    wz = proj[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = proj[..., 0] / wz
        py = proj[..., 1] / wz
        e = (px - dst[None, :, 0]) ** 2 + (py - dst[None, :, 1]) ** 2
    inl = (wz != 0.0) & (e < t2)
    counts = inl.sum(axis=1).astype(np.int64)
    cost = np.where(inl, e, t2).sum(axis=1)
    return counts, cost


def ransac_scores(hs, src, dst, thresh):
    """Inlier counts and truncated squared-error cost (MSAC) per hypothesis.

    ``hs`` is (n, 3, 3) mapping ``src`` (m, 2) onto ``dst`` (m, 2).
    """
    hs = np.ascontiguousarray(hs, dtype=np.float64)
    src = np.ascontiguousarray(src, dtype=np.float64)
    dst = np.ascontiguousarray(dst, dtype=np.float64)
    if HAVE_NUMBA:
        return _ransac_scores_numba(hs, src, dst, float(thresh))
    return _ransac_scores_numpy(hs, src, dst, float(thresh))
