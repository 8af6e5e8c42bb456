"""Image-level UW -> W alignment from sparse keypoints.

Corners are detected on x4 area-downsampled luma, described by normalised
8x8 intensity patches, matched by mutual nearest neighbour with a ratio
test, and fed to a seeded RANSAC homography fit. When that yields no model,
W's corners are searched for directly in the zoom-prior view by coarse-to-fine
NCC. Detector and matcher are plain callables so learned replacements can be
swapped in through :class:`KmaConfig`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage, optimize

from .imagery import (GeometryError, Homography, corner_error, downsample_area, gaussian_blur, resize, to_gray,
                      warp_projective)
from .kernels import bilinear_sample, greedy_nms, ransac_scores


class AlignmentError(RuntimeError):
    pass


@dataclass
class Keypoint:
    x: float
    y: float
    score: float
    descriptor: np.ndarray


@dataclass
class MatchSet:
    """One-to-one (index_a, index_b, distance) correspondences."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def sorted(self) -> "MatchSet":
        return MatchSet(sorted(self.pairs, key=lambda p: p[2]))

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.pairs:
            return np.zeros(0, int), np.zeros(0, int)
        a, b, _ = zip(*self.pairs)
        return np.asarray(a, dtype=int), np.asarray(b, dtype=int)


@dataclass
class RansacConfig:
    inlier_threshold: float = 3.0
    max_iterations: int = 1000
    min_inliers: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")


# --------------------------------------------------------------------------
# detection
# --------------------------------------------------------------------------

PATCH = 8


def _min_eigen_response(gray: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode="reflect") / 8.0
    gy = ndimage.sobel(gray, axis=0, mode="reflect") / 8.0
    sxx = gaussian_blur(gx * gx, 1.0)
    syy = gaussian_blur(gy * gy, 1.0)
    sxy = gaussian_blur(gx * gy, 1.0)
    half_tr = 0.5 * (sxx + syy)
    return half_tr - np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy ** 2, 0.0))


def _patch_descriptors(gray: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    offs = np.arange(PATCH, dtype=np.float64) - (PATCH - 1) / 2.0
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    sx = xs[:, None] + ox.ravel()[None]
    sy = ys[:, None] + oy.ravel()[None]
    vals, _ = bilinear_sample(gray[..., None], sx, sy)
    d = vals[..., 0]
    d = d - d.mean(axis=1, keepdims=True)
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.maximum(n, 1e-12)


def _forstner(gray, cx, cy, radius: int = 3, max_shift: float = 1.5):
    """Sub-pixel corners: least-squares intersection of local gradient lines."""
    gx = ndimage.sobel(gray, axis=1, mode="reflect") / 8.0
    gy = ndimage.sobel(gray, axis=0, mode="reflect") / 8.0
    H, W = gray.shape
    off = np.arange(-radius, radius + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    wgt = np.exp(-0.5 * (ox ** 2 + oy ** 2) / (0.6 * radius) ** 2).ravel()
    X = np.clip(cx[:, None] + ox.ravel()[None], 0, W - 1)
    Y = np.clip(cy[:, None] + oy.ravel()[None], 0, H - 1)
    a, b = gx[Y, X] * wgt, gy[Y, X]
    sxx, syy, sxy = (a * gx[Y, X]).sum(1), (gy[Y, X] * b * wgt).sum(1), (a * b).sum(1)
    bx = (a * gx[Y, X] * X + a * b * Y).sum(1)
    by = (a * b * X + b * b * wgt * Y).sum(1)
    det = sxx * syy - sxy ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        px = (syy * bx - sxy * by) / det
        py = (sxx * by - sxy * bx) / det
    ok = np.isfinite(px) & np.isfinite(py) & (det > 1e-12 * (sxx + syy) ** 2)
    ok &= (np.abs(px - cx) <= max_shift) & (np.abs(py - cy) <= max_shift)
    return np.where(ok, px, cx).astype(np.float64), np.where(ok, py, cy).astype(np.float64)


def detect_keypoints(img, max_n: int = 256, downsample: int = 4, min_spacing: float = 2.0) -> list[Keypoint]:
    """Shi-Tomasi corners found on the ``downsample``-reduced luma image.

    Positions are reported in full-resolution pixel coordinates, ordered by
    descending response, at least ``min_spacing`` downsampled pixels apart.
    """
    gray = to_gray(img)
    H, W = gray.shape
    if H < 32 or W < 32:
        raise ValueError(f"image too small for keypoint detection: {(H, W)}")
    k = int(downsample)
    if H % k == 0 and W % k == 0:
        small = downsample_area(gray, k)
    else:
        small = resize(gray, out_size=(round(H / k), round(W / k)), mode="area")
    small = gaussian_blur(small, 0.5)
    resp = _min_eigen_response(small)
    peak = resp.max()
    if not peak > 1e-8:
        return []
    local_max = resp == ndimage.maximum_filter(resp, size=3, mode="constant", cval=-np.inf)
    m = PATCH // 2 + 1
    border = np.zeros_like(local_max)
    border[m:-m, m:-m] = True
    cand = local_max & border & (resp > 1e-3 * peak) & (resp > 1e-8)
    cy, cx = np.nonzero(cand)
    if cy.size == 0:
        return []
    scores = resp[cy, cx]
    order = np.argsort(-scores, kind="stable")
    cy, cx, scores = cy[order], cx[order], scores[order]
    keep = greedy_nms(cx.astype(float), cy.astype(float), min_spacing, max_n)
    cy, cx, scores = cy[keep], cx[keep], scores[keep]

    fx, fy = _forstner(small, cx, cy)
    desc = _patch_descriptors(small, fx, fy)
    X = (fx + 0.5) * k - 0.5
    Y = (fy + 0.5) * k - 0.5
    return [Keypoint(float(X[i]), float(Y[i]), float(scores[i]), desc[i]) for i in range(len(keep))]


def keypoint_arrays(kps: list[Keypoint]) -> tuple[np.ndarray, np.ndarray]:
    if not kps:
        return np.zeros((0, 2)), np.zeros((0, PATCH * PATCH))
    pos = np.array([[k.x, k.y] for k in kps], dtype=np.float64)
    desc = np.stack([k.descriptor for k in kps])
    return pos, desc


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------

def match_keypoints(a: list[Keypoint], b: list[Keypoint], ratio: float = 0.8,
                    max_displacement: float | None = None) -> MatchSet:
    """Mutual nearest neighbours in descriptor space passing Lowe's ratio test.

    ``max_displacement`` (pixels) optionally gates candidates to pairs whose
    positions are that close, for images already roughly registered.
    """
    if not a or not b:
        return MatchSet()
    pa, da = keypoint_arrays(a)
    pb, db = keypoint_arrays(b)
    d2 = (da ** 2).sum(1)[:, None] + (db ** 2).sum(1)[None] - 2.0 * da @ db.T
    D = np.sqrt(np.maximum(d2, 0.0))
    if max_displacement is not None:
        far = np.linalg.norm(pa[:, None] - pb[None], axis=2) > max_displacement
        D[far] = np.inf
    nn_ab = np.argmin(D, axis=1)
    nn_ba = np.argmin(D, axis=0)
    pairs = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i or not np.isfinite(D[i, j]):
            continue
        d1 = D[i, j]
        if D.shape[1] > 1:
            row = D[i].copy()
            row[j] = np.inf
            if not d1 < ratio * row.min():
                continue
        pairs.append((i, int(j), float(d1)))
    return MatchSet(pairs)


def refine_matches(img_a, img_b, pa, pb, radius: int = 6, half: int = 10,
                   blur: float = 2.0, min_ncc: float = 0.6):
    """Re-localise each ``pa[i]`` by NCC search around it for the template at ``pb[i]``.

    Runs on blurred full-resolution luma so correspondences found at the
    coarse detection scale become accurate to a fraction of a pixel.
    Returns refined ``pa`` and a keep mask (NCC peak strong and interior).
    """
    ga = gaussian_blur(to_gray(img_a), blur)[..., None]
    gb = gaussian_blur(to_gray(img_b), blur)[..., None]
    n = len(pa)
    if n == 0:
        return pa.copy(), np.zeros(0, bool)
    off = np.arange(-half, half + 1, dtype=np.float64)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    ox, oy = ox.ravel(), oy.ravel()
    T, vt = bilinear_sample(gb, pb[:, :1] + ox, pb[:, 1:] + oy)
    T = T[..., 0]
    T = T - T.mean(1, keepdims=True)
    tn = np.linalg.norm(T, axis=1)
    shifts = np.arange(-radius, radius + 1)
    score = np.full((n, shifts.size, shifts.size), -1.0)
    for i, dy in enumerate(shifts):
        for j, dx in enumerate(shifts):
            P, vp = bilinear_sample(ga, pa[:, :1] + dx + ox, pa[:, 1:] + dy + oy)
            P = P[..., 0]
            P = P - P.mean(1, keepdims=True)
            den = np.linalg.norm(P, axis=1) * tn
            ok = vp.all(1) & vt.all(1) & (den > 1e-9)
            score[ok, i, j] = (P[ok] * T[ok]).sum(1) / den[ok]
    flat = score.reshape(n, -1).argmax(1)
    bi, bj = np.unravel_index(flat, score.shape[1:])
    best = score[np.arange(n), bi, bj]
    interior = (bi > 0) & (bi < shifts.size - 1) & (bj > 0) & (bj < shifts.size - 1)
    keep = interior & (best >= min_ncc)
    out = pa.copy()
    for k in np.nonzero(keep)[0]:
        i, j = bi[k], bj[k]
        sub = []
        for c in ((score[k, i, j - 1], score[k, i, j], score[k, i, j + 1]),
                  (score[k, i - 1, j], score[k, i, j], score[k, i + 1, j])):
            den = c[0] - 2 * c[1] + c[2]
            sub.append(float(np.clip(0.5 * (c[0] - c[2]) / den, -0.5, 0.5)) if den < 0 else 0.0)
        out[k, 0] += shifts[j] + sub[0]
        out[k, 1] += shifts[i] + sub[1]
    return out, keep


def guided_matches(img_a, img_b, pb, radius: float = 32.0, downsample: int = 4, min_ncc: float = 0.6):
    """Find each point ``pb[i]`` of ``img_b`` in the roughly registered ``img_a``.

    A coarse NCC search over +/- ``radius`` pixels on ``downsample``-reduced
    images is followed by the full-resolution :func:`refine_matches` pass.
    Returns ``(pa, pb)`` for the correspondences that survive both passes.
    """
    pb = np.asarray(pb, dtype=np.float64).reshape(-1, 2)
    if len(pb) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    k = int(downsample)
    small_a, small_b = (np.repeat(_reduce(to_gray(im), k)[..., None], 3, axis=2) for im in (img_a, img_b))
    pb_small = (pb + 0.5) / k - 0.5
    coarse, keep = refine_matches(small_a, small_b, pb_small, pb_small, radius=int(np.ceil(radius / k)),
                                  half=6, blur=0.75, min_ncc=min_ncc)
    pa = (coarse[keep] + 0.5) * k - 0.5
    # wide, heavily blurred templates: moire in img_b makes small windows ambiguous
    fine, ok = refine_matches(img_a, img_b, pa, pb[keep], radius=k, half=20, blur=4.0, min_ncc=min_ncc)
    return fine[ok], pb[keep][ok]


# --------------------------------------------------------------------------
# homography fitting
# --------------------------------------------------------------------------

def _normalizer(pts: np.ndarray) -> np.ndarray:
    # Hartley: centroid to origin, mean distance sqrt(2); works on (..., n, 2)
    c = pts.mean(axis=-2, keepdims=True)
    d = np.linalg.norm(pts - c, axis=-1).mean(axis=-1)
    s = np.sqrt(2.0) / np.maximum(d, 1e-12)
    T = np.zeros(pts.shape[:-2] + (3, 3))
    T[..., 0, 0] = s
    T[..., 1, 1] = s
    T[..., 0, 2] = -s * c[..., 0, 0]
    T[..., 1, 2] = -s * c[..., 0, 1]
    T[..., 2, 2] = 1.0
    return T


def dlt_homography(src, dst) -> np.ndarray:
    """Normalised DLT. Accepts (n, 2) or batched (k, n, 2) point sets."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    Ts, Td = _normalizer(src), _normalizer(dst)
    ones = np.ones(src.shape[:-1] + (1,))
    ps = np.einsum("...ij,...nj->...ni", Ts, np.concatenate([src, ones], -1))
    pd = np.einsum("...ij,...nj->...ni", Td, np.concatenate([dst, ones], -1))
    x, y = ps[..., 0], ps[..., 1]
    u, v = pd[..., 0], pd[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], -1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], -1)
    A = np.concatenate([r1, r2], axis=-2)
    _, _, vt = np.linalg.svd(A)
    Hn = vt[..., -1, :].reshape(src.shape[:-2] + (3, 3))
    return np.linalg.inv(Td) @ Hn @ Ts


def _refine(h0: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    h0 = h0 / h0[2, 2]

    def resid(p):
        h = np.append(p, 1.0).reshape(3, 3)
        ph = src @ h[:, :2].T + h[:, 2]
        return (ph[:, :2] / ph[:, 2:3] - dst).ravel()

    sol = optimize.least_squares(resid, h0.ravel()[:8], method="lm", x_scale="jac")
    return np.append(sol.x, 1.0).reshape(3, 3)


def _inliers(h: np.ndarray, src, dst, thresh) -> np.ndarray:
    ph = src @ h[:, :2].T + h[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.linalg.norm(ph[:, :2] / ph[:, 2:3] - dst, axis=1)
    return np.isfinite(e) & (e < thresh)


def fit_homography_ransac(src, dst, cfg: RansacConfig | None = None) -> tuple[Homography, np.ndarray]:
    """Robust homography ``src -> dst`` for (n, 2) correspondences."""
    cfg = cfg or RansacConfig()
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    if n < 4:
        raise AlignmentError(f"need at least 4 matches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    idx = np.argsort(rng.random((cfg.max_iterations, n)), axis=1)[:, :4]
    hs = dlt_homography(src[idx], dst[idx])
    with np.errstate(divide="ignore", invalid="ignore"):
        hs = hs / hs[:, 2:3, 2:3]
        det = np.linalg.det(hs)
    ok = np.all(np.isfinite(hs), axis=(1, 2)) & (np.abs(det) > 1e-8)
    if not ok.any():
        raise AlignmentError("every minimal sample was degenerate")
    hs = hs[ok]
    counts, cost = ransac_scores(hs, src, dst, cfg.inlier_threshold)
    best = np.lexsort((cost, -counts))[0]
    inl = _inliers(hs[best], src, dst, cfg.inlier_threshold)
    if inl.sum() < max(cfg.min_inliers, 4):
        raise AlignmentError(f"best model has {int(inl.sum())} inliers, need {cfg.min_inliers}")
    h = hs[best]
    for _ in range(5):
        h = dlt_homography(src[inl], dst[inl])
        h = _refine(h, src[inl], dst[inl])
        new = _inliers(h, src, dst, cfg.inlier_threshold)
        if new.sum() < 4:
            break
        if np.array_equal(new, inl):
            break
        inl = new
    if inl.sum() < cfg.min_inliers:
        raise AlignmentError(f"refined model has {int(inl.sum())} inliers, need {cfg.min_inliers}")
    try:
        H = Homography(h)
    except GeometryError as exc:
        raise AlignmentError(f"degenerate homography: {exc}") from exc
    return H, inl


def estimate_homography(m: MatchSet, kpa: list[Keypoint], kpb: list[Keypoint],
                        cfg: RansacConfig | None = None) -> tuple[Homography, np.ndarray]:
    """Homography mapping keypoints of ``a`` onto their matches in ``b``.

    Returns the model and a boolean inlier mask aligned with ``m.pairs``.
    """
    if len(m) < 4:
        raise AlignmentError(f"need at least 4 matches, got {len(m)}")
    ia, ib = m.indices()
    pa, _ = keypoint_arrays(kpa)
    pb, _ = keypoint_arrays(kpb)
    return fit_homography_ransac(pa[ia], pb[ib], cfg)


# --------------------------------------------------------------------------
# direct (intensity-based) refinement
# --------------------------------------------------------------------------

def _level_map(k: int) -> np.ndarray:
    # full-res pixel-centre coords -> level-k coords after k x k area reduction
    return np.array([[1.0 / k, 0, 0.5 / k - 0.5], [0, 1.0 / k, 0.5 / k - 0.5], [0, 0, 1.0]])


def _reduce(gray, k):
    H, W = gray.shape
    if k == 1:
        return gray
    return resize(gray, out_size=(max(8, round(H / k)), max(8, round(W / k))), mode="area")


def refine_direct(src, dst, h0: Homography, model: str = "homography", levels=(4, 2, 1),
                  blur: float = 2.0, iters: int = 20, dst_mask=None) -> tuple[Homography, list[float]]:
    """Refine ``h0`` (src -> dst coords) by photometric Gauss-Newton.

    Both images are reduced to blurred luma; the objective is the
    Huber-weighted residual of ``gain * src(G x) + bias - dst(x)`` over the
    valid overlap, with ``G`` the inverse map. ``model`` is ``"homography"``
    (8 dof) or ``"affine"`` (6 dof). Returns the refined map and the mean
    absolute residual measured after each pyramid level.
    """
    if model not in ("homography", "affine"):
        raise ValueError(f"unknown model {model!r}")
    npar = 8 if model == "homography" else 6
    sg = gaussian_blur(to_gray(src) if np.ndim(src) == 3 else np.asarray(src, float), blur)
    dg = gaussian_blur(to_gray(dst) if np.ndim(dst) == 3 else np.asarray(dst, float), blur)
    H = h0.h.copy()
    if model == "affine":
        H[2, :2] = 0.0
    gain, bias = 1.0, 0.0
    history = []
    for k in levels:
        s_k, d_k = _reduce(sg, k), _reduce(dg, k)
        A = _level_map(k)
        sy_, sx_ = np.gradient(s_k)
        stack = np.stack([s_k, sx_, sy_], axis=-1)
        hh, ww = d_k.shape
        ys, xs = np.mgrid[0:hh, 0:ww].astype(np.float64)
        x, y = xs.ravel(), ys.ravel()
        dv = d_k.ravel()
        m_ok = np.ones(dv.shape, bool)
        if dst_mask is not None:
            mk = _reduce(np.asarray(dst_mask, float), k)
            m_ok = mk.ravel() > 0.999
        # centred, scaled coordinates keep the normal equations well conditioned
        cx, cy, sc = (ww - 1) / 2.0, (hh - 1) / 2.0, max(hh, ww) / 2.0
        N = np.array([[1 / sc, 0, -cx / sc], [0, 1 / sc, -cy / sc], [0, 0, 1.0]])
        Ninv = np.linalg.inv(N)
        G = np.linalg.inv(N @ A @ H @ np.linalg.inv(A) @ Ninv)
        G /= G[2, 2]
        xn, yn = (x - cx) / sc, (y - cy) / sc

        def evaluate(G, gain, bias):
            w = G[2, 0] * xn + G[2, 1] * yn + 1.0
            un = (G[0, 0] * xn + G[0, 1] * yn + G[0, 2]) / w
            vn = (G[1, 0] * xn + G[1, 1] * yn + G[1, 2]) / w
            u, v = un * sc + cx, vn * sc + cy
            vals, ok = bilinear_sample(stack, u[None], v[None])
            vals, ok = vals[0], ok[0] & m_ok & (w > 0)
            r = gain * vals[:, 0] + bias - dv
            return r, ok, vals, w, un, vn

        def cost(r, ok):
            if ok.sum() < 16:
                return np.inf
            a = np.abs(r[ok])
            return float(np.mean(a))

        r, ok, vals, w, un, vn = evaluate(G, gain, bias)
        cur = cost(r, ok)
        lam = 1e-4
        for _ in range(iters):
            if not np.isfinite(cur):
                break
            I, Ix, Iy = vals[ok, 0], vals[ok, 1] * sc, vals[ok, 2] * sc
            xo, yo, wo, uo, vo = xn[ok], yn[ok], w[ok], un[ok], vn[ok]
            gx, gy = gain * Ix / wo, gain * Iy / wo
            cols = [gx * xo, gx * yo, gx, gy * xo, gy * yo, gy]
            if npar == 8:
                cols += [-(gx * uo + gy * vo) * xo, -(gx * uo + gy * vo) * yo]
            J = np.stack(cols + [I, np.ones_like(I)], axis=1)
            ro = r[ok]
            delta = 1.345 * 1.4826 * np.median(np.abs(ro - np.median(ro))) + 1e-6
            wt = np.minimum(1.0, delta / np.maximum(np.abs(ro), 1e-12))
            JW = J * wt[:, None]
            JtJ = JW.T @ J
            Jtr = JW.T @ ro
            improved = False
            for _ in range(6):
                step = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-9), -Jtr)
                G2 = G.copy()
                G2[0, :] += step[0:3]
                G2[1, :] += step[3:6]
                if npar == 8:
                    G2[2, :2] += step[6:8]
                g2, b2 = gain + step[npar], bias + step[npar + 1]
                r2, ok2, vals2, w2, un2, vn2 = evaluate(G2, g2, b2)
                c2 = cost(r2, ok2)
                if c2 <= cur:
                    G, gain, bias = G2, g2, b2
                    r, ok, vals, w, un, vn = r2, ok2, vals2, w2, un2, vn2
                    improved = cur - c2 > 1e-7 * max(cur, 1e-12)
                    cur = c2
                    lam = max(lam / 3, 1e-7)
                    break
                lam *= 10
            if not improved:
                break
        Hk = np.linalg.inv(Ninv @ G @ N)
        H = np.linalg.inv(A) @ Hk @ A
        H /= H[2, 2]
        history.append(cur)
    return Homography(H), history


# --------------------------------------------------------------------------
# full stage
# --------------------------------------------------------------------------

@dataclass
class KmaConfig:
    max_keypoints: int = 256
    downsample: int = 4
    ratio: float = 0.8
    ransac: RansacConfig = field(default_factory=RansacConfig)
    # nominal UW/W focal-length ratio; UW is pre-zoomed by it before matching
    uw_zoom: float = 1.0
    # photometric homography polish on blurred luma after RANSAC
    refine: bool = True
    refine_blur: float = 0.75
    # residual motion bound (W px) once the zoom prior is applied; None = global matching
    search_radius: float | None = 64.0
    # NCC search radius (W px) for the guided fallback when descriptor matching fails; None disables it
    guided_radius: float | None = 32.0
    guided_min_inlier_ratio: float = 0.5
    detector: Callable | None = None
    matcher: Callable | None = None


def zoom_prior(uw_size, w_size, zoom: float) -> Homography:
    """Centre-aligned zoom mapping UW pixel coordinates into the W frame."""
    ch_u, cw_u = (uw_size[0] - 1) / 2.0, (uw_size[1] - 1) / 2.0
    ch_w, cw_w = (w_size[0] - 1) / 2.0, (w_size[1] - 1) / 2.0
    return Homography(np.array([[zoom, 0, cw_w - zoom * cw_u], [0, zoom, ch_w - zoom * ch_u], [0, 0, 1.0]]))


def kma_homography(i_m, i_uw, cfg: KmaConfig | None = None) -> Homography:
    cfg = cfg or KmaConfig()
    detect = cfg.detector or (lambda im: detect_keypoints(im, cfg.max_keypoints, cfg.downsample))
    match = cfg.matcher or (lambda a, b: match_keypoints(a, b, cfg.ratio, cfg.search_radius))
    w_size = i_m.shape[:2]
    prior = zoom_prior(i_uw.shape[:2], w_size, cfg.uw_zoom)
    if np.allclose(prior.h, np.eye(3)) and i_uw.shape == i_m.shape:
        uw_view = i_uw
    else:
        uw_view, _ = warp_projective(i_uw, prior, w_size)
    kp_uw = detect(uw_view)
    kp_w = detect(i_m)
    if len(kp_uw) < 4 or len(kp_w) < 4:
        raise AlignmentError(f"too few keypoints (uw {len(kp_uw)}, w {len(kp_w)})")
    matches = match(kp_uw, kp_w)
    try:
        if cfg.refine and len(matches) >= 4:
            ia, ib = matches.indices()
            pa, _ = keypoint_arrays(kp_uw)
            pb, _ = keypoint_arrays(kp_w)
            pa_ref, keep = refine_matches(uw_view, i_m, pa[ia], pb[ib])
            if keep.sum() >= cfg.ransac.min_inliers:
                residual, _ = fit_homography_ransac(pa_ref[keep], pb[ib][keep], cfg.ransac)
            else:
                residual, _ = estimate_homography(matches, kp_uw, kp_w, cfg.ransac)
        else:
            residual, _ = estimate_homography(matches, kp_uw, kp_w, cfg.ransac)
    except AlignmentError:
        if cfg.guided_radius is None:
            raise
        # blurry UW views give few distinctive corners; look for W's corners directly
        pb, _ = keypoint_arrays(kp_w)
        src, dst = guided_matches(uw_view, i_m, pb, cfg.guided_radius)
        residual, inl = fit_homography_ransac(src, dst, cfg.ransac)
        # every W corner gets a candidate here, so demand a majority consensus
        if inl.mean() < cfg.guided_min_inlier_ratio:
            raise AlignmentError(f"guided matching: only {inl.mean():.0%} of {len(inl)} matches agree")
    H = residual @ prior
    if cfg.refine:
        H = _polish(i_uw, i_m, H, cfg)
    return H


def _polish(i_uw, i_m, H: Homography, cfg: KmaConfig) -> Homography:
    refined, _ = refine_direct(i_uw, i_m, H, "homography", levels=(2, 1), blur=cfg.refine_blur)
    # reject a polish that wanders off the keypoint solution
    if corner_error(refined, H, i_m.shape[:2]) > 4.0 * cfg.ransac.inlier_threshold:
        return H
    return refined


def kma_align(i_m, i_uw, cfg: KmaConfig | None = None) -> tuple[np.ndarray, np.ndarray, Homography]:
    """Warp ``i_uw`` onto ``i_m``'s frame.

    Returns ``(aligned_uw, validity_mask, H)`` with ``H`` mapping UW pixel
    coordinates to W pixel coordinates. Raises :class:`AlignmentError`
    instead of ever falling back silently.
    """
    H = kma_homography(i_m, i_uw, cfg)
    out, valid = warp_projective(i_uw, H, i_m.shape[:2])
    return out, valid, H


def fallback_align(i_m, i_uw, zoom: float = 1.0) -> tuple[np.ndarray, np.ndarray, Homography]:
    """Centre crop-and-resize of UW into W's frame, used when KMA fails."""
    H = zoom_prior(i_uw.shape[:2], i_m.shape[:2], zoom)
    out, valid = warp_projective(i_uw, H, i_m.shape[:2])
    return out, valid, H


def align_or_fallback(i_m, i_uw, cfg: KmaConfig | None = None):
    """KMA with the documented fallback; the last element flags success."""
    cfg = cfg or KmaConfig()
    try:
        out, valid, H = kma_align(i_m, i_uw, cfg)
        return out, valid, H, True
    except AlignmentError:
        out, valid, H = fallback_align(i_m, i_uw, cfg.uw_zoom)
        return out, valid, H, False
