"""Turning raw capture triplets into training samples.

A raw triplet is a W capture, a UW capture and the clean source image that
was on screen. Preparation crops W and UW consistently, aligns the source to
the cropped W frame (keypoint homography, then a dense affine correction on
blurred images so moire does not drive the fit), and finally maps the source
colours into the capture's colour state with a 3x3 matrix.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import AlignmentError, KmaConfig, kma_homography, refine_direct
from .imagery import Homography, gaussian_blur, load_png, quantize, to_gray, warp_projective
from .synth import Sample, write_sample

log = logging.getLogger(__name__)

COND_LIMIT = 1e4


@dataclass
class ColorMatrix:
    m: np.ndarray
    cond: float
    ok: bool = True

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "cond": self.cond, "ok": self.ok}


@dataclass
class PrepRecord:
    crop_rect: tuple[int, int, int, int]
    uw_crop_rect: tuple[float, float, float, float]
    coarse_h: Homography | None = None
    fine_residual: list[float] = field(default_factory=list)
    color: ColorMatrix | None = None
    alignment_ok: bool = True
    color_ok: bool = True

    def to_dict(self) -> dict:
        d = {
            "crop_rect": list(self.crop_rect),
            "uw_crop_rect": list(self.uw_crop_rect),
            "coarse_h": self.coarse_h.tolist() if self.coarse_h is not None else None,
            "fine_residual": list(self.fine_residual),
            "color": self.color.to_dict() if self.color is not None else None,
            "flags": {"alignment_ok": self.alignment_ok, "color_ok": self.color_ok},
        }
        return d


# --------------------------------------------------------------------------
# cropping
# --------------------------------------------------------------------------

def uw_rect_for(rect, w_size, uw_size) -> tuple[float, float, float, float]:
    """UW rectangle with the same relative centre and relative size as ``rect``.

    One scale factor (the frame width ratio) is used on both axes so the
    rectangle keeps ``rect``'s aspect ratio even if the frames differ in shape.
    """
    x, y, w, h = rect
    H, W = w_size
    Hu, Wu = uw_size
    s = Wu / W
    cx = (x + w / 2.0) / W * Wu
    cy = (y + h / 2.0) / H * Hu
    return (cx - w * s / 2.0, cy - h * s / 2.0, w * s, h * s)


def crop_pair(w_raw, uw_raw, rect) -> tuple[np.ndarray, np.ndarray, PrepRecord]:
    """Crop ``rect = (x, y, w, h)`` out of W and the matching region out of UW."""
    x, y, w, h = (int(v) for v in rect)
    H, W = w_raw.shape[:2]
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"crop rect {tuple(rect)} outside the {W}x{H} W frame")
    i_m = w_raw[y:y + h, x:x + w].copy()
    ur = uw_rect_for((x, y, w, h), (H, W), uw_raw.shape[:2])
    Hu, Wu = uw_raw.shape[:2]
    def rnd(v):  # half-up, so both edges of a symmetric rect round the same way
        return int(np.floor(v + 0.5))

    ux0 = int(np.clip(rnd(ur[0]), 0, Wu - 1))
    uy0 = int(np.clip(rnd(ur[1]), 0, Hu - 1))
    ux1 = int(np.clip(rnd(ur[0] + ur[2]), ux0 + 1, Wu))
    uy1 = int(np.clip(rnd(ur[1] + ur[3]), uy0 + 1, Hu))
    i_uw = uw_raw[uy0:uy1, ux0:ux1].copy()
    return i_m, i_uw, PrepRecord(crop_rect=(x, y, w, h), uw_crop_rect=ur)


# --------------------------------------------------------------------------
# source alignment
# --------------------------------------------------------------------------

def blurred_residual(src_warped, valid, dst, blur: float) -> float:
    """Mean |gain * src + bias - dst| on blurred luma over the valid region."""
    a = gaussian_blur(to_gray(src_warped), blur)
    b = gaussian_blur(to_gray(dst), blur)
    ok = valid.astype(bool)
    if ok.sum() < 16:
        return float("inf")
    A = np.stack([a[ok], np.ones(ok.sum())], axis=1)
    coef, *_ = np.linalg.lstsq(A, b[ok], rcond=None)
    return float(np.mean(np.abs(A @ coef - b[ok])))


def align_source(src, i_m, kma: KmaConfig | None = None, blur: float = 3.0,
                 levels=(4, 2, 1), min_gain: float = 0.01) -> tuple[np.ndarray, np.ndarray, dict]:
    """Map the clean source onto ``i_m``'s frame.

    Step one is the keypoint homography used for UW alignment; step two is a
    coarse-to-fine affine correction on ``gaussian_blur(., blur)`` images.
    A pyramid level's update is kept only if it lowers the full-resolution
    blurred residual by at least ``min_gain`` (relative), so ``fine_residual``
    (initial value followed by one entry per level) never increases and
    negligible gains cannot drag a good keypoint solution around.

    Returns ``(aligned, valid, info)`` where ``info`` holds ``coarse_h``,
    ``final_h`` and ``fine_residual``. Raises :class:`AlignmentError` if the
    keypoint step fails.
    """
    size = i_m.shape[:2]
    coarse = kma_homography(i_m, src, kma)
    warped, valid = warp_projective(src, coarse, size)
    history = [blurred_residual(warped, valid, i_m, blur)]
    correction = Homography.identity()
    for k in levels:
        cand, _ = refine_direct(warped, i_m, correction, "affine", levels=(k,), blur=blur, dst_mask=None)
        cw, cv = warp_projective(src, cand @ coarse, size)
        r = blurred_residual(cw, cv, i_m, blur)
        if r <= (1.0 - min_gain) * history[-1] and cv.mean() > 0.5:
            correction = cand
            history.append(r)
        else:
            history.append(history[-1])
    final = correction @ coarse
    aligned, valid = warp_projective(src, final, size)
    return aligned, valid, {"coarse_h": coarse, "final_h": final, "fine_residual": history}


# --------------------------------------------------------------------------
# colour correction
# --------------------------------------------------------------------------

def _erode(mask, radius: int) -> np.ndarray:
    from scipy.ndimage import binary_erosion

    if radius <= 0:
        return mask.astype(bool)
    return binary_erosion(mask.astype(bool), iterations=radius, border_value=0)


def estimate_color_matrix(i_m, src_aligned, blur_sigma: float = 5.0, mask=None) -> ColorMatrix:
    """Least-squares 3x3 matrix ``m`` with ``blur(src) @ m.T ~ blur(i_m)``.

    Only blurred pixels are used. The ridge term ``1e-6 * trace(A^T A) / 3``
    pulls ``m`` towards the identity (no colour change) rather than towards
    zero, so a pair that already matches returns the identity exactly. If
    ``A^T A`` has condition number above 1e4 the fit is flagged and the
    identity is returned.
    """
    if i_m.shape != src_aligned.shape:
        raise ValueError(f"shape mismatch {i_m.shape} vs {src_aligned.shape}")
    if not blur_sigma > 0:
        raise ValueError(f"blur_sigma must be positive, got {blur_sigma}")
    a = gaussian_blur(src_aligned, blur_sigma)
    b = gaussian_blur(i_m, blur_sigma)
    if mask is not None:
        keep = _erode(mask, int(np.ceil(3 * blur_sigma)))
        if keep.sum() < 16:
            return ColorMatrix(np.eye(3), float("inf"), ok=False)
        A, B = a[keep], b[keep]
    else:
        A, B = a.reshape(-1, 3), b.reshape(-1, 3)
    ata = A.T @ A
    cond = float(np.linalg.cond(ata))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        return ColorMatrix(np.eye(3), cond, ok=False)
    r = 1e-6 * np.trace(ata) / 3.0
    mt = np.linalg.solve(ata + r * np.eye(3), A.T @ B + r * np.eye(3))
    return ColorMatrix(mt.T, cond, ok=True)


def apply_color_matrix(img, m) -> np.ndarray:
    m = m.m if isinstance(m, ColorMatrix) else np.asarray(m, float)
    return np.clip(np.asarray(img, float) @ m.T, 0.0, 1.0)


# --------------------------------------------------------------------------
# whole-sample preparation
# --------------------------------------------------------------------------

def prep_triplet(w_raw, uw_raw, src, rect=None, blur_sigma: float = 5.0,
                 kma: KmaConfig | None = None, align_blur: float = 3.0) -> tuple[Sample | None, PrepRecord]:
    """Crop, align and colour-correct one raw triplet.

    Returns ``(None, record)`` when the source cannot be aligned; such samples
    are excluded from the dataset.
    """
    if rect is None:
        rect = (0, 0, w_raw.shape[1], w_raw.shape[0])
    i_m, i_uw, rec = crop_pair(w_raw, uw_raw, rect)
    try:
        aligned, valid, info = align_source(src, i_m, kma, blur=align_blur)
    except AlignmentError as exc:
        log.warning("source alignment failed: %s", exc)
        rec.alignment_ok = False
        return None, rec
    rec.coarse_h = info["coarse_h"]
    rec.fine_residual = info["fine_residual"]
    cm = estimate_color_matrix(i_m, aligned, blur_sigma, mask=valid)
    rec.color, rec.color_ok = cm, cm.ok
    gt = quantize(apply_color_matrix(aligned, cm))
    meta = {"prep": rec.to_dict(), "final_h": info["final_h"].tolist(),
            "gt_valid_fraction": float(valid.mean())}
    return Sample(w_moire=i_m, uw=i_uw, gt=gt, meta=meta), rec


def _raw_dirs(root) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and (p / "w.png").exists())


def prep_directory(in_dir, out_dir, blur_sigma: float = 5.0, uw_zoom: float = 1.0,
                   source_zoom: float = 1.0) -> list[PrepRecord]:
    """Prepare every raw triplet under ``in_dir``.

    Each input subdirectory holds ``w.png``, ``uw.png``, ``src.png`` and
    optionally ``crop.json`` with ``{"rect": [x, y, w, h]}``. Outputs use the
    synthetic sample layout; the PrepRecord is stored under ``meta["prep"]``.
    ``source_zoom`` is the approximate source-to-W scale used as alignment
    prior; ``uw_zoom`` is recorded for later UW alignment.
    """
    dirs = _raw_dirs(in_dir)
    if not dirs:
        raise FileNotFoundError(f"no raw triplets (w.png/uw.png/src.png) under {in_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for d in dirs:
        rect = None
        if (d / "crop.json").exists():
            rect = json.loads((d / "crop.json").read_text())["rect"]
        sample, rec = prep_triplet(load_png(d / "w.png"), load_png(d / "uw.png"), load_png(d / "src.png"),
                                   rect, blur_sigma, KmaConfig(uw_zoom=source_zoom))
        records.append(rec)
        if sample is None:
            continue
        sample.meta.update({"source_dir": d.name, "uw_zoom": uw_zoom})
        write_sample(out / d.name, sample)
    return records
