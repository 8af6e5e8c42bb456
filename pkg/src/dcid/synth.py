"""Synthetic dual-camera moire data.

Moire is produced physically: a source image is rendered as an LCD with RGB
subpixel stripes, then each lens warps, blurs and point-samples that screen.
The wide (W) lens samples close to the screen pixel period with little optical
blur, so the stripe grid aliases into low-frequency colour bands. The
ultra-wide (UW) lens covers a larger footprint at a coarser pitch behind a
Nyquist-safe blur and therefore stays clean.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imagery import (GeometryError, Homography, as_rgb, gaussian_blur, load_png, quantize,
                      resize, save_png, warp_projective)
from .kernels import bilinear_sample


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# source content
# --------------------------------------------------------------------------

def procedural_source(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Screen-like test content: smooth colour field, flat shapes, text blocks."""
    # low-frequency colour background
    coarse = rng.random((max(2, height // 48), max(2, width // 48), 3))
    img = resize(coarse, out_size=(height, width), mode="bilinear")
    img = 0.15 + 0.7 * img

    ys, xs = np.mgrid[0:height, 0:width]
    n_shapes = int(rng.integers(18, 30) * height * width / 256 ** 2) + 6
    for _ in range(n_shapes):
        color = rng.random(3)
        kind = rng.random()
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        if kind < 0.5:
            hw, hh = rng.uniform(4, 40, size=2)
            m = (np.abs(xs - cx) < hw) & (np.abs(ys - cy) < hh)
            if rng.random() < 0.3:
                t = rng.uniform(1.5, 3.5)
                m &= ~((np.abs(xs - cx) < hw - t) & (np.abs(ys - cy) < hh - t))
        elif kind < 0.75:
            r = rng.uniform(4, 28)
            m = (xs - cx) ** 2 + (ys - cy) ** 2 < r * r
        else:
            # a paragraph of glyph-like dashes
            lines = int(rng.integers(2, 6))
            pitch = rng.uniform(5, 9)
            m = np.zeros((height, width), dtype=bool)
            for k in range(lines):
                y0 = cy + k * pitch
                x = cx
                for _ in range(int(rng.integers(3, 9))):
                    wlen = rng.uniform(3, 12)
                    m |= (xs >= x) & (xs < x + wlen) & (ys >= y0) & (ys < y0 + pitch * 0.55)
                    x += wlen + rng.uniform(2, 4)
        img[m] = color
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------------------
# screen rendering and lens capture
# --------------------------------------------------------------------------

def subpixel_weights(factor: int, gap_gain: float = 0.3) -> np.ndarray:
    """(factor, factor, 3) per-channel emission profile of one screen pixel.

    Vertical R|G|B stripes; the bottom row is the dark inter-pixel gap. Each
    channel's profile is normalised to unit mean so a tile averages to the
    pixel colour.
    """
    cols = np.arange(factor)
    stripe = (3 * cols) // factor
    w = np.zeros((factor, factor, 3))
    for c in range(3):
        w[:, stripe == c, c] = 1.0
    w[-1] *= gap_gain
    return w / w.mean(axis=(0, 1))


def render_screen(gt, subpixel_factor: int, gap_gain: float = 0.3) -> np.ndarray:
    """Emitted radiance of an LCD showing ``gt``.

    Output is (H*f, W*f, 3). Values are relative radiance and exceed 1 inside
    lit stripes; every f x f tile has the mean of its source pixel.
    """
    if int(subpixel_factor) != subpixel_factor or subpixel_factor < 3:
        raise ValueError(f"subpixel_factor must be an integer >= 3, got {subpixel_factor}")
    f = int(subpixel_factor)
    gt = as_rgb(gt)
    h, w, _ = gt.shape
    tile = subpixel_weights(f, gap_gain)
    up = np.repeat(np.repeat(gt, f, axis=0), f, axis=1)
    return up * np.tile(tile, (h, w, 1))


@dataclass
class CaptureParams:
    """One lens looking at the screen.

    ``lens_homography`` maps screen coordinates onto the sensor plane (in
    screen-pixel units); the sensor then samples that plane every
    ``sensor_pitch`` units, so sensor pixel (j, i) sits at (j*pitch, i*pitch).
    """

    lens_homography: Homography
    pre_blur_sigma: float
    sensor_pitch: float
    color_cast: np.ndarray = field(default_factory=lambda: np.eye(3))
    gamma_jitter: float = 1.0
    out_size: tuple[int, int] = (256, 256)

    def scene_to_pixels(self) -> Homography:
        return Homography.scaling(1.0 / self.sensor_pitch) @ self.lens_homography


def apply_cast(img, cast, gamma: float = 1.0) -> np.ndarray:
    out = np.clip(np.asarray(img) @ np.asarray(cast).T, 0.0, None)
    if gamma != 1.0:
        out = out ** gamma
    return np.clip(out, 0.0, 1.0)


def simulate_capture(screen, params: CaptureParams) -> np.ndarray:
    """warp -> pre-blur -> point-sample -> colour cast and gamma -> clamp."""
    if params.sensor_pitch <= 0:
        raise ValueError("sensor_pitch must be positive")
    oh, ow = int(params.out_size[0]), int(params.out_size[1])
    if oh < 1 or ow < 1:
        raise GeometryError(f"empty sampling grid {params.out_size}")
    p = float(params.sensor_pitch)
    plane_size = (int(math.floor((oh - 1) * p)) + 2, int(math.floor((ow - 1) * p)) + 2)
    plane, _ = warp_projective(screen, params.lens_homography, plane_size)
    plane = gaussian_blur(plane, params.pre_blur_sigma)
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    out, valid = bilinear_sample(plane, xs * p, ys * p)
    if not valid.all():
        raise GeometryError("sensor grid falls outside the rendered plane")
    return apply_cast(out, params.color_cast, params.gamma_jitter)


def random_color_cast(rng: np.random.Generator, spread: float = 0.1) -> np.ndarray:
    m = np.eye(3) + rng.uniform(-spread, spread, (3, 3)) * (1 - np.eye(3))
    sums = m.sum(axis=1)
    m *= (np.clip(sums, 0.9, 1.1) / sums)[:, None]
    return m


# --------------------------------------------------------------------------
# sample generation
# --------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    out_size: tuple[int, int] = (256, 256)
    source_size: int = 384
    subpixel_factor: int = 3
    gap_gain: float = 0.3
    # W lens: pitch close to the screen pixel period -> aliasing
    w_pitch_ratio: tuple[float, float] = (1.04, 1.12)
    w_blur_ratio: tuple[float, float] = (0.2, 0.3)
    w_rotation_deg: float = 5.0
    w_translation_frac: float = 0.1
    w_perspective: float = 0.03
    # UW lens: wider footprint, coarser pitch, anti-aliased
    uw_zoom: float = 1.5
    uw_zoom_jitter: float = 0.03
    uw_rotation_deg: float = 2.0
    uw_translation_frac: float = 0.03
    uw_blur_per_pitch: float = 0.8
    cast_spread: float = 0.1
    gamma_range: tuple[float, float] = (0.9, 1.1)
    gt_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(eq=False)
class Sample:
    w_moire: np.ndarray
    uw: np.ndarray
    gt: np.ndarray
    meta: dict
    # analysis-only products, never written to disk
    extras: dict = field(default_factory=dict)

    @property
    def uw_to_w(self) -> Homography:
        return Homography.from_list(self.meta["uw_to_w_homography"])


def _load_pool(cfg: GeneratorConfig) -> list[Path] | None:
    if cfg.gt_dir is None:
        return None
    files = sorted(Path(cfg.gt_dir).glob("*.png"))
    if not files:
        raise ConfigError(f"GT pool {cfg.gt_dir} contains no PNG images")
    return files


def draw_source(rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    s = cfg.source_size
    pool = _load_pool(cfg)
    if pool is None:
        return procedural_source(s, s, rng)
    img = load_png(pool[int(rng.integers(len(pool)))])
    scale = s / min(img.shape[:2])
    if scale > 1:
        img = resize(img, out_size=(math.ceil(img.shape[0] * scale), math.ceil(img.shape[1] * scale)),
                     mode="bilinear")
    y0 = int(rng.integers(0, img.shape[0] - s + 1))
    x0 = int(rng.integers(0, img.shape[1] - s + 1))
    return img[y0:y0 + s, x0:x0 + s].copy()


def _lens(center_scene, rot_deg, persp, out_size, pitch) -> Homography:
    oh, ow = out_size
    plane_center = ((ow - 1) * pitch / 2.0, (oh - 1) * pitch / 2.0)
    P = Homography(np.array([[1, 0, 0], [0, 1, 0], [persp[0], persp[1], 1.0]]))
    R = Homography.rotation(rot_deg)
    # keep the chosen scene point on the optical axis after the projective tilt
    H = R @ P @ Homography.translation(-center_scene[0], -center_scene[1])
    return Homography.translation(*plane_center) @ H


def _frame_corners(size) -> np.ndarray:
    h, w = size
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def generate_sample(seed: int, cfg: GeneratorConfig | None = None) -> Sample:
    """Pure function of ``(seed, cfg)``."""
    cfg = cfg or GeneratorConfig()
    rng = np.random.default_rng(seed)
    f = int(cfg.subpixel_factor)
    oh, ow = cfg.out_size
    src = draw_source(rng, cfg)
    screen = render_screen(src, f, cfg.gap_gain)
    sh, sw = screen.shape[:2]
    scene_center = np.array([(sw - 1) / 2.0, (sh - 1) / 2.0])
    # source pixel k covers screen pixels [k f, (k+1) f)
    src_to_scene = Homography(np.array([[f, 0, (f - 1) / 2.0], [0, f, (f - 1) / 2.0], [0, 0, 1.0]]))

    for _attempt in range(50):
        p_w = f * rng.uniform(*cfg.w_pitch_ratio)
        sig_w = f * rng.uniform(*cfg.w_blur_ratio)
        rot_w = rng.uniform(-cfg.w_rotation_deg, cfg.w_rotation_deg)
        t_w = rng.uniform(-cfg.w_translation_frac, cfg.w_translation_frac, 2) * np.array([ow, oh]) * p_w
        persp = rng.uniform(-cfg.w_perspective, cfg.w_perspective, 2) / (0.5 * max(sh, sw))
        zoom = cfg.uw_zoom * (1.0 + rng.uniform(-cfg.uw_zoom_jitter, cfg.uw_zoom_jitter))
        p_uw = p_w * zoom
        sig_uw = cfg.uw_blur_per_pitch * p_uw
        rot_uw = rng.uniform(-cfg.uw_rotation_deg, cfg.uw_rotation_deg)
        t_uw = rng.uniform(-cfg.uw_translation_frac, cfg.uw_translation_frac, 2) * np.array([ow, oh]) * p_uw

        H_w = _lens(scene_center + t_w, rot_w, persp, (oh, ow), p_w)
        H_uw = _lens(scene_center + t_w + t_uw, rot_uw, (0.0, 0.0), (oh, ow), p_uw)
        scene_to_w = Homography.scaling(1 / p_w) @ H_w
        scene_to_uw = Homography.scaling(1 / p_uw) @ H_uw
        uw_to_w = scene_to_w @ scene_to_uw.inverse()

        # W must see only screen, and UW must cover the whole W frame
        wc = scene_to_w.inverse().apply(_frame_corners((oh, ow)))
        in_screen = np.all((wc >= f) & (wc <= np.array([sw - 1 - f, sh - 1 - f])))
        uc = uw_to_w.inverse().apply(_frame_corners((oh, ow)))
        in_uw = np.all((uc >= 2) & (uc <= np.array([ow - 3, oh - 3])))
        if in_screen and in_uw:
            break
    else:
        raise GeometryError("could not draw a W/UW geometry satisfying the coverage constraints")

    cast_w = random_color_cast(rng, cfg.cast_spread)
    cast_uw = random_color_cast(rng, cfg.cast_spread)
    gamma_w = float(rng.uniform(*cfg.gamma_range))
    gamma_uw = float(rng.uniform(*cfg.gamma_range))

    w_params = CaptureParams(H_w, sig_w, p_w, cast_w, gamma_w, (oh, ow))
    uw_params = CaptureParams(H_uw, sig_uw, p_uw, cast_uw, gamma_uw, (oh, ow))
    w_img = simulate_capture(screen, w_params)
    uw_img = simulate_capture(screen, uw_params)

    src_to_w = scene_to_w @ src_to_scene
    gt_lin, gt_valid = warp_projective(src, src_to_w, (oh, ow))
    if not gt_valid.all():
        raise GeometryError("W frame leaves the source image")
    gt = apply_cast(gt_lin, cast_w, gamma_w)
    uw_clean_lin, _ = warp_projective(src, scene_to_uw @ src_to_scene, (oh, ow))
    uw_clean = apply_cast(uw_clean_lin, cast_uw, gamma_uw)

    meta = {
        "seed": int(seed),
        "out_size": [int(oh), int(ow)],
        "subpixel_factor": f,
        "uw_zoom": float(cfg.uw_zoom),
        "uw_to_w_homography": uw_to_w.tolist(),
        "source_to_w_homography": src_to_w.tolist(),
        "w_color_cast": [float(v) for v in cast_w.ravel()],
        "uw_color_cast": [float(v) for v in cast_uw.ravel()],
        "w_pitch": float(p_w),
        "uw_pitch": float(p_uw),
        "w_sigma": float(sig_w),
        "uw_sigma": float(sig_uw),
        "w_gamma": gamma_w,
        "uw_gamma": gamma_uw,
        "w_rotation_deg": float(rot_w),
        "uw_rotation_deg": float(rot_uw),
    }
    return Sample(quantize(w_img), quantize(uw_img), quantize(gt), meta,
                  extras={"source": src, "uw_clean": quantize(uw_clean)})


# --------------------------------------------------------------------------
# moire energy
# --------------------------------------------------------------------------

def hf_energy(img, mask=None, sigma: float = 2.0) -> float:
    img = np.asarray(img, dtype=np.float64)
    r = img - gaussian_blur(img, sigma)
    e = (r ** 2).sum(axis=-1) if r.ndim == 3 else r ** 2
    return float(e[mask].mean() if mask is not None else e.mean())


def moire_energy(x, ref, mask=None, sigma: float = 2.0) -> float:
    """High-pass energy of ``x`` in excess of that of its clean reference."""
    return hf_energy(x, mask, sigma) - hf_energy(ref, mask, sigma)


# --------------------------------------------------------------------------
# dataset layout
# --------------------------------------------------------------------------

def write_sample(directory, sample: Sample) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_png(d / "w.png", sample.w_moire)
    save_png(d / "uw.png", sample.uw)
    save_png(d / "gt.png", sample.gt)
    (d / "meta.json").write_text(json.dumps(sample.meta, indent=1))
    return d


def read_sample(directory) -> Sample:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    return Sample(load_png(d / "w.png"), load_png(d / "uw.png"), load_png(d / "gt.png"), meta)


def list_samples(root) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and (p / "meta.json").exists())


def write_dataset(root, count: int, seed: int, cfg: GeneratorConfig | None = None, start: int = 0) -> list[Path]:
    """Write ``count`` samples; sample ``i`` uses seed ``seed + i``."""
    cfg = cfg or GeneratorConfig()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for i in range(start, start + count):
        out.append(write_sample(root / f"sample_{i:05d}", generate_sample(seed + i, cfg)))
    return out
