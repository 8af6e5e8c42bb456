"""Image containers and the low-level image operations every stage shares.

Images are plain ``float64`` numpy arrays of shape (H, W, 3) holding
sRGB-encoded values in [0, 1]. Public operations clamp their outputs.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .kernels import bilinear_sample


class ImageDecodeError(IOError):
    pass


class GeometryError(ValueError):
    pass


def as_rgb(img) -> np.ndarray:
    """Validate an (H, W, 3) raster and return a clamped float64 copy."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return np.clip(arr, 0.0, 1.0)


def quantize(img) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def to_gray(img) -> np.ndarray:
    """BT.601 luma."""
    img = np.asarray(img, dtype=np.float64)
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


# --------------------------------------------------------------------------
# PNG interchange
# --------------------------------------------------------------------------

def load_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageDecodeError(f"{path}: not a PNG file (format {im.format})")
            if im.mode != "RGB":
                raise ImageDecodeError(f"{path}: expected 8-bit 3-channel RGB, got mode {im.mode}")
            data = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise ImageDecodeError(f"{path}: no such file") from exc
    except UnidentifiedImageError as exc:
        raise ImageDecodeError(f"{path}: cannot decode image payload") from exc
    return data.astype(np.float64) / 255.0


def save_png(path, img) -> None:
    img = as_rgb(img)
    path = Path(path)
    if not path.parent.exists() or not os.access(path.parent, os.W_OK):
        raise OSError(f"{path}: parent directory is not writable")
    data = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    # exact interval overlap between output cells and input pixels
    edges = np.arange(n_out + 1) * (n_in / n_out)
    R = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        j0, j1 = int(math.floor(lo)), min(int(math.ceil(hi)), n_in)
        for j in range(j0, j1):
            R[i, j] = min(hi, j + 1) - max(lo, j)
    return R / R.sum(axis=1, keepdims=True)


def _bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    j0 = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    f = src - j0
    R = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    R[rows, j0] += 1.0 - f
    if n_in > 1:
        R[rows, j0 + 1] += f
    return R


def resize(img, factor=None, mode: str = "area", out_size=None) -> np.ndarray:
    """Resize by a positive ``factor`` (output dims ``round(in * factor)``).

    ``out_size=(h, w)`` overrides the factor. ``area`` integrates exact pixel
    overlaps (mean-preserving), ``bilinear`` samples pixel centres.
    """
    arr = np.asarray(img, dtype=np.float64)
    H, W = arr.shape[:2]
    if out_size is None:
        if factor is None:
            raise ValueError("resize needs a factor or an out_size")
        factor = Fraction(factor).limit_denominator(1 << 20) if not isinstance(factor, Fraction) else factor
        if factor <= 0:
            raise ValueError(f"resize factor must be positive, got {factor}")
        out_size = (int(round(H * factor)), int(round(W * factor)))
    h, w = int(out_size[0]), int(out_size[1])
    if h < 1 or w < 1:
        raise ValueError(f"resize output would be empty: {(h, w)}")
    if (h, w) == (H, W):
        return arr.copy()
    if mode == "area":
        Ry, Rx = _area_weights(H, h), _area_weights(W, w)
    elif mode == "bilinear":
        Ry, Rx = _bilinear_weights(H, h), _bilinear_weights(W, w)
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    out = np.einsum("ij,jk...->ik...", Ry, arr)
    out = np.einsum("lk,ik...->il...", Rx, out)
    return out


def downsample_area(img, k: int) -> np.ndarray:
    """Exact k x k block mean; dims must be divisible by k."""
    arr = np.asarray(img, dtype=np.float64)
    H, W = arr.shape[:2]
    if H % k or W % k:
        raise ValueError(f"dims {(H, W)} not divisible by {k}")
    return arr.reshape(H // k, k, W // k, k, *arr.shape[2:]).mean(axis=(1, 3))


# --------------------------------------------------------------------------
# blur
# --------------------------------------------------------------------------

def gaussian_kernel1d(sigma: float) -> np.ndarray:
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the two spatial axes, reflect-padded.

    Works on (H, W) and (H, W, C) arrays; channels are filtered independently.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    arr = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(arr, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


# --------------------------------------------------------------------------
# projective geometry
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map acting on (x, y) pixel coordinates, h[2,2] == 1."""

    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(h)):
            raise GeometryError("homography has non-finite entries")
        if abs(h[2, 2]) < 1e-12:
            raise GeometryError("homography cannot be normalised (h33 ~ 0)")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-10:
            raise GeometryError("homography is singular")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls(np.array([[1, 0, dx], [0, 1, dy], [0, 0, 1]], dtype=np.float64))

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "Homography":
        sy = sx if sy is None else sy
        return cls(np.diag([sx, sy, 1.0]))

    @classmethod
    def rotation(cls, degrees: float, center=(0.0, 0.0)) -> "Homography":
        t = math.radians(degrees)
        c, s = math.cos(t), math.sin(t)
        cx, cy = center
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
        return cls.translation(cx, cy) @ cls(R) @ cls.translation(-cx, -cy)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.h @ other.h)

    def apply(self, pts) -> np.ndarray:
        """Map an (N, 2) array of points."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        ph = pts @ self.h[:, :2].T + self.h[:, 2]
        return ph[:, :2] / ph[:, 2:3]

    def tolist(self) -> list[float]:
        return [float(v) for v in self.h.ravel()]

    @classmethod
    def from_list(cls, values) -> "Homography":
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))

    def __repr__(self) -> str:
        return f"Homography({np.array2string(self.h, precision=5)})"


def corner_error(h_est: Homography, h_ref: Homography, size) -> float:
    """Mean displacement (px) of the four frame corners between two maps."""
    hgt, wid = size
    corners = np.array([[0, 0], [wid - 1, 0], [wid - 1, hgt - 1], [0, hgt - 1]], dtype=np.float64)
    return float(np.mean(np.linalg.norm(h_est.apply(corners) - h_ref.apply(corners), axis=1)))


def warp_projective(img, h: Homography, out_size) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``img`` into a new frame where ``h`` maps source -> output coords.

    Bilinear sampling; output pixels whose back-projection falls outside the
    source rectangle are 0 and marked False in the returned validity mask.
    """
    if not isinstance(h, Homography):
        h = Homography(h)
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    hgt, wid = int(out_size[0]), int(out_size[1])
    inv = np.linalg.inv(h.h)
    ys, xs = np.mgrid[0:hgt, 0:wid].astype(np.float64)
    den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den
        sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den
    # points behind the projective horizon never map into the source
    bad = ~(den > 0) | ~np.isfinite(sx) | ~np.isfinite(sy)
    sx[bad] = -1.0
    sy[bad] = -1.0
    out, valid = bilinear_sample(arr, sx, sy)
    if squeeze:
        out = out[..., 0]
    return out, valid


# --------------------------------------------------------------------------
# colour
# --------------------------------------------------------------------------

_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# D65 white as the image of sRGB white, so (1,1,1) lands exactly on L=100, a=b=0
_WHITE = _RGB_TO_XYZ.sum(axis=1)
_EPS = (6.0 / 29.0) ** 3
_KAPPA = 3.0 * (6.0 / 29.0) ** 2


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * np.power(np.maximum(c, 0.0), 1.0 / 2.4) - 0.055)


def srgb_to_lab(img) -> np.ndarray:
    """sRGB in [0,1] -> CIELAB (D65), float64 (..., 3)."""
    xyz = srgb_to_linear(np.clip(img, 0.0, 1.0)) @ _RGB_TO_XYZ.T
    t = xyz / _WHITE
    f = np.where(t > _EPS, np.cbrt(t), t / _KAPPA + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f > 6.0 / 29.0, f ** 3, _KAPPA * (f - 4.0 / 29.0))
    lin = (t * _WHITE) @ _XYZ_TO_RGB.T
    return np.clip(linear_to_srgb(lin), 0.0, 1.0)
