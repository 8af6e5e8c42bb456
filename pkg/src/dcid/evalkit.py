"""Image-quality metrics and batch evaluation reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

from .imagery import gaussian_kernel1d, srgb_to_lab, to_gray

PSNR_CAP = 100.0

# documentation constants (Xiaomi split, full method vs single-image baseline); not reproduced here
PUBLISHED_REFERENCE = {
    "full": {"psnr": 27.06, "ssim": 0.8973, "delta_e": 3.777},
    "esdnet": {"psnr": 26.14, "ssim": 0.8889, "delta_e": 4.166},
}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gauss_window():
    # 11 taps, sigma 1.5 (radius ceil(3 sigma) = 5)
    k = gaussian_kernel1d(1.5)
    assert k.size == 11
    return k


def ssim(a, b, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of the BT.601 luma over the fully-covered window positions."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        a, b = to_gray(a), to_gray(b)
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError(f"ssim needs at least 11x11 images, got {a.shape[:2]}")
    k = _gauss_window()

    def filt(x):
        y = correlate1d(x, k, axis=0, mode="reflect")
        y = correlate1d(y, k, axis=1, mode="reflect")
        return y[5:-5, 5:-5]

    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def delta_e(a, b) -> float:
    """Mean CIE76 colour difference."""
    a, b = _pair(a, b)
    d = srgb_to_lab(a) - srgb_to_lab(b)
    return float(np.mean(np.sqrt((d ** 2).sum(axis=-1))))


METRICS: dict[str, Callable] = {"psnr": psnr, "ssim": ssim, "delta_e": delta_e}


@dataclass
class MetricsReport:
    method: str
    dataset: str
    rows: list[dict] = field(default_factory=list)
    noop_rows: list[dict] = field(default_factory=list)

    def add(self, sample_id: str, restored, gt, moire=None) -> dict:
        row = {"id": sample_id, **{k: fn(restored, gt) for k, fn in METRICS.items()}}
        self.rows.append(row)
        if moire is not None:
            self.noop_rows.append({"id": sample_id, **{k: fn(moire, gt) for k, fn in METRICS.items()}})
        return row

    @staticmethod
    def _mean(rows) -> dict:
        return {k: float(np.mean([r[k] for r in rows])) for k in METRICS} if rows else {}

    @property
    def aggregate(self) -> dict:
        return self._mean(self.rows)

    @property
    def noop_aggregate(self) -> dict:
        return self._mean(self.noop_rows)

    def to_dict(self) -> dict:
        return {"method": self.method, "dataset": self.dataset, "count": len(self.rows),
                "mean": self.aggregate, "noop": self.noop_aggregate, "rows": self.rows,
                "noop_rows": self.noop_rows}

    def write(self, path) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` and ``<stem>.json`` next to ``path``.

        The CSV has one row per sample followed by ``mean`` and ``no-op`` rows.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = path.with_suffix(".csv"), path.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *METRICS])
            for r in self.rows:
                w.writerow([r["id"], *(f"{r[k]:.6f}" for k in METRICS)])
            for label, agg in (("mean", self.aggregate), ("no-op", self.noop_aggregate)):
                if agg:
                    w.writerow([label, *(f"{agg[k]:.6f}" for k in METRICS)])
        json_path.write_text(json.dumps(self.to_dict(), indent=1))
        return csv_path, json_path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).with_suffix(".json").read_text())
        return cls(d["method"], d["dataset"], d["rows"], d.get("noop_rows", []))


def evaluate(restore_fn: Callable, samples, label: str, dataset: str = "") -> MetricsReport:
    """Run ``restore_fn(sample) -> image`` over ``samples`` and score against GT.

    ``samples`` yields ``(id, Sample)`` pairs. The raw moire input is scored
    too and reported as the no-op row.
    """
    report = MetricsReport(label, dataset)
    for sid, s in samples:
        out = np.clip(restore_fn(s), 0.0, 1.0)
        report.add(sid, out, s.gt, s.w_moire)
    return report


def evaluate_model(model, data, label: str, dataset: str = "") -> MetricsReport:
    """Score a network on KMA-prepared samples (see :func:`dcid.trainer.load_training_set`).

    Inference runs at full resolution with reflective padding to a multiple of 8.
    """
    from .model import restore

    report = MetricsReport(label, dataset)
    for s in data:
        w, uw, gt = s.w / 255.0, s.uw / 255.0, s.gt / 255.0
        report.add(s.sid, restore(model, w, uw, s.valid), gt, w)
    return report


def evaluate_checkpoint(ckpt, data_dir, label: str | None = None, uw_zoom: float | None = None,
                        cache_path=None) -> MetricsReport:
    """Load a checkpoint, KMA-align every test sample, and score ``I_out^1`` against GT."""
    from .trainer import load_model, load_training_set

    model, cfg = load_model(ckpt)
    zoom = uw_zoom if uw_zoom is not None else cfg.uw_zoom
    data = load_training_set(data_dir, zoom, cache_path)
    return evaluate_model(model, data, label or cfg.variant, str(data_dir))
