import json

import numpy as np
import pytest

from dcid import dataprep
from dcid.align import KmaConfig
from dcid.dataprep import (
    align_source,
    apply_color_matrix,
    crop_pair,
    estimate_color_matrix,
    prep_directory,
    uw_rect_for,
)
from dcid.evalkit import delta_e
from dcid.imagery import Homography, corner_error, gaussian_blur, save_png, warp_projective
from dcid.synth import generate_sample, list_samples, read_sample

SOURCE_ZOOM = 1 / 1.08     # source pixel -> W pixel scale at the middle of the pitch band


def random_matrix(rng):
    while True:
        m = np.eye(3) + rng.uniform(-0.2, 0.2, (3, 3))
        if np.linalg.cond(m) < 3:
            return m


@pytest.fixture(scope="module")
def sample():
    return generate_sample(502)


# ------------------------------------------------------------------ cropping

def test_full_frame_crop_is_identity(rng):
    w, uw = rng.random((40, 50, 3)), rng.random((40, 50, 3))
    a, b, rec = crop_pair(w, uw, (0, 0, 50, 40))
    assert np.array_equal(a, w) and np.array_equal(b, uw)
    assert rec.uw_crop_rect == (0.0, 0.0, 50.0, 40.0)


def test_centered_crop_keeps_relative_geometry(rng):
    w, uw = rng.random((200, 300, 3)), rng.random((100, 150, 3))
    a, b, rec = crop_pair(w, uw, (75, 50, 150, 100))
    x, y, cw, ch = rec.uw_crop_rect
    assert (x + cw / 2, y + ch / 2) == (75.0, 50.0)
    assert (cw, ch) == (75.0, 50.0)
    assert a.shape == (100, 150, 3) and b.shape == (50, 75, 3)


def test_aspect_ratio_preserved_for_mismatched_frames():
    rect = (13, 21, 97, 61)
    x, y, w, h = uw_rect_for(rect, (240, 320), (300, 360))
    assert abs(w / h - 97 / 61) < 1e-3


def test_crop_out_of_bounds(rng):
    w = rng.random((40, 50, 3))
    with pytest.raises(ValueError):
        crop_pair(w, w, (10, 10, 50, 10))
    with pytest.raises(ValueError):
        crop_pair(w, w, (-1, 0, 10, 10))


def test_cropped_uw_still_covers_screen(sample):
    x, y, cw, ch = 64, 64, 128, 128
    i_m, i_uw, rec = crop_pair(sample.w_moire, sample.uw, (x, y, cw, ch))
    ux, uy = (int(np.floor(v + 0.5)) for v in rec.uw_crop_rect[:2])
    # UW-crop pixel -> UW pixel -> W pixel -> W-crop pixel
    h = Homography.translation(-x, -y) @ sample.uw_to_w @ Homography.translation(ux, uy)
    _, valid = warp_projective(i_uw, h, i_m.shape[:2])
    assert valid.all()


# ------------------------------------------------------------------ source alignment

def test_aligned_source_is_a_fixed_point(sample):
    _, _, info = align_source(sample.gt, sample.gt, KmaConfig(uw_zoom=1.0))
    assert corner_error(info["coarse_h"], Homography.identity(), (256, 256)) < 0.5
    assert corner_error(info["final_h"], Homography.identity(), (256, 256)) < 0.5


def test_known_source_warp_recovered(sample):
    truth = Homography.from_list(sample.meta["source_to_w_homography"])
    aligned, valid, info = align_source(sample.extras["source"], sample.gt, KmaConfig(uw_zoom=SOURCE_ZOOM))
    assert corner_error(info["final_h"], truth, (256, 256)) <= 1.0
    assert valid.all()


def test_refinement_residual_monotone_under_moire(sample):
    truth = Homography.from_list(sample.meta["source_to_w_homography"])
    _, _, info = align_source(sample.extras["source"], sample.w_moire, KmaConfig(uw_zoom=SOURCE_ZOOM))
    hist = info["fine_residual"]
    assert len(hist) == 4
    assert all(b <= a for a, b in zip(hist, hist[1:]))
    assert corner_error(info["final_h"], truth, (256, 256)) <= 1.0


# ------------------------------------------------------------------ colour

def test_self_fit_is_identity(sample):
    cm = estimate_color_matrix(sample.gt, sample.gt)
    assert cm.ok
    assert np.abs(cm.m - np.eye(3)).max() <= 1e-6


def test_known_matrix_recovered(rng, sample):
    src = 0.15 + 0.6 * sample.extras["source"][:128, :128]
    for _ in range(10):
        m = random_matrix(rng)
        i_m = np.clip(apply_color_matrix(src, m) + rng.normal(0, 0.01, src.shape), 0, 1)
        cm = estimate_color_matrix(i_m, src)
        assert np.linalg.norm(cm.m - m) / np.linalg.norm(m) <= 1e-2


def test_gray_content_flagged(rng):
    g = rng.random((64, 64, 1)).repeat(3, axis=2)
    cm = estimate_color_matrix(g * 0.9, g)
    assert not cm.ok
    assert np.array_equal(cm.m, np.eye(3))


def test_fit_uses_only_blurred_pixels(rng, sample, monkeypatch):
    src = sample.gt
    i_m = np.clip(apply_color_matrix(src, random_matrix(rng)), 0, 1)
    seen = []
    real_blur = dataprep.gaussian_blur

    def spy(img, sigma):
        seen.append(sigma)
        return real_blur(img, sigma)

    monkeypatch.setattr(dataprep, "gaussian_blur", spy)
    cm = estimate_color_matrix(i_m, src, blur_sigma=4.0)
    assert seen == [4.0, 4.0]
    # independent normal-equation solve on the blurred pixels
    A = gaussian_blur(src, 4.0).reshape(-1, 3)
    B = gaussian_blur(i_m, 4.0).reshape(-1, 3)
    ata = A.T @ A
    r = 1e-6 * np.trace(ata) / 3
    ref = np.linalg.solve(ata + r * np.eye(3), A.T @ B + r * np.eye(3)).T
    assert np.allclose(cm.m, ref, atol=1e-12)


def test_correction_reduces_color_error(rng, sample):
    src = sample.gt
    for _ in range(3):
        m = random_matrix(rng)
        if np.linalg.norm(m - np.eye(3)) <= 0.01:
            continue
        i_m = apply_color_matrix(src, m)
        before = delta_e(gaussian_blur(src, 5), gaussian_blur(i_m, 5))
        fixed = apply_color_matrix(src, estimate_color_matrix(i_m, src))
        after = delta_e(gaussian_blur(fixed, 5), gaussian_blur(i_m, 5))
        assert after < before


def test_estimator_rejects_bad_args(rng):
    a = rng.random((16, 16, 3))
    with pytest.raises(ValueError):
        estimate_color_matrix(a, a[:8])
    with pytest.raises(ValueError):
        estimate_color_matrix(a, a, blur_sigma=0)


def test_apply_color_matrix_examples(rng):
    x = rng.uniform(0.2, 0.6, (8, 8, 3))
    assert np.array_equal(apply_color_matrix(x, np.eye(3)), x)
    c = np.full((4, 4, 3), 0.8)
    assert np.allclose(apply_color_matrix(c, 0.5 * np.eye(3)), 0.4)
    m = random_matrix(rng)
    y = x @ m.T
    assert np.all((y > 0) & (y < 1))
    assert np.allclose(apply_color_matrix(apply_color_matrix(x, m), np.linalg.inv(m)), x, atol=1e-5)


# ------------------------------------------------------------------ directory pipeline

def test_prep_directory(tmp_path, sample):
    raw = tmp_path / "raw" / "shot_a"
    raw.mkdir(parents=True)
    save_png(raw / "w.png", sample.w_moire)
    save_png(raw / "uw.png", sample.uw)
    save_png(raw / "src.png", sample.extras["source"])
    (raw / "crop.json").write_text(json.dumps({"rect": [0, 0, 256, 256]}))
    recs = prep_directory(tmp_path / "raw", tmp_path / "out", blur_sigma=5.0, uw_zoom=1.5,
                          source_zoom=SOURCE_ZOOM)
    assert len(recs) == 1 and recs[0].alignment_ok and recs[0].color_ok
    [d] = list_samples(tmp_path / "out")
    s = read_sample(d)
    assert s.meta["prep"]["flags"] == {"alignment_ok": True, "color_ok": True}
    assert s.meta["uw_zoom"] == 1.5
    # the produced GT is close to the generator's own GT
    assert np.abs(s.gt - sample.gt).mean() < 0.02
