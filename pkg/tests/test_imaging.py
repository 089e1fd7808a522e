import math
import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from plqsr import imaging as im
from plqsr.imaging import ImageError, ImageRGB


def solid(rgb, h=16, w=16):
    return ImageRGB(np.broadcast_to(np.array(rgb, dtype=np.uint8), (h, w, 3)).copy())


def gray(y):
    return ImageRGB(np.repeat(np.asarray(y, dtype=np.uint8)[..., None], 3, axis=2))


# ---------------------------------------------------------------------------
# colour


@pytest.mark.parametrize("rgb,y", [((255, 255, 255), 255.0), ((255, 0, 0), 76.245), ((0, 0, 0), 0.0)])
def test_y_channel_values(rgb, y):
    out = im.to_y_channel(solid(rgb, 2, 2))
    assert out.shape == (1, 1, 2, 2)
    assert float(out.data[0, 0, 0, 0]) == pytest.approx(y, abs=1e-9)


def test_ycbcr_gray_has_neutral_chroma():
    ycc = im.rgb_to_ycbcr(solid((90, 90, 90)))
    assert np.allclose(ycc[..., 1:], 128.0)


def test_chroma_mean_responds_to_colour():
    cb, cr = im.chroma_mean(solid((255, 0, 0)))
    assert cr > 128 > cb


# ---------------------------------------------------------------------------
# metrics


def test_psnr_identical_is_inf():
    a = im.synth_image("gaussian-noise", 1, (20, 20))
    assert im.psnr_y(a, a) == im.PSNR_INF


def test_psnr_constant_difference_of_one():
    # a Y offset of exactly 1 comes from adding 1 to every channel
    a = solid((100, 100, 100))
    b = solid((101, 101, 101))
    assert im.psnr_y(a, b) == pytest.approx(10 * math.log10(65025), abs=0.01)
    assert im.psnr_y(a, b) == pytest.approx(48.13, abs=0.01)


def test_psnr_full_scale_difference():
    assert im.psnr_y(solid((0, 0, 0)), solid((255, 255, 255))) == pytest.approx(0.0, abs=0.01)


def test_psnr_symmetric_and_dim_check():
    a = im.synth_image("ramp", 1, (16, 16))
    b = im.synth_image("ramp", 2, (16, 16))
    assert im.psnr_y(a, b) == im.psnr_y(b, a)
    with pytest.raises(ImageError):
        im.psnr_y(a, im.synth_image("ramp", 1, (16, 18)))


def test_psnr_border_crop():
    a = np.full((12, 12), 50, np.uint8)
    b = a.copy()
    b[0, :] = 0  # damage only the border
    assert im.psnr_y(gray(a), gray(b), crop=1) == im.PSNR_INF
    assert im.psnr_y(gray(a), gray(b)) < 40


def test_psnr_accepts_model_layout():
    a = im.synth_image("color-wheel", 3, (16, 16))
    # float32 [0, 1] storage only loses ~1e-5 of a level
    assert im.psnr_y(a.to_float(), a) > 120


def test_ssim_identical_is_one():
    a = im.synth_image("gaussian-noise", 4, (32, 32))
    assert abs(im.ssim_y(a, a) - 1.0) < 1e-9


def test_ssim_negative_image_is_negative():
    a = im.synth_image("checker", 2, (32, 32), period=2)
    neg = ImageRGB(255 - a.pixels)
    assert im.ssim_y(a, neg) < 0


def test_ssim_constant_plus_noise_in_unit_interval():
    a = solid((120, 120, 120), 32, 32)
    noise = np.random.default_rng(0).integers(-3, 4, (32, 32, 1))
    b = ImageRGB(np.clip(a.pixels.astype(int) + noise, 0, 255).astype(np.uint8))
    assert 0 < im.ssim_y(a, b) < 1


def test_ssim_symmetric():
    a = im.synth_image("gaussian-noise", 5, (24, 24))
    b = im.synth_image("gaussian-noise", 6, (24, 24))
    assert im.ssim_y(a, b) == pytest.approx(im.ssim_y(b, a), abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ImageError):
        im.ssim_y(solid((1, 2, 3), 10, 10), solid((1, 2, 3), 10, 10))


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = ImageRGB(rng.integers(0, 256, (40, 33, 3), dtype=np.uint8))
    b = ImageRGB(np.clip(a.pixels + rng.normal(0, 25, a.pixels.shape), 0, 255).astype(np.uint8))
    ya = im.to_y_channel(a).data[0, 0]
    yb = im.to_y_channel(b).data[0, 0]
    want = structural_similarity(
        ya, yb, data_range=255, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, win_size=11
    )
    assert im.ssim_y(a, b) == pytest.approx(want, abs=1e-6)


def test_gaussian_window_normalised():
    g = im.gaussian_window()
    assert g.size == 11 and g.sum() == pytest.approx(1.0)
    assert g[5] == g.max()


# ---------------------------------------------------------------------------
# resampling


@pytest.mark.parametrize("factor", [0.25, 0.5, 2, 4])
def test_resize_weights_sum_to_one(factor):
    _, w = im.resize_weights(32, int(32 * factor), factor)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_resize_identity_and_constant():
    a = im.synth_image("gaussian-noise", 7, (16, 16))
    assert im.bicubic_resize(a, 1) is a
    c = solid((37, 200, 90), 16, 16)
    for f in (0.25, 0.5, 2, 4):
        out = im.bicubic_resize(c, f)
        assert out.height == int(16 * f)
        assert np.all(out.pixels == c.pixels[0, 0])


def test_ramp_stays_linear_after_downsampling():
    x = np.arange(64, dtype=np.float64) * 2.0 + 40.0
    ramp = np.broadcast_to(x[None, :, None], (8, 64, 3))
    out = im.resize_array(ramp, 0.5)[0, :, 0]
    inner = out[3:-3]
    fit = np.polyval(np.polyfit(np.arange(inner.size), inner, 1), np.arange(inner.size))
    assert np.max(np.abs(inner - fit)) <= 1.0


def test_catmull_rom_kernel_values():
    k = im.cubic_kernel(np.array([0.0, 1.0, 2.0, 0.5]))
    assert k[:3].tolist() == [1.0, 0.0, 0.0]
    assert k[3] == pytest.approx(0.5625)


def test_resize_rejects_bad_factor():
    with pytest.raises(ImageError):
        im.bicubic_resize(solid((0, 0, 0)), 3)


def test_crop_patches_seeded():
    a = im.synth_image("gaussian-noise", 8, (40, 40))
    p1 = im.crop_patches(a, 8, seed=3, count=4)
    p2 = im.crop_patches(a, 8, seed=3, count=4)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(p1, p2))
    assert p1[0].pixels.shape == (8, 8, 3)
    with pytest.raises(ImageError):
        im.crop_patches(a, 41, seed=0)


# ---------------------------------------------------------------------------
# synthetic fixtures and files


@pytest.mark.parametrize("kind", im.SYNTH_KINDS)
def test_synth_deterministic(kind):
    assert np.array_equal(im.synth_image(kind, 9, (20, 24)).pixels, im.synth_image(kind, 9, (20, 24)).pixels)


def test_checker_period_two_has_two_colours():
    a = im.synth_image("checker", 1, (16, 16), period=2)
    assert len(np.unique(a.pixels.reshape(-1, 3), axis=0)) == 2


def test_noise_mean_within_clt_bound():
    a = im.synth_image("gaussian-noise", 2, (64, 64), mean=128, sigma=20)
    n = a.pixels.size
    assert abs(a.pixels.mean() - 128) < 3 * 20 / math.sqrt(n)


def test_color_wheel_covers_hues():
    a = im.synth_image("color-wheel", 0, (64, 64))
    ycc = im.rgb_to_ycbcr(a)
    assert ycc[..., 1].min() < 64 and ycc[..., 1].max() > 192
    assert ycc[..., 2].min() < 64 and ycc[..., 2].max() > 192


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_png_roundtrip_byte_exact(h, w, seed):
    px = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "a.png")
        im.write_png(ImageRGB(px), path)
        assert np.array_equal(im.read_png(path).pixels, px)


def test_image_validation():
    with pytest.raises(ImageError):
        ImageRGB(np.zeros((4, 4), np.uint8))
    with pytest.raises(ImageError):
        ImageRGB(np.zeros((4, 4, 3), np.float32))


def test_float_roundtrip():
    a = im.synth_image("ramp", 3, (8, 8))
    assert np.array_equal(ImageRGB.from_float(a.to_float()).pixels, a.pixels)


def test_manifest_roundtrip_and_pair_synthesis(tmp_path):
    hr = im.synth_image("ramp", 1, (16, 16))
    im.write_png(hr, tmp_path / "a.png")
    entries = [im.ManifestEntry(hr=str(tmp_path / "a.png"), split="eval", factor=2)]
    im.write_manifest(entries, tmp_path / "m.json")
    back = im.read_manifest(tmp_path / "m.json", "eval")
    assert back == entries
    lr, hr2 = back[0].load_pair(2)
    assert (lr.height, lr.width) == (8, 8)
    assert np.array_equal(hr2.pixels, hr.pixels)
    assert im.read_manifest(tmp_path / "m.json", "train") == []
