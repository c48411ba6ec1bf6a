"""PFM/PNG round trips and the PSNR/SSIM wrappers."""

import numpy as np
import pytest

from uqsplat import imgio


def test_pfm_roundtrip_gray(tmp_path):
    data = np.random.default_rng(0).normal(size=(13, 7)) * 50
    p = tmp_path / "d.pfm"
    imgio.write_pfm(p, data)
    back = imgio.read_pfm(p)
    np.testing.assert_allclose(back, data.astype(np.float32), rtol=0, atol=0)


def test_pfm_roundtrip_rgb(tmp_path):
    data = np.random.default_rng(1).normal(size=(5, 9, 3))
    p = tmp_path / "n.pfm"
    imgio.write_pfm(p, data)
    np.testing.assert_array_equal(imgio.read_pfm(p), data.astype(np.float32))


def test_pfm_rejects_bad_shapes(tmp_path):
    with pytest.raises(ValueError):
        imgio.write_pfm(tmp_path / "x.pfm", np.zeros((4, 4, 2)))
    junk = tmp_path / "junk.pfm"
    junk.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError):
        imgio.read_pfm(junk)


def test_png8_roundtrip(tmp_path):
    img = np.random.default_rng(2).uniform(size=(16, 16, 3))
    p = tmp_path / "c.png"
    imgio.write_png(p, img)
    back = imgio.read_png(p)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_png8_gray_and_clipping(tmp_path):
    img = np.array([[-0.5, 0.0], [1.0, 2.0]])
    p = tmp_path / "g.png"
    imgio.write_png(p, img)
    back = imgio.read_png(p)
    np.testing.assert_allclose(back, [[0.0, 0.0], [1.0, 1.0]])


def test_png16_roundtrip(tmp_path):
    depth = np.random.default_rng(3).uniform(0.0, 4.0, size=(12, 12))
    p = tmp_path / "d16.png"
    imgio.write_png16(p, depth, scale=4.0)
    back = imgio.read_png(p) * 4.0
    assert np.abs(back - depth).max() <= 0.5 / 65535 * 4.0 + 1e-9


def test_psnr_known_values():
    a = np.full((8, 8, 3), 0.5)
    assert imgio.psnr(a, a) == 100.0
    b = np.full((8, 8, 3), 0.6)  # MSE exactly 0.01
    assert abs(imgio.psnr(a, b) - 20.0) < 1e-9
    with pytest.raises(ValueError):
        imgio.psnr(a, np.zeros((4, 4, 3)))


def test_psnr_uniform_noise():
    # uniform noise in [-0.05, 0.05]: MSE = 0.1^2 / 12, PSNR ~ 30.79 dB
    rng = np.random.default_rng(0)
    img = rng.uniform(0.2, 0.8, size=(256, 256, 3))
    noisy = img + rng.uniform(-0.05, 0.05, size=img.shape)
    assert abs(imgio.psnr(noisy, img) - 30.79) < 0.3


def test_psnr_ssim_pair():
    img = np.random.default_rng(4).uniform(size=(32, 32, 3))
    p, s = imgio.psnr_ssim(img, img)
    assert p == 100.0
    assert abs(s - 1.0) < 1e-12
    gray = img.mean(axis=2)
    p2, s2 = imgio.psnr_ssim(gray, gray)  # 2D input is promoted
    assert p2 == 100.0 and abs(s2 - 1.0) < 1e-12


def test_save_render_maps(tmp_path):
    from uqsplat.rasterizer import RenderConfig, render
    from util_scenes import random_gaussians, simple_camera

    out = render(random_gaussians(20, seed=0), simple_camera(size=24), RenderConfig())
    imgio.save_render_maps(tmp_path, "v0", out, depth_scale=10.0)
    for suffix in ("color.png", "depth.pfm", "normal.pfm", "uncertainty.png", "depth16.png"):
        assert (tmp_path / f"v0_{suffix}").exists()
    d = imgio.read_pfm(tmp_path / "v0_depth.pfm")
    assert d.shape == (24, 24)
