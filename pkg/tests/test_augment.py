import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synthloc.augment import (
    AugmentConfig, LUMA_TABLE, apply, box_blur, brightness_contrast, color_jitter,
    hist_equalize, jpeg_roundtrip, quant_table, rescale_roundtrip, resize_bilinear, sample_stream,
)
from synthloc.raster import Raster


def _img(rng, shape):
    return Raster(rng.random(shape))


def test_disabled_is_identity(rng):
    img = _img(rng, (32, 32, 3))
    cfg = AugmentConfig.disabled(seed=1)
    for k in range(5):
        assert np.array_equal(apply(img, cfg, sample_stream(1, k)).pixels, img.pixels)


def test_hflip_involution(rng):
    img = _img(rng, (16, 24, 1))
    flip = AugmentConfig(**{**AugmentConfig.disabled().to_dict(), "p_hflip": 1.0})
    once = apply(img, flip, sample_stream(0, 0))
    assert np.array_equal(once.pixels, img.pixels[:, ::-1])
    assert np.array_equal(apply(once, flip, sample_stream(0, 1)).pixels, img.pixels)


def test_determinism_and_stream_independence(rng):
    img = _img(rng, (32, 32, 3))
    cfg = AugmentConfig(seed=5)
    a = apply(img, cfg, sample_stream(5, 2, 17)).pixels
    b = apply(img, cfg, sample_stream(5, 2, 17)).pixels
    assert np.array_equal(a, b)
    outs = {apply(img, cfg, sample_stream(5, 2, k)).pixels.tobytes() for k in range(8)}
    assert len(outs) > 1


def test_rng_position_independent_of_outcomes(rng):
    img = _img(rng, (16, 16, 1))
    on = AugmentConfig(**{**AugmentConfig().to_dict(), **{k: 1.0 for k in AugmentConfig.disabled().to_dict() if k.startswith("p_")}})
    off = AugmentConfig.disabled()
    r1, r2 = sample_stream(3, 0), sample_stream(3, 0)
    apply(img, on, r1)
    apply(img, off, r2)
    assert r1.random() == r2.random()


def test_output_shape_and_range(rng):
    cfg = AugmentConfig(seed=2)
    for k in range(20):
        img = _img(rng, (24, 40, 3) if k % 2 else (32, 32, 1))
        out = apply(img, cfg, sample_stream(2, k))
        assert out.pixels.shape == img.pixels.shape
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(p_blur=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(jpeg_quality=(20, 100))
    with pytest.raises(ValueError):
        AugmentConfig(scale_range=(0.2, 1.0))


def test_config_roundtrip():
    cfg = AugmentConfig(seed=9, p_jpeg=0.3)
    assert AugmentConfig.from_dict(cfg.to_dict()) == cfg


def test_quant_table_ijg():
    assert np.array_equal(quant_table(50), LUMA_TABLE)
    assert np.all(quant_table(100) == 1)
    # quality 40 scale 125: 16 * 1.25 = 20
    assert quant_table(40)[0, 0] == 20
    with pytest.raises(ValueError):
        quant_table(39)


def test_jpeg_q100_error_bound_gray(rng):
    for _ in range(20):
        img = _img(rng, (int(rng.integers(8, 40)), int(rng.integers(8, 40)), 1))
        out = jpeg_roundtrip(img, 100)
        assert out.pixels.shape == img.pixels.shape
        assert np.abs(out.pixels - img.pixels).max() <= 2 / 255


def test_jpeg_q100_error_bound_rgb(rng):
    # chroma rounding is amplified by up to 1.772 on the way back to RGB
    for _ in range(20):
        img = _img(rng, (24, 24, 3))
        assert np.abs(jpeg_roundtrip(img, 100).pixels - img.pixels).max() <= 4 / 255


def test_jpeg_step_edge_ringing():
    step = Raster(np.where(np.arange(32)[None, :] < 13, 0.2, 0.8).repeat(32, axis=0))
    err = lambda q: np.abs(jpeg_roundtrip(step, q).pixels - step.pixels).mean()
    assert err(40) > err(90)


def test_jpeg_error_monotone_in_quality(rng):
    imgs = [_img(rng, (32, 32, 1)) for _ in range(10)]
    errs = [np.mean([np.abs(jpeg_roundtrip(i, q).pixels - i.pixels).mean() for i in imgs])
            for q in (40, 60, 80, 100)]
    assert all(a >= b for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("quality", [40, 50, 75, 100])
def test_jpeg_constant_image(quality):
    img = Raster(np.full((16, 16), 0.4))
    out = jpeg_roundtrip(img, quality).pixels
    assert np.ptp(out) < 1e-9
    # DC is the only nonzero coefficient; its step is Q00 / 8 in the ortho basis
    bound = quant_table(quality)[0, 0] / 16 / 255
    assert np.abs(out - 0.4).max() <= bound + 1e-12
    if quality >= 50:
        assert np.abs(out - 0.4).max() <= 1 / 255


def test_rescale_identity(rng):
    img = _img(rng, (24, 24, 3))
    assert np.allclose(rescale_roundtrip(img, 1.0).pixels, img.pixels, atol=1e-12)
    with pytest.raises(ValueError):
        rescale_roundtrip(img, 2.0)


def test_resize_bilinear_constant_and_linear():
    x = np.full((7, 9, 1), 0.3)
    assert np.allclose(resize_bilinear(x, 13, 4), 0.3)
    ramp = np.tile(np.arange(8.0)[None, :, None], (4, 1, 1))
    up = resize_bilinear(ramp, 4, 16)
    # interior samples lie on the line through the pixel centres
    assert np.allclose(up[0, 1:-1, 0], (np.arange(1, 15) + 0.5) / 2 - 0.5)


def test_rescale_attenuates_checkerboard():
    n = 32
    checker = np.where(np.add.outer(np.arange(n), np.arange(n)) % 2 == 0, 0.52, 0.48)
    img = Raster(checker)
    spec = lambda a: np.abs(np.fft.fft2(a - a.mean()))[n // 2, n // 2]
    before = spec(img.pixels[:, :, 0])
    after = spec(rescale_roundtrip(img, 0.5).pixels[:, :, 0])
    assert after < 0.1 * before


def test_hist_equalize_two_levels():
    x = np.array([[0.25, 0.75], [0.25, 0.75]])
    out = hist_equalize(Raster(x)).pixels[:, :, 0]
    assert np.array_equal(out, np.array([[0.5, 1.0], [0.5, 1.0]]))


def test_box_blur_constant_and_mean(rng):
    assert np.allclose(box_blur(Raster(np.full((10, 10), 0.6)), 5).pixels, 0.6)
    img = _img(rng, (12, 12, 1))
    out = box_blur(img, 3).pixels
    assert np.isclose(out[5, 5, 0], img.pixels[4:7, 4:7, 0].mean())


def test_brightness_contrast_clip():
    out = brightness_contrast(Raster(np.array([[0.0, 0.5, 1.0]])), 0.1, 0.2).pixels[0, :, 0]
    assert np.allclose(out, [0.1, 0.7, 1.0])


def test_color_jitter_gray_noop_and_neutral(rng):
    gray = _img(rng, (8, 8, 1))
    assert color_jitter(gray, 0.2, 0.2) is gray
    neutral = Raster(np.full((4, 4, 3), 0.5))
    assert np.allclose(color_jitter(neutral, 0.2, 0.1).pixels, 0.5)
    img = Raster(rng.random((8, 8, 3)) * 0.5 + 0.25)
    assert np.allclose(color_jitter(img, 0.0, 0.0).pixels, img.pixels)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(8, 40), st.integers(8, 40), st.sampled_from([1, 3]))
def test_apply_properties(seed, h, w, c):
    img = Raster(np.random.default_rng(seed).random((h, w, c)))
    out = apply(img, AugmentConfig(seed=seed), sample_stream(seed, 0))
    assert out.pixels.shape == (h, w, c)
    assert np.isfinite(out.pixels).all()
    assert 0.0 <= out.pixels.min() and out.pixels.max() <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(40, 99))
def test_jpeg_idempotent_range(seed, q):
    img = Raster(np.random.default_rng(seed).random((16, 16, 1)))
    out = jpeg_roundtrip(img, q).pixels
    assert 0.0 <= out.min() and out.max() <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_hist_equalize_monotone(seed):
    x = np.random.default_rng(seed).random((12, 12, 1))
    out = hist_equalize(Raster(x)).pixels.ravel()
    order = np.argsort(x.ravel(), kind="stable")
    assert np.all(np.diff(out[order]) >= 0)
    assert 0.0 <= out.min() and out.max() <= 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_geometric_transforms_permute_pixels(seed):
    geo = {**AugmentConfig.disabled().to_dict(), "p_hflip": 0.5, "p_vflip": 0.5, "p_rot90": 0.5}
    img = Raster(np.random.default_rng(seed).random((16, 16, 1)))
    out = apply(img, AugmentConfig.from_dict(geo), sample_stream(seed, 1))
    assert np.array_equal(np.sort(out.pixels.ravel()), np.sort(img.pixels.ravel()))
