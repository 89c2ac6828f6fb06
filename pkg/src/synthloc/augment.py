"""Training-time augmentation: geometric flips, photometric jitter, resampling and JPEG artifacts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import uniform_filter

from .raster import Raster

# Standard JPEG luminance quantization table (ITU-T T.81, Annex K).
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

JPEG_QUALITY_MIN, JPEG_QUALITY_MAX = 40, 100
SCALE_MIN, SCALE_MAX = 0.5, 1.5


@dataclass(frozen=True)
class AugmentConfig:
    """Per-transform probabilities and parameter ranges.

    Transforms run in field order: hflip, vflip, rot90, equalize, blur,
    brightness/contrast, color jitter, rescale, then JPEG last.
    """

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    p_equalize: float = 0.5
    p_blur: float = 0.5
    p_brightness_contrast: float = 0.5
    p_color: float = 0.5
    p_rescale: float = 0.5
    p_jpeg: float = 0.8
    jpeg_quality: tuple[int, int] = (JPEG_QUALITY_MIN, JPEG_QUALITY_MAX)
    scale_range: tuple[float, float] = (SCALE_MIN, SCALE_MAX)
    blur_kernels: tuple[int, ...] = (3, 5, 7)
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    saturation_limit: float = 0.2
    hue_limit: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("p_"):
                p = getattr(self, f.name)
                if not 0.0 <= p <= 1.0:
                    raise ValueError(f"{f.name} must lie in [0, 1], got {p}")
        lo, hi = self.jpeg_quality
        if not JPEG_QUALITY_MIN <= lo <= hi <= JPEG_QUALITY_MAX:
            raise ValueError(f"jpeg_quality bounds must satisfy 40 <= lo <= hi <= 100, got {self.jpeg_quality}")
        slo, shi = self.scale_range
        if not SCALE_MIN <= slo <= shi <= SCALE_MAX:
            raise ValueError(f"scale_range must lie within [0.5, 1.5], got {self.scale_range}")
        if not self.blur_kernels or any(k < 1 or k % 2 == 0 for k in self.blur_kernels):
            raise ValueError("blur kernels must be odd positive integers")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(p_hflip=0, p_vflip=0, p_rot90=0, p_equalize=0, p_blur=0,
                   p_brightness_contrast=0, p_color=0, p_rescale=0, p_jpeg=0, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("jpeg_quality", "scale_range", "blur_kernels"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augment config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("jpeg_quality", "scale_range", "blur_kernels"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def sample_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent RNG stream for a sample identified by ``keys`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# ---------------------------------------------------------------- JPEG


def quant_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table."""
    if not JPEG_QUALITY_MIN <= quality <= JPEG_QUALITY_MAX:
        raise ValueError(f"JPEG quality must lie in [40, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(1.0, np.floor(LUMA_TABLE * scale / 100.0 + 0.5))


def _rgb_to_ycbcr(x):
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def _ycbcr_to_rgb(x):
    y, cb, cr = x[..., 0], x[..., 1] - 128.0, x[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    blocks = (plane - 128.0).reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, type=2, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    out = idctn(coef, type=2, axes=(2, 3), norm="ortho") + 128.0
    return out.transpose(0, 2, 1, 3).reshape(h, w)


def jpeg_roundtrip(img: Raster, quality: int) -> Raster:
    """Simulate JPEG quantization artifacts (no entropy coding, no chroma subsampling)."""
    table = quant_table(int(quality))
    x = img.pixels * 255.0
    h, w = img.height, img.width
    ph, pw = -h % 8, -w % 8
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="symmetric")
    if img.channels == 3:
        x = _rgb_to_ycbcr(x)
    planes = [_quantize_plane(x[:, :, c], table) for c in range(x.shape[2])]
    y = np.stack(planes, axis=-1)
    if img.channels == 3:
        y = _ycbcr_to_rgb(y)
    y = y[:h, :w]
    return Raster(np.clip(y / 255.0, 0.0, 1.0))


# ---------------------------------------------------------------- resampling


def _bilinear_axis(n_in: int, n_out: int):
    # pixel-center aligned sampling, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array."""
    r0, r1, fr = _bilinear_axis(x.shape[0], height)
    c0, c1, fc = _bilinear_axis(x.shape[1], width)
    rows = x[r0] * (1 - fr)[:, None, None] + x[r1] * fr[:, None, None]
    return rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]


def rescale_roundtrip(img: Raster, factor: float) -> Raster:
    """Bilinear downscale/upscale by ``factor`` and back to the original size."""
    if not SCALE_MIN <= factor <= SCALE_MAX:
        raise ValueError(f"rescale factor must lie in [0.5, 1.5], got {factor}")
    h, w = img.height, img.width
    sh, sw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    small = resize_bilinear(img.pixels, sh, sw)
    back = resize_bilinear(small, h, w)
    return Raster(np.clip(back, 0.0, 1.0))


# ---------------------------------------------------------------- photometric


def hist_equalize(img: Raster) -> Raster:
    """Per-channel histogram equalization on 256 bins: v -> CDF(bin(v))."""
    x = img.pixels
    bins = np.floor(x * 255.0 + 0.5).astype(np.int64)
    out = np.empty_like(x)
    for c in range(img.channels):
        b = bins[:, :, c]
        cdf = np.cumsum(np.bincount(b.ravel(), minlength=256)) / b.size
        out[:, :, c] = cdf[b]
    return Raster(out)


def box_blur(img: Raster, kernel: int) -> Raster:
    out = uniform_filter(img.pixels, size=(kernel, kernel, 1), mode="reflect")
    return Raster(np.clip(out, 0.0, 1.0))


def brightness_contrast(img: Raster, brightness: float, contrast: float) -> Raster:
    return Raster(np.clip(img.pixels * (1.0 + contrast) + brightness, 0.0, 1.0))


def color_jitter(img: Raster, saturation: float, hue: float) -> Raster:
    """Scale chroma by (1 + saturation) and rotate hue by ``hue`` half-turns in YIQ space."""
    if img.channels != 3:
        return img
    x = img.pixels
    to_yiq = np.array([[0.299, 0.587, 0.114],
                       [0.595716, -0.274453, -0.321263],
                       [0.211456, -0.522591, 0.311135]])
    yiq = x @ to_yiq.T
    theta = hue * np.pi
    cos, sin = np.cos(theta), np.sin(theta)
    i, q = yiq[..., 1], yiq[..., 2]
    k = 1.0 + saturation
    yiq = np.stack([yiq[..., 0], k * (cos * i - sin * q), k * (sin * i + cos * q)], axis=-1)
    rgb = yiq @ np.linalg.inv(to_yiq).T
    return Raster(np.clip(rgb, 0.0, 1.0))


# ---------------------------------------------------------------- pipeline


def apply(patch: Raster, cfg: AugmentConfig, rng: np.random.Generator) -> Raster:
    """Apply each transform independently with its configured probability.

    Every transform draws its gate and parameters from ``rng`` whether or not
    it fires, so the stream position after a call never depends on outcomes.
    """
    x = patch
    if rng.random() < cfg.p_hflip:
        x = Raster(x.pixels[:, ::-1])
    if rng.random() < cfg.p_vflip:
        x = Raster(x.pixels[::-1, :])

    fire, turns = rng.random() < cfg.p_rot90, int(rng.integers(1, 4))
    if x.height != x.width:
        turns = 2  # odd quarter turns would swap the dimensions
    if fire:
        x = Raster(np.rot90(x.pixels, k=turns, axes=(0, 1)))

    if rng.random() < cfg.p_equalize:
        x = hist_equalize(x)

    fire, k = rng.random() < cfg.p_blur, int(rng.choice(cfg.blur_kernels))
    if fire:
        x = box_blur(x, k)

    fire = rng.random() < cfg.p_brightness_contrast
    b = rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)
    c = rng.uniform(-cfg.contrast_limit, cfg.contrast_limit)
    if fire:
        x = brightness_contrast(x, b, c)

    fire = rng.random() < cfg.p_color
    s = rng.uniform(-cfg.saturation_limit, cfg.saturation_limit)
    hshift = rng.uniform(-cfg.hue_limit, cfg.hue_limit)
    if fire:
        x = color_jitter(x, s, hshift)

    fire, f = rng.random() < cfg.p_rescale, rng.uniform(*cfg.scale_range)
    if fire:
        x = rescale_roundtrip(x, f)

    lo, hi = cfg.jpeg_quality
    fire, q = rng.random() < cfg.p_jpeg, int(rng.integers(lo, hi + 1))
    if fire:
        x = jpeg_roundtrip(x, q)
    return x
