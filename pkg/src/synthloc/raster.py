"""Image, mask and heatmap containers with 8-bit / HMAP file I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError


class RasterError(Exception):
    """Base class for raster I/O and validation failures."""


class MissingFileError(RasterError):
    pass


class UnsupportedFormatError(RasterError):
    pass


class CorruptFileError(RasterError):
    pass


class NonBinaryMaskError(RasterError):
    pass


class DimensionMismatchError(RasterError):
    pass


class OutOfBoundsError(RasterError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Raster:
    """An image with pixels in [0, 1], stored as a (height, width, channels) array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"raster must be HxWx1 or HxWx3, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("raster must be at least 1x1")
        if not np.all((px >= 0.0) & (px <= 1.0)):
            raise ValueError("raster values must lie in [0, 1]")
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Per-pixel tampering labels: 1 for synthetic, 0 for pristine."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {lab.shape}")
        if not np.all((lab == 0) | (lab == 1)):
            raise ValueError("mask labels must be exactly 0 or 1")
        lab = np.ascontiguousarray(lab, dtype=np.uint8)
        lab.flags.writeable = False
        object.__setattr__(self, "labels", lab)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class FloatMap:
    """Real-valued per-pixel tampering heatmap with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        val = np.asarray(self.values, dtype=np.float64)
        if val.ndim != 2:
            raise ValueError(f"float map must be 2-D, got shape {val.shape}")
        if not np.all((val >= 0.0) & (val <= 1.0)):
            raise ValueError("float map values must lie in [0, 1]")
        val = np.ascontiguousarray(val)
        val.flags.writeable = False
        object.__setattr__(self, "values", val)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FloatMap):
            return NotImplemented
        return np.array_equal(self.values, other.values)


def _open_8bit(path) -> Image.Image:
    if not os.path.isfile(path):
        raise MissingFileError(f"no such file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except UnidentifiedImageError as exc:
        raise CorruptFileError(f"cannot identify image file {path}") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptFileError(f"corrupt image stream in {path}: {exc}") from exc
    return img


def read_image(path) -> Raster:
    """Read an 8-bit grayscale or RGB PNG / PGM / PPM, mapping bytes to v/255."""
    img = _open_8bit(path)
    if img.format not in ("PNG", "PPM"):
        raise UnsupportedFormatError(f"{path}: unsupported file format {img.format}")
    if img.mode not in ("L", "RGB"):
        raise UnsupportedFormatError(
            f"{path}: unsupported bit depth / color type (mode {img.mode}); "
            "only 8-bit grayscale or RGB is accepted"
        )
    data = np.asarray(img, dtype=np.uint8)
    return Raster(data.astype(np.float64) / 255.0)


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] values to uint8 with round-half-up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def _save_png(arr: np.ndarray, path) -> None:
    try:
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise RasterError(f"cannot write {path}: {exc}") from exc


def write_image(r: Raster, path) -> None:
    """Write an 8-bit PNG, quantizing each value as round(v*255)."""
    data = to_bytes(r.pixels)
    if r.channels == 1:
        data = data[:, :, 0]
    _save_png(data, path)


def read_mask(path) -> BinaryMask:
    img = _open_8bit(path)
    if img.mode != "L":
        raise UnsupportedFormatError(f"{path}: masks must be 8-bit grayscale, got mode {img.mode}")
    data = np.asarray(img, dtype=np.uint8)
    bad = (data != 0) & (data != 255)
    if bad.any():
        r, c = map(int, np.argwhere(bad)[0])
        raise NonBinaryMaskError(
            f"non-binary mask value {int(data[r, c])} at (row={r}, col={c}) in {path}"
        )
    return BinaryMask((data == 255).astype(np.uint8))


def write_mask(m: BinaryMask, path) -> None:
    _save_png((m.labels * 255).astype(np.uint8), path)


HMAP_MAGIC = b"HMAP"


def encode_floatmap(h: FloatMap) -> bytes:
    header = f"HMAP 1 {h.width} {h.height}\n".encode("ascii")
    return header + h.values.astype("<f4").tobytes()


def decode_floatmap(blob: bytes) -> FloatMap:
    nl = blob.find(b"\n")
    if nl < 0 or not blob.startswith(HMAP_MAGIC + b" "):
        raise CorruptFileError("bad magic: not an HMAP v1 file")
    parts = blob[:nl].split()
    if len(parts) != 4 or parts[1] != b"1":
        raise CorruptFileError(f"bad HMAP header {blob[:nl]!r}")
    try:
        width, height = int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise CorruptFileError(f"bad HMAP header {blob[:nl]!r}") from exc
    payload = blob[nl + 1:]
    if width < 1 or height < 1 or len(payload) != 4 * width * height:
        raise DimensionMismatchError(
            f"HMAP header declares {width}x{height} but payload holds {len(payload)} bytes"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width)
    return FloatMap(values.astype(np.float64))


def write_floatmap(h: FloatMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_floatmap(h))


def read_floatmap(path) -> FloatMap:
    if not os.path.isfile(path):
        raise MissingFileError(f"no such file: {path}")
    with open(path, "rb") as fh:
        return decode_floatmap(fh.read())


def mask_from_rect(width: int, height: int, top: int, left: int, side: int) -> BinaryMask:
    """Mask with ones on the square [top, top+side) x [left, left+side)."""
    if side < 1 or top < 0 or left < 0 or top + side > height or left + side > width:
        raise OutOfBoundsError(
            f"square at ({top}, {left}) with side {side} does not fit in {width}x{height}"
        )
    labels = np.zeros((height, width), dtype=np.uint8)
    labels[top:top + side, left:left + side] = 1
    return BinaryMask(labels)

