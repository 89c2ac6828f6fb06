"""Sliding-window patch enumeration and extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import OutOfBoundsError, Raster

MIN_PATCH_SIZE = 8


class ImageTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int
    stride: int

    def __post_init__(self):
        if self.patch_size < MIN_PATCH_SIZE:
            raise ValueError(f"patch_size must be >= {MIN_PATCH_SIZE}, got {self.patch_size}")
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError(
                f"stride must satisfy 1 <= stride <= patch_size, got {self.stride}"
            )


@dataclass(frozen=True)
class PatchRef:
    top: int
    left: int
    size: int


def axis_positions(length: int, patch_size: int, stride: int) -> list[int]:
    """Lattice positions 0, S, 2S, ... plus the edge-anchored ``length - P``."""
    if length < patch_size:
        raise ImageTooSmallError(f"axis of {length} px is smaller than patch size {patch_size}")
    last = length - patch_size
    positions = list(range(0, last + 1, stride))
    if positions[-1] != last:
        positions.append(last)
    return positions


def enumerate_positions(height: int, width: int, spec: PatchSpec) -> list[PatchRef]:
    """Row-major list of patch anchors covering every pixel of a height x width image."""
    rows = axis_positions(height, spec.patch_size, spec.stride)
    cols = axis_positions(width, spec.patch_size, spec.stride)
    return [PatchRef(i, j, spec.patch_size) for i in rows for j in cols]


def check_ref(height: int, width: int, ref: PatchRef) -> None:
    if ref.top < 0 or ref.left < 0 or ref.top + ref.size > height or ref.left + ref.size > width:
        raise OutOfBoundsError(
            f"patch at ({ref.top}, {ref.left}) of size {ref.size} exceeds {height}x{width} image"
        )


def extract_patch(img: Raster, ref: PatchRef) -> Raster:
    check_ref(img.height, img.width, ref)
    p = ref.size
    return Raster(img.pixels[ref.top:ref.top + p, ref.left:ref.left + p, :].copy())


def extract_stack(img: Raster, refs: list[PatchRef]) -> np.ndarray:
    """All patches as one (N, P, P, channels) float64 array, in ref order."""
    if not refs:
        return np.zeros((0, 0, 0, img.channels))
    p = refs[0].size
    out = np.empty((len(refs), p, p, img.channels))
    for k, ref in enumerate(refs):
        if ref.size != p:
            raise ValueError("all refs in a stack must share one patch size")
        check_ref(img.height, img.width, ref)
        out[k] = img.pixels[ref.top:ref.top + p, ref.left:ref.left + p, :]
    return out
