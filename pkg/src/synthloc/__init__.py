"""Patch-based localization of synthetic manipulations in images."""

from .heatmap import Accumulator, accumulate, finalize, threshold
from .metrics import EvalResult, dataset_eval, max_balanced_accuracy, pixel_auc
from .patch_grid import PatchRef, PatchSpec, enumerate_positions, extract_patch
from .pipeline import localize
from .raster import BinaryMask, FloatMap, Raster, read_image, read_mask, write_image, write_mask
from .scoring import PatchScore, ScorerConfig, score_patches

__version__ = "0.1.0"

__all__ = [
    "Accumulator", "BinaryMask", "EvalResult", "FloatMap", "PatchRef", "PatchScore",
    "PatchSpec", "Raster", "ScorerConfig", "accumulate", "dataset_eval", "enumerate_positions",
    "extract_patch", "finalize", "localize", "max_balanced_accuracy", "pixel_auc",
    "read_image", "read_mask", "score_patches", "threshold", "write_image", "write_mask",
]
