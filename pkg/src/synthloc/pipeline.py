"""End-to-end localization: enumerate patches, score them, average into a heatmap."""

from __future__ import annotations

from .heatmap import accumulate_scores, finalize
from .patch_grid import PatchSpec, enumerate_positions
from .raster import FloatMap, Raster
from .scoring import ScorerConfig, score_patches


def localize(img: Raster, spec: PatchSpec, scorer: ScorerConfig, workers: int = 1) -> FloatMap:
    refs = enumerate_positions(img.height, img.width, spec)
    scores = score_patches(img, refs, scorer, workers=workers)
    acc = accumulate_scores(img.width, img.height, scores, spec.patch_size, workers=workers)
    return finalize(acc)
