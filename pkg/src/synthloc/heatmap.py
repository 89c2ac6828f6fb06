"""Overlap-averaged tampering heatmaps built from patch scores."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .raster import BinaryMask, FloatMap, OutOfBoundsError, to_bytes


class Accumulator:
    """Per-pixel running sums (float64) and coverage counts (int64).

    Updates are recorded in 2-D difference arrays (four corner updates per
    patch) and folded into the dense buffers by prefix sums on demand, so
    adding N patches of side P costs O(N + R*C) instead of O(N*P^2).
    """

    def __init__(self, width: int, height: int):
        if width < 1 or height < 1:
            raise ValueError("accumulator needs positive dimensions")
        self.width = width
        self.height = height
        self._sum = np.zeros((height, width))
        self._count = np.zeros((height, width), dtype=np.int64)
        self._dsum = np.zeros((height + 1, width + 1))
        self._dcount = np.zeros((height + 1, width + 1), dtype=np.int64)
        self._pending = False

    def _check(self, top, left, size):
        if size < 1 or top < 0 or left < 0 or top + size > self.height or left + size > self.width:
            raise OutOfBoundsError(
                f"patch extent ({top}, {left}, {size}) outside {self.height}x{self.width}"
            )

    def add(self, top: int, left: int, size: int, score: float) -> None:
        self.add_many(np.array([top]), np.array([left]), size, np.array([score], dtype=float))

    def add_many(self, tops, lefts, size: int, scores) -> None:
        tops = np.asarray(tops, dtype=np.int64)
        lefts = np.asarray(lefts, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        if not (tops.shape == lefts.shape == scores.shape):
            raise ValueError("tops, lefts and scores must have the same length")
        if tops.size == 0:
            return
        if size < 1 or tops.min() < 0 or lefts.min() < 0 \
                or tops.max() + size > self.height or lefts.max() + size > self.width:
            raise OutOfBoundsError(f"patch extent of size {size} outside {self.height}x{self.width}")
        if np.any((scores < 0) | (scores > 1)):
            raise ValueError("patch scores must lie in [0, 1]")
        bottoms, rights = tops + size, lefts + size
        for rows, cols, sign in ((tops, lefts, 1), (tops, rights, -1),
                                 (bottoms, lefts, -1), (bottoms, rights, 1)):
            np.add.at(self._dsum, (rows, cols), sign * scores)
            np.add.at(self._dcount, (rows, cols), sign)
        self._pending = True

    def _flush(self):
        if not self._pending:
            return
        dsum = self._dsum.cumsum(axis=0).cumsum(axis=1)[:-1, :-1]
        dcount = self._dcount.cumsum(axis=0).cumsum(axis=1)[:-1, :-1]
        self._sum += dsum
        self._count += dcount
        self._dsum[:] = 0.0
        self._dcount[:] = 0
        self._pending = False

    @property
    def sums(self) -> np.ndarray:
        self._flush()
        return self._sum

    @property
    def counts(self) -> np.ndarray:
        self._flush()
        return self._count

    def merge(self, other: "Accumulator") -> None:
        if (other.width, other.height) != (self.width, self.height):
            raise ValueError("cannot merge accumulators of different sizes")
        self._flush()
        self._sum += other.sums
        self._count += other.counts


def accumulate(acc: Accumulator, score, patch_size: int) -> None:
    """Add one PatchScore's constant P x P contribution to ``acc``."""
    acc.add(score.top, score.left, patch_size, score.score)


def accumulate_scores(width: int, height: int, scores, patch_size: int,
                      workers: int = 1) -> Accumulator:
    """Accumulate a list of PatchScores, optionally over private per-worker accumulators.

    Worker accumulators cover contiguous chunks of ``scores`` and are merged
    pairwise in chunk order, so the result depends only on ``workers``.
    """
    tops = np.array([s.top for s in scores], dtype=np.int64)
    lefts = np.array([s.left for s in scores], dtype=np.int64)
    vals = np.array([s.score for s in scores], dtype=np.float64)
    if workers <= 1 or len(scores) < 2:
        acc = Accumulator(width, height)
        acc.add_many(tops, lefts, patch_size, vals)
        return acc

    chunks = np.array_split(np.arange(len(scores)), workers)

    def run(idx):
        part = Accumulator(width, height)
        part.add_many(tops[idx], lefts[idx], patch_size, vals[idx])
        part._flush()
        return part

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, chunks))
    while len(parts) > 1:
        merged = []
        for k in range(0, len(parts) - 1, 2):
            parts[k].merge(parts[k + 1])
            merged.append(parts[k])
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def finalize(acc: Accumulator) -> FloatMap:
    """Mean covering score per pixel; uncovered pixels are 0 (pristine)."""
    counts = acc.counts
    h = np.zeros((acc.height, acc.width))
    covered = counts > 0
    h[covered] = acc.sums[covered] / counts[covered]
    # prefix-sum residue can push a mean a few ulps outside [0, 1]
    return FloatMap(np.clip(h, 0.0, 1.0))


def threshold(h: FloatMap, tau: float) -> BinaryMask:
    """Label pixels with H >= tau as synthetic."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {tau}")
    return BinaryMask((h.values >= tau).astype(np.uint8))


def visualize(h: FloatMap) -> np.ndarray:
    """8-bit grayscale rendering, byte = round(H * 255)."""
    return to_bytes(h.values)
