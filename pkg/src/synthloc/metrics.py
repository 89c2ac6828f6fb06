"""Pixel-level localization metrics: AUC, max balanced accuracy, calibration, false alarms."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .raster import BinaryMask, FloatMap


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    auc: float
    max_ba: float
    best_tau: float
    group: str = "all"
    n_images: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def _flatten(h: FloatMap, m: BinaryMask) -> tuple[np.ndarray, np.ndarray]:
    if (h.height, h.width) != (m.height, m.width):
        raise MetricError(
            f"heatmap {h.width}x{h.height} does not match mask {m.width}x{m.height}"
        )
    return h.values.ravel(), m.labels.ravel().astype(bool)


def _tally(scores: np.ndarray, labels: np.ndarray):
    """Unique sorted scores with per-value positive / negative counts."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("mask must contain both tampered and pristine pixels")
    uniq, inv = np.unique(scores, return_inverse=True)
    pos = np.bincount(inv, weights=labels, minlength=uniq.size).astype(np.int64)
    neg = np.bincount(inv, minlength=uniq.size).astype(np.int64) - pos
    return uniq, pos, neg, n_pos, n_neg


def auc_from_scores(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties, computed in exact integer arithmetic."""
    _, pos, neg, n_pos, n_neg = _tally(np.asarray(scores, dtype=np.float64).ravel(),
                                       np.asarray(labels).ravel())
    neg_below = np.concatenate(([0], np.cumsum(neg)[:-1]))
    # twice the U statistic, kept integral (int64) so ties stay exact
    twice_u = int(np.sum(2 * neg_below * pos + pos * neg))
    return twice_u / (2 * n_pos * n_neg)


def _ba_sweep(scores, labels):
    uniq, pos, neg, n_pos, n_neg = _tally(scores, labels)
    # classify score >= tau as synthetic, tau running over uniq then one step above max
    tp = np.concatenate((np.cumsum(pos[::-1])[::-1], [0]))
    fp = np.concatenate((np.cumsum(neg[::-1])[::-1], [0]))
    tn = n_neg - fp
    taus = np.concatenate((uniq, [np.nextafter(uniq[-1], np.inf)]))
    numer = tp * n_neg + tn * n_pos
    best = int(np.argmax(numer))  # first maximizer is the smallest tau
    ba = int(numer[best]) / (2 * n_pos * n_neg)
    return ba, float(taus[best])


def max_ba_from_scores(scores, labels) -> tuple[float, float]:
    return _ba_sweep(np.asarray(scores, dtype=np.float64).ravel(), np.asarray(labels).ravel())


def pixel_auc(h: FloatMap, m: BinaryMask) -> float:
    return auc_from_scores(*_flatten(h, m))


def max_balanced_accuracy(h: FloatMap, m: BinaryMask) -> tuple[float, float]:
    """Best (TPR + TNR) / 2 over all thresholds and the smallest tau reaching it."""
    return _ba_sweep(*_flatten(h, m))


def evaluate_pair(h: FloatMap, m: BinaryMask, group: str = "all") -> EvalResult:
    ba, tau = max_balanced_accuracy(h, m)
    return EvalResult(auc=pixel_auc(h, m), max_ba=ba, best_tau=tau, group=group)


def summarize(results: list[EvalResult], group: str) -> EvalResult:
    return EvalResult(
        auc=float(np.mean([r.auc for r in results])),
        max_ba=float(np.mean([r.max_ba for r in results])),
        best_tau=float(np.mean([r.best_tau for r in results])),
        group=group,
        n_images=len(results),
    )


def aggregate(results: list[EvalResult]) -> tuple[dict[str, EvalResult], EvalResult]:
    """Per-group and overall means of per-image results; groups sorted by tag."""
    if not results:
        raise MetricError("cannot aggregate an empty result list")
    by_group: dict[str, list[EvalResult]] = {}
    for r in results:
        by_group.setdefault(r.group, []).append(r)
    groups = OrderedDict(
        (tag, summarize(sorted(rs, key=lambda r: (r.auc, r.max_ba, r.best_tau)), tag))
        for tag, rs in sorted(by_group.items())
    )
    ordered = sorted(results, key=lambda r: (r.group, r.auc, r.max_ba, r.best_tau))
    return groups, summarize(ordered, "all")


def dataset_eval(pairs) -> tuple[dict[str, EvalResult], EvalResult]:
    """Average per-image AUC / max BA within each group tag and overall.

    ``pairs`` is an iterable of ``(FloatMap, BinaryMask, group_tag)``. Results
    are folded in a canonical order, so shuffling the input changes nothing.
    """
    pairs = list(pairs)
    if not pairs:
        raise MetricError("dataset_eval needs at least one (heatmap, mask, group) triple")
    return aggregate([evaluate_pair(h, m, g) for h, m, g in pairs])


def calibrate_threshold(pairs) -> float:
    """Threshold maximizing balanced accuracy over all pixels pooled across ``pairs``.

    ``pairs`` holds ``(FloatMap, BinaryMask)`` or ``(FloatMap, BinaryMask, tag)``.
    """
    pairs = list(pairs)
    if not pairs:
        raise MetricError("calibration needs at least one heatmap/mask pair")
    flat = [_flatten(p[0], p[1]) for p in pairs]
    scores = np.concatenate([s for s, _ in flat])
    labels = np.concatenate([lab for _, lab in flat])
    return _ba_sweep(scores, labels)[1]


def pooled_max_ba(pairs) -> tuple[float, float]:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("need at least one heatmap/mask pair")
    flat = [_flatten(p[0], p[1]) for p in pairs]
    return _ba_sweep(np.concatenate([s for s, _ in flat]),
                     np.concatenate([lab for _, lab in flat]))


def correct_detection_rate(heatmaps, tau: float) -> float:
    """Fraction of pixels with H < tau over a set of pristine heatmaps."""
    heatmaps = list(heatmaps)
    if not heatmaps:
        raise MetricError("need at least one pristine heatmap")
    below = sum(int(np.count_nonzero(h.values < tau)) for h in heatmaps)
    total = sum(h.values.size for h in heatmaps)
    return below / total


def false_alarm_rate(heatmaps, tau: float) -> float:
    """Fraction of pristine pixels flagged synthetic (H >= tau)."""
    return 1.0 - correct_detection_rate(heatmaps, tau)
