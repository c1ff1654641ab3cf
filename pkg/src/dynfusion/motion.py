"""Unknown-motion segmentation from clustered ICP residuals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .segmentation import SegmentsMask, label_areas, segment_overlap


class KMeans2Result(NamedTuple):
    static_centroid: float
    dynamic_centroid: float
    labels: np.ndarray  # True = dynamic cluster
    degenerate: bool


@dataclass
class BinaryMotionMask:
    bits: np.ndarray
    static_centroid: float
    dynamic_centroid: float
    degenerate: bool = False


def _split_sse(csum, csum2, k, n):
    left = csum2[k - 1] - csum[k - 1] ** 2 / k
    right = (csum2[-1] - csum2[k - 1]) - (csum[-1] - csum[k - 1]) ** 2 / (n - k)
    return left + right


def kmeans2(residuals, max_iters: int = 100) -> KMeans2Result:
    """Two-cluster 1-D k-means.

    Lloyd iterations start from the sample minimum and maximum. In one
    dimension every partition is a threshold on the sorted values, so after
    Lloyd converges the best threshold split is checked with prefix sums and,
    if it beats the Lloyd fixed point, used as a restart. The returned
    partition therefore minimizes the within-cluster SSE.
    """
    x = np.asarray(residuals, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("kmeans2 needs at least two samples")
    xs = np.sort(x)
    n = xs.size
    if xs[0] == xs[-1]:
        return KMeans2Result(float(xs[0]), float(xs[0]), np.zeros(x.shape, dtype=bool), True)
    csum = np.cumsum(xs)
    csum2 = np.cumsum(xs * xs)

    def lloyd(k):
        # k = size of the low cluster in sorted order
        for _ in range(max_iters):
            c_lo = csum[k - 1] / k
            c_hi = (csum[-1] - csum[k - 1]) / (n - k)
            k_new = int(np.searchsorted(xs, 0.5 * (c_lo + c_hi), side="right"))
            k_new = min(max(k_new, 1), n - 1)
            if k_new == k:
                break
            k = k_new
        return k

    k = lloyd(int(np.searchsorted(xs, 0.5 * (xs[0] + xs[-1]), side="right")))
    # candidate splits sit between distinct neighbours only
    cut = np.nonzero(xs[1:] > xs[:-1])[0] + 1
    sse = _split_sse(csum, csum2, cut, n)
    best = int(cut[np.argmin(sse)])
    if _split_sse(csum, csum2, np.array([best]), n)[0] < _split_sse(csum, csum2, np.array([k]), n)[0]:
        k = lloyd(best)
    threshold = xs[k]
    labels = x >= threshold
    return KMeans2Result(float(x[~labels].mean()), float(x[labels].mean()), labels, False)


def binary_motion_mask(residual_map: np.ndarray, valid_mask: np.ndarray,
                       min_dynamic_centroid: float = 2.5e-3, max_samples: int = 20000,
                       max_iters: int = 100) -> BinaryMotionMask:
    """Dynamic-cluster pixels of a residual map.

    Valid residuals (``valid_mask`` and nonnegative) are subsampled with a
    uniform stride to at most ``max_samples`` values, clustered, and every
    valid pixel is relabelled by its nearest centroid. A degenerate
    clustering or a dynamic centroid below ``min_dynamic_centroid`` yields an
    empty mask.
    """
    valid = valid_mask & np.isfinite(residual_map) & (residual_map >= 0)
    values = residual_map[valid]
    empty = np.zeros(residual_map.shape, dtype=bool)
    if values.size < 2:
        return BinaryMotionMask(empty, 0.0, 0.0, True)
    stride = max(1, -(-values.size // max_samples))
    km = kmeans2(values[::stride], max_iters)
    if km.degenerate or km.dynamic_centroid < min_dynamic_centroid:
        return BinaryMotionMask(empty, km.static_centroid, km.dynamic_centroid, km.degenerate)
    mid = 0.5 * (km.static_centroid + km.dynamic_centroid)
    bits = valid & (residual_map > mid)
    return BinaryMotionMask(bits, km.static_centroid, km.dynamic_centroid, False)


def motion_segments(binary: BinaryMotionMask, segments: SegmentsMask, overlap_threshold: float = 0.3,
                    metric: str = "intersection_over_segment") -> np.ndarray:
    """Complete a binary motion mask to whole geometric segments.

    Unlabeled (edge) pixels are never marked.
    """
    bits = binary.bits if isinstance(binary, BinaryMotionMask) else np.asarray(binary, dtype=bool)
    if not bits.any() or segments.segment_count == 0:
        return np.zeros(bits.shape, dtype=bool)
    areas = label_areas(segments)
    score = segment_overlap(segments.labels, segments.segment_count, areas, bits, metric)
    marked = score >= overlap_threshold
    marked[0] = False
    return marked[segments.labels]
