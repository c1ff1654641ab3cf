"""Per-frame geometric segmentation of a depth image into surface segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import Frame

_NEIGHBORS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class SegmentsMask:
    labels: np.ndarray
    segment_count: int
    areas: dict[int, int]


def _shifted(a: np.ndarray, dy: int, dx: int, fill):
    """``out[y, x] = a[y + dy, x + dx]``, ``fill`` outside the image."""
    out = np.full_like(a, fill)
    h, w = a.shape[:2]
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = a[ys_src, xs_src]
    return out


def compute_edge_mask(frame: Frame, theta_dist: float = 0.01, theta_angle: float = np.deg2rad(20.0),
                      vertex_map=None, normal_map=None, valid_mask=None) -> np.ndarray:
    """Distance and normal discontinuities over the 8-neighbourhood.

    A valid pixel p is an edge if some valid neighbour q has
    ``|(v_q - v_p) . n_p| > theta_dist`` or ``n_p . n_q < cos(theta_angle)``.
    Invalid pixels are always edges.
    """
    V = frame.vertex_map if vertex_map is None else vertex_map
    N = frame.normal_map if normal_map is None else normal_map
    valid = frame.valid_mask if valid_mask is None else valid_mask
    cos_t = np.cos(theta_angle)
    edge = ~valid
    for dy, dx in _NEIGHBORS_8:
        qv = _shifted(valid, dy, dx, False)
        Vq = _shifted(V, dy, dx, 0.0)
        Nq = _shifted(N, dy, dx, 0.0)
        dist = np.abs(np.einsum("ijk,ijk->ij", Vq - V, N))
        dot = np.einsum("ijk,ijk->ij", N, Nq)
        edge |= valid & qv & ((dist > theta_dist) | (dot < cos_t))
    return edge


def connected_components(edges: np.ndarray, min_segment_area: int = 300) -> SegmentsMask:
    """4-connected components of the non-edge pixels.

    Components below ``min_segment_area`` get label 0; the rest are labelled
    1..n by decreasing area (ties by first pixel in raster order).
    """
    edges = np.asarray(edges, dtype=bool)
    raw, n = ndimage.label(~edges, structure=_FOUR_CONNECTED)
    labels = np.zeros(edges.shape, dtype=np.int32)
    if n == 0:
        return SegmentsMask(labels, 0, {})
    flat = raw.ravel()
    area = np.bincount(flat, minlength=n + 1)[1:]
    # raster index of each component's first pixel, for a stable tie-break
    order_idx = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order_idx], np.arange(1, n + 1))
    first = order_idx[starts]
    keep = np.nonzero(area >= min_segment_area)[0]
    keep = keep[np.lexsort((first[keep], -area[keep]))]
    lut = np.zeros(n + 1, dtype=np.int32)
    lut[keep + 1] = np.arange(1, keep.size + 1, dtype=np.int32)
    labels = lut[raw]
    areas = {int(i + 1): int(area[k]) for i, k in enumerate(keep)}
    return SegmentsMask(labels, int(keep.size), areas)


def segment_frame(frame: Frame, theta_dist: float = 0.01, theta_angle: float = np.deg2rad(20.0),
                  min_segment_area: int = 300) -> SegmentsMask:
    return connected_components(compute_edge_mask(frame, theta_dist, theta_angle), min_segment_area)


def segment_pixel_counts(labels: np.ndarray, count: int, mask: np.ndarray) -> np.ndarray:
    """``out[l] = |segment l  ∩  mask|`` for l in 0..count."""
    return np.bincount(labels[mask].ravel(), minlength=count + 1)[: count + 1]


def segment_overlap(labels: np.ndarray, count: int, areas: np.ndarray, mask: np.ndarray,
                    metric: str = "intersection_over_segment") -> np.ndarray:
    """Overlap score of every segment with a boolean region (index 0 unused)."""
    inter = segment_pixel_counts(labels, count, mask).astype(float)
    if metric == "intersection_over_segment":
        denom = areas.astype(float)
    elif metric == "iou":
        denom = areas + int(mask.sum()) - inter
    else:
        raise ValueError(f"unknown overlap metric {metric!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(denom > 0, inter / np.where(denom > 0, denom, 1.0), 0.0)
    score[0] = 0.0
    return score


def label_areas(seg: SegmentsMask) -> np.ndarray:
    areas = np.zeros(seg.segment_count + 1, dtype=np.int64)
    for k, a in seg.areas.items():
        areas[k] = a
    return areas


def absorb_unlabeled(segments: SegmentsMask, depth: np.ndarray, valid: np.ndarray, iterations: int = 8,
                     depth_ratio: float = 0.1) -> np.ndarray:
    """Segment labels grown into neighbouring unlabeled valid pixels.

    Edge pixels and pixels of discarded small components carry label 0, so
    a mask painted from whole segments misses the band along every object
    outline. Each iteration gives every unlabeled valid pixel the label of
    its 4-neighbour with the closest depth, if that gap is at most
    ``depth_ratio`` times the pixel's depth (relative, so grazing surfaces
    with large per-pixel depth steps still connect). The segmentation
    itself is left untouched; the result is only for painting masks.
    """
    labels = segments.labels.copy()
    d = np.where(valid, depth, np.nan)
    for _ in range(iterations):
        todo = valid & (labels == 0)
        if not todo.any():
            break
        best_gap = np.full(labels.shape, np.inf)
        best_lab = np.zeros_like(labels)
        for dy, dx in ((-1, 0), (0, -1), (0, 1), (1, 0)):
            ql = _shifted(labels, dy, dx, 0)
            qd = _shifted(d, dy, dx, np.nan)
            with np.errstate(invalid="ignore"):
                gap = np.abs(qd - d)
            take = todo & (ql > 0) & (gap <= depth_ratio * d) & (gap < best_gap)
            best_gap[take] = gap[take]
            best_lab[take] = ql[take]
        grow = best_lab > 0
        if not grow.any():
            break
        labels[grow] = best_lab[grow]
    return labels
