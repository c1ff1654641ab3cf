import numpy as np
import pytest

from dynfusion.geometry import Intrinsics
from dynfusion.segmentation import (SegmentsMask, absorb_unlabeled, compute_edge_mask, connected_components,
                                    segment_frame, segment_overlap, label_areas)

from conftest import make_frame, plane_depth
from oracles import flood_fill_components, label_partition


def _step_frame(K):
    d = np.ones((K.height, K.width))
    d[:, K.width // 2:] = 1.5
    return make_frame(K, d)


def test_single_plane_has_no_interior_edges(K_qvga):
    f = make_frame(K_qvga, plane_depth(K_qvga, (0.1, 0.2, 1.0), 2.0))
    e = compute_edge_mask(f)
    assert not e[f.valid_mask].any()
    assert e[~f.valid_mask].all()


def test_depth_step_edge_band(K_qvga):
    f = _step_frame(K_qvga)
    e = compute_edge_mask(f)
    seam = K_qvga.width // 2
    interior = e[1:-1, 1:-1]
    cols = np.nonzero(interior.any(axis=0))[0] + 1
    # distance term on both sides of the seam, plus the two columns whose central-difference normals straddle it
    assert cols.tolist() == [seam - 2, seam - 1, seam, seam + 1]
    assert e[1:-1, seam - 1].all() and e[1:-1, seam].all()


def test_depth_step_two_segments_with_analytic_areas(K_qvga):
    f = _step_frame(K_qvga)
    seg = segment_frame(f)
    assert seg.segment_count == 2
    rows = K_qvga.height - 2  # border rows have no normals
    half = K_qvga.width // 2 - 1 - 2  # minus the image border column and the two band columns
    assert seg.areas == {1: rows * half, 2: rows * half}
    edges = compute_edge_mask(f)
    comps = [c for c in flood_fill_components(edges) if len(c) >= 300]
    assert label_partition(seg.labels) == set(comps)


def test_crease_detected_by_normal_term(K_qvga):
    # concave 90-degree valley z = 1.5 + |x|: continuous depth, normals differ by 90 degrees
    a = plane_depth(K_qvga, (1.0, 0.0, 1.0), 1.5)
    b = plane_depth(K_qvga, (-1.0, 0.0, 1.0), 1.5)
    f = make_frame(K_qvga, np.maximum(a, b))
    e = compute_edge_mask(f, theta_dist=0.01)
    crease = int(round(K_qvga.cx))
    interior = e[5:-5, 5:-5]
    cols = np.nonzero(interior.any(axis=0))[0] + 5
    assert cols.min() >= crease - 2 and cols.max() <= crease + 2
    # the distance term alone does not fire across the crease
    e_dist_only = compute_edge_mask(f, theta_dist=0.01, theta_angle=np.pi)
    assert not e_dist_only[5:-5, 5:-5].any()
    assert segment_frame(f).segment_count == 2


def test_all_edges_gives_no_segments():
    seg = connected_components(np.ones((20, 30), dtype=bool))
    assert seg.segment_count == 0 and not seg.labels.any()


def test_small_blobs_filtered():
    edges = np.ones((40, 40), dtype=bool)
    for y in range(1, 40, 4):
        for x in range(1, 40, 4):
            edges[y:y + 2, x:x + 2] = False
    seg = connected_components(edges, min_segment_area=100)
    assert seg.segment_count == 0 and not seg.labels.any()
    assert connected_components(edges, min_segment_area=4).segment_count == 100


def test_labels_by_decreasing_area_then_raster_order():
    edges = np.ones((10, 20), dtype=bool)
    edges[1:3, 1:3] = False     # area 4, first in raster order
    edges[1:4, 10:15] = False   # area 15
    edges[6:8, 1:3] = False     # area 4, later
    seg = connected_components(edges, min_segment_area=1)
    assert seg.areas == {1: 15, 2: 4, 3: 4}
    assert seg.labels[2, 12] == 1 and seg.labels[1, 1] == 2 and seg.labels[6, 1] == 3


def test_four_connectivity():
    edges = np.ones((4, 4), dtype=bool)
    edges[0, 0] = edges[1, 1] = False  # diagonal neighbours only
    assert connected_components(edges, min_segment_area=1).segment_count == 2


def test_matches_flood_fill_oracle():
    rng = np.random.default_rng(11)
    for _ in range(40):
        h, w = rng.integers(1, 40, size=2)
        edges = rng.random((h, w)) < rng.uniform(0.2, 0.6)
        min_area = int(rng.integers(1, 6))
        seg = connected_components(edges, min_area)
        expected = {c for c in flood_fill_components(edges) if len(c) >= min_area}
        assert label_partition(seg.labels) == expected
        assert all(seg.areas[k] >= min_area for k in seg.areas)
        assert not seg.labels[edges].any()


def test_threshold_monotone_and_deterministic(K_qvga):
    rng = np.random.default_rng(5)
    d = plane_depth(K_qvga, (0.0, 0.3, 1.0), 2.0) + rng.normal(scale=0.004, size=(K_qvga.height, K_qvga.width))
    f = make_frame(K_qvga, d)
    counts = [int(compute_edge_mask(f, t).sum()) for t in (0.002, 0.005, 0.01, 0.02, 0.05)]
    assert counts == sorted(counts, reverse=True)
    a, b = segment_frame(f), segment_frame(f)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_segment_overlap_metrics():
    labels = np.array([[1, 1, 2, 2], [1, 1, 2, 2]])
    seg = SegmentsMask(labels, 2, {1: 4, 2: 4})
    mask = np.zeros_like(labels, dtype=bool)
    mask[:, 1:3] = True
    areas = label_areas(seg)
    np.testing.assert_allclose(segment_overlap(labels, 2, areas, mask), [0, 0.5, 0.5])
    np.testing.assert_allclose(segment_overlap(labels, 2, areas, mask, "iou"), [0, 2 / 6, 2 / 6])
    with pytest.raises(ValueError):
        segment_overlap(labels, 2, areas, mask, "dice")


def test_absorb_unlabeled_fills_edge_band_only_across_small_gaps(K_qvga):
    f = _step_frame(K_qvga)
    seg = segment_frame(f)
    grown = absorb_unlabeled(seg, f.depth, f.valid_mask)
    np.testing.assert_array_equal(grown[seg.labels > 0], seg.labels[seg.labels > 0])
    seam = K_qvga.width // 2
    row = 100
    # band pixels join the segment on their own depth side, never the far side
    assert grown[row, seam - 2] == seg.labels[row, seam - 10]
    assert grown[row, seam - 1] == seg.labels[row, seam - 10]
    assert grown[row, seam] == seg.labels[row, seam + 10]
    assert grown[row, seam + 1] == seg.labels[row, seam + 10]
    assert (grown[~f.valid_mask] == 0).all()
