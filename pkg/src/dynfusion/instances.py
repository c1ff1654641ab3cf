"""Detect-while-segment instance masks: detection boxes refined by geometric segments."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import Detection
from .segmentation import SegmentsMask, label_areas, segment_overlap

log = logging.getLogger(__name__)

METRICS = ("iou", "intersection_over_segment")


@dataclass(frozen=True)
class Instance:
    instance_id: int
    class_id: int
    class_name: str
    rigid: bool
    bbox: tuple[float, float, float, float]
    pixel_count: int
    segments: tuple[int, ...] = ()
    score: float = 1.0


@dataclass
class ObjectSegmentsMask:
    instance_labels: np.ndarray
    instances: list[Instance] = field(default_factory=list)

    def mask(self, instance_id: int) -> np.ndarray:
        return self.instance_labels == instance_id

    def support(self) -> np.ndarray:
        return self.instance_labels > 0

    def get(self, instance_id: int) -> Instance:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def subset(self, keep) -> "ObjectSegmentsMask":
        ids = [i.instance_id for i in keep]
        labels = np.where(np.isin(self.instance_labels, ids), self.instance_labels, 0)
        return ObjectSegmentsMask(labels, list(keep))


def box_processing_order(detections) -> list[int]:
    """Ascending box area; ties by higher score, then input order."""
    return sorted(range(len(detections)), key=lambda i: (detections[i].area, -detections[i].score, i))


def box_mask(det: Detection, shape) -> np.ndarray:
    h, w = shape
    x0, y0, x1, y1 = det.pixel_bounds()
    m = np.zeros(shape, dtype=bool)
    m[max(0, y0):min(h, y1), max(0, x0):min(w, x1)] = True
    return m


def assign_detections(segments: SegmentsMask, detections, overlap_threshold: float = 0.5,
                      metric: str = "intersection_over_segment",
                      allow_empty_instances: bool = False) -> ObjectSegmentsMask:
    """Assign geometric segments to detection boxes, smallest box first.

    Each still-unassigned segment whose overlap with the box reaches
    ``overlap_threshold`` joins that box's instance. A segment is assigned at
    most once.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown overlap metric {metric!r}")
    labels = segments.labels
    n = segments.segment_count
    areas = label_areas(segments)
    owner = np.zeros(n + 1, dtype=np.int32)
    instances = []
    next_id = 1
    for i in box_processing_order(detections):
        det = detections[i]
        score = segment_overlap(labels, n, areas, box_mask(det, labels.shape), metric)
        take = np.nonzero((owner == 0) & (score >= overlap_threshold))[0]
        take = take[take > 0]
        pixels = int(areas[take].sum())
        if pixels == 0 and not allow_empty_instances:
            continue
        owner[take] = next_id
        instances.append(Instance(next_id, det.class_id, det.class_name, det.rigid, det.bbox,
                                  pixels, tuple(int(t) for t in take), det.score))
        next_id += 1
    return ObjectSegmentsMask(owner[labels], instances)


def split_rigid_nonrigid(mask: ObjectSegmentsMask):
    rigid = [i for i in mask.instances if i.rigid]
    nonrigid = [i for i in mask.instances if not i.rigid]
    return mask.subset(rigid), mask.subset(nonrigid)
