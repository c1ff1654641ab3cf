"""Per-frame orchestration: segment and detect, track, reject motion, refine, fuse."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .dataset import (CategoryTable, DatasetError, TrajectoryRecord, export_ply, export_trajectory,
                      load_detections, load_frame, load_tum_sequence)
from .geometry import Frame, Intrinsics, Pose
from .instances import ObjectSegmentsMask, assign_detections, split_rigid_nonrigid
from .motion import binary_motion_mask, motion_segments
from .segmentation import absorb_unlabeled, segment_frame
from .surfels import (STATIC, FusionParams, SurfelMap, fuse_frame, match_maps_to_objects,
                      project_map_mask)
from .timing import StageTimer
from .tracking import TrackingParams, TrackingResult, frame_pyramid, refine_static_pose, track_all_maps

log = logging.getLogger(__name__)


def edge_guard(labels: np.ndarray, paint: np.ndarray, marked: np.ndarray) -> np.ndarray:
    """Unlabeled (edge) pixels whose grown label belongs to a segment touching
    ``marked``; they are kept out of the static map so the rim of a moving or
    object region does not leak into it."""
    ids = np.unique(labels[marked])
    ids = ids[ids != 0]
    if ids.size == 0:
        return np.zeros(labels.shape, dtype=bool)
    return (labels == 0) & np.isin(paint, ids)


class PipelineError(RuntimeError):
    pass


@dataclass
class FrameRecord:
    """What happened to one frame; masks are kept only when requested."""

    index: int
    timestamp: float
    static_pose: Pose
    stage1_pose: Pose
    tracked: bool
    map_poses: dict[int, Pose]
    n_instances: int
    n_maps: int
    motion_pixels: int
    invalid_contributions: int
    motion_mask: np.ndarray | None = None
    binary_motion: np.ndarray | None = None
    invalid_mask: np.ndarray | None = None
    static_pixels: np.ndarray | None = None
    residual_map: np.ndarray | None = None


@dataclass
class PipelineResult:
    maps: dict[int, SurfelMap]
    frames: list[FrameRecord]
    timer: StageTimer
    trajectory_path: Path | None = None
    map_paths: dict[int, Path] = field(default_factory=dict)
    report_paths: list[Path] = field(default_factory=list)

    @property
    def trajectory(self) -> list[TrajectoryRecord]:
        return [TrajectoryRecord.from_pose(f.timestamp, f.static_pose) for f in self.frames]

    def object_maps(self) -> list[SurfelMap]:
        return [m for m in self.maps.values() if m.kind != STATIC]


def tracking_params(cfg: PipelineConfig) -> TrackingParams:
    t = cfg.tracking
    return TrackingParams(rgb_weight=t.rgb_weight, dist_thresh=t.dist_thresh,
                          angle_thresh=cfg.angle["tracking"], pyramid_levels=t.pyramid_levels,
                          iterations=cfg.iteration_counts(), convergence_eps=t.convergence_eps,
                          max_halvings=t.max_halvings, min_inliers=t.min_inliers,
                          min_visible_pixels=t.min_visible_pixels, occlusion_tol=cfg.fusion.occlusion_tol)


def fusion_params(cfg: PipelineConfig) -> FusionParams:
    f = cfg.fusion
    return FusionParams(assoc_dist=f.assoc_dist, assoc_angle=cfg.angle["fusion"], cull_weight=f.cull_weight,
                        stability_frames=f.stability_frames, inactive_timeout=f.inactive_timeout,
                        min_object_pixels=f.min_object_pixels, occlusion_tol=f.occlusion_tol)


class Pipeline:
    """Stateful multi-map SLAM over a frame stream.

    Feed frames in order with :meth:`process`; the static map has id 0 and
    its camera poses form the exported trajectory (first frame = identity).
    """

    def __init__(self, cfg: PipelineConfig, K: Intrinsics, categories: CategoryTable | None = None,
                 keep_masks: bool = False):
        self.cfg = cfg
        self.K = K
        self.categories = categories or CategoryTable()
        self.keep_masks = keep_masks
        self.tparams = tracking_params(cfg)
        self.fparams = fusion_params(cfg)
        self.maps: dict[int, SurfelMap] = {0: SurfelMap(0, STATIC)}
        self.poses: dict[int, Pose] = {}
        self.frames: list[FrameRecord] = []
        self.timer = StageTimer(cfg.output.instrumentation)
        self.next_map_id = 1
        self._pool = ThreadPoolExecutor(max_workers=max(2, cfg.output.workers))

    def close(self):
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------------ stages
    def _segment(self, frame: Frame):
        s = self.cfg.segmentation
        with self.timer.stage("geometric_segmentation"):
            seg = segment_frame(frame, s.theta_dist, self.cfg.angle["segmentation"], s.min_segment_area)
            paint = absorb_unlabeled(seg, frame.depth, frame.valid_mask, s.absorb_iterations,
                                     s.absorb_depth_ratio)
            return seg, paint

    def _detect(self, detections):
        with self.timer.stage("object_detection"):
            if not self.cfg.instances.enabled:
                return []
            return detections() if callable(detections) else list(detections or [])

    def process(self, frame: Frame, detections=None, dump_dir=None) -> FrameRecord:
        """Run every stage on one frame.

        ``detections`` is a list of :class:`Detection` or a zero-argument
        callable returning one; the callable runs concurrently with
        geometric segmentation.
        """
        i = len(self.frames)
        cfg = self.cfg
        if i == 0 and not frame.valid_mask.any():
            raise PipelineError("first frame has no valid depth")

        seg_job = self._pool.submit(self._segment, frame)
        det_job = self._pool.submit(self._detect, detections)
        (segments, paint), dets = seg_job.result(), det_job.result()

        empty = np.zeros(frame.shape, dtype=bool)
        static_pose = Pose.identity() if i == 0 else self.poses[0]
        stage1 = None
        results: dict[int, TrackingResult] = {}
        levels = None
        if i > 0:
            levels = frame_pyramid(frame, self.K, self.tparams.pyramid_levels)
            with self.timer.stage("initial_tracking", models=len(self.maps)):
                prev = {mid: self.poses[mid] for mid in self.maps}
                results = track_all_maps(self.maps, prev, frame, self.K, self.tparams,
                                         self._pool, current_levels=levels)
            stage1 = results[0]
            if not stage1.converged:
                log.warning("frame %d: static tracking failed; reusing the previous pose", i)

        binary = empty
        motion = empty
        with self.timer.stage("motion_segmentation"):
            if stage1 is not None and cfg.motion.enabled:
                m = cfg.motion
                bm = binary_motion_mask(stage1.residual_map, frame.valid_mask, m.min_dynamic_centroid,
                                        m.max_samples)
                binary = bm.bits
                motion = motion_segments(bm, segments, m.overlap_threshold, m.metric)

        with self.timer.stage("object_mask_generation"):
            inst_cfg = cfg.instances
            if dets:
                instances = assign_detections(segments, dets, inst_cfg.overlap_threshold, inst_cfg.metric)
            else:
                instances = ObjectSegmentsMask(np.zeros(frame.shape, dtype=np.int32), [])
            rigid, nonrigid = split_rigid_nonrigid(instances)
            # motion segments explain dynamics not covered by a detected rigid instance
            motion = motion & ~rigid.support()
            invalid = motion | nonrigid.support()

        with self.timer.stage("camera_pose_refinement"):
            if stage1 is not None:
                exclude = invalid | rigid.support() if cfg.tracking.exclude_rigid_objects else invalid
                final = refine_static_pose(levels, stage1, exclude, self.tparams)
                if final.converged:
                    static_pose = final.pose
                elif stage1.converged:
                    static_pose = stage1.pose

        n_models = len(self.maps)
        with self.timer.stage("mapping", models=n_models):
            poses = {0: static_pose}
            for mid, m in self.maps.items():
                if mid == 0:
                    continue
                r = results.get(mid)
                poses[mid] = r.pose if r is not None and r.converged else self.poses[mid]
            masks = []
            for mid, m in self.maps.items():
                if mid == 0:
                    continue
                r = results.get(mid)
                if r is not None and not r.visible:
                    continue
                mm = project_map_mask(m, poses[mid], self.K, self.fparams.occlusion_tol)
                if mm.bits.any():
                    masks.append(mm)
            match = match_maps_to_objects(masks, rigid, cfg.fusion.match_threshold)
            guard = edge_guard(segments.labels, paint, invalid | rigid.support())
            fused = fuse_frame(frame, rigid, invalid, match, self.maps, poses, self.K, i, self.fparams,
                               self.next_map_id, static_exclude=guard)
            for m in fused.new_maps:
                self.maps[m.map_id] = m
                poses[m.map_id] = m.poses[i]
                self.next_map_id = max(self.next_map_id, m.map_id + 1)
                log.info("frame %d: new %s map %d", i, m.class_name, m.map_id)
            for mid, p in poses.items():
                self.maps[mid].poses[i] = p
            self.poses = poses

        if dump_dir is not None:
            from .debug import dump_frame
            dump_frame(dump_dir, i, segments, instances, motion, invalid,
                       stage1.residual_map if stage1 is not None else None)

        rec = FrameRecord(
            index=i, timestamp=frame.timestamp, static_pose=static_pose,
            stage1_pose=stage1.pose if stage1 is not None else static_pose,
            tracked=stage1 is None or stage1.converged, map_poses=dict(poses),
            n_instances=len(instances.instances), n_maps=len(self.maps), motion_pixels=int(motion.sum()),
            invalid_contributions=fused.invalid_contributions)
        if self.keep_masks:
            rec.motion_mask = motion
            rec.binary_motion = binary
            rec.invalid_mask = invalid
            rec.static_pixels = fused.static_pixels
            rec.residual_map = stage1.residual_map if stage1 is not None else None
        self.frames.append(rec)
        return rec

    def result(self) -> PipelineResult:
        return PipelineResult(self.maps, self.frames, self.timer)


def export_results(result: PipelineResult, out_dir, drop_empty_maps: bool = False) -> PipelineResult:
    """Trajectory, one PLY per nonempty map, a map registry and timing reports.

    With ``drop_empty_maps`` object maps that ended with no surfels are
    removed from ``result.maps`` and from every export.
    """
    if drop_empty_maps:
        for mid in [k for k, m in result.maps.items() if m.kind != STATIC and len(m) == 0]:
            del result.maps[mid]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.trajectory_path = export_trajectory(result.trajectory, out / "trajectory.txt")
    registry = ["# map_id kind class_id class_name surfels first_frame file"]
    for mid in sorted(result.maps):
        m = result.maps[mid]
        name = f"map_{mid:03d}_{m.class_name or m.kind}.ply"
        fname = "-"
        if len(m):
            result.map_paths[mid] = export_ply(m, out / name)
            fname = name
        first = min(m.poses) if m.poses else -1
        registry.append(f"{mid} {m.kind} {m.class_id} {m.class_name or '-'} {len(m)} {first} {fname}")
        if m.kind != STATIC and m.poses:
            # world pose of the object map: camera-to-world composed with map-to-camera
            recs = []
            for fr in result.frames:
                if fr.index in m.poses:
                    recs.append(TrajectoryRecord.from_pose(
                        fr.timestamp, fr.static_pose @ m.poses[fr.index].inverse()))
            export_trajectory(recs, out / f"object_{mid:03d}.txt")
    (out / "maps.txt").write_text("\n".join(registry) + "\n")
    paths = [out / "maps.txt"]
    if result.timer.enabled:
        rep = result.timer.report()
        (out / "timing.txt").write_text(rep.format())
        (out / "timing.kv").write_text(rep.format_kv())
        (out / "stages.log").write_text("\n".join(result.timer.log) + "\n")
        paths += [out / "timing.txt", out / "timing.kv", out / "stages.log"]
    result.report_paths = paths
    return result


def run_pipeline(cfg: PipelineConfig, keep_masks: bool = False, export: bool = True) -> PipelineResult:
    """Process a TUM-layout dataset end to end and write outputs to ``cfg.output.directory``."""
    ds = cfg.dataset
    if not ds.path:
        raise PipelineError("no dataset path configured")
    det_dir = ds.detections or None
    if det_dir is not None and not Path(det_dir).is_dir():
        raise DatasetError(f"detections directory not found: {det_dir}")
    seq = load_tum_sequence(ds.path, ds.max_assoc_gap, detections_dir=det_dir)
    categories = CategoryTable.load(ds.categories) if ds.categories else CategoryTable()
    K = seq.intrinsics
    entries = seq.entries[: ds.max_frames] if ds.max_frames > 0 else seq.entries
    dump_dir = Path(cfg.output.directory) / "debug" if cfg.output.dump_masks else None
    with Pipeline(cfg, K, categories, keep_masks) as pipe:
        for i, entry in enumerate(entries):
            try:
                frame = load_frame(entry, K, i, ds.depth_max)
            except DatasetError as exc:
                raise DatasetError(f"frame {i} ({entry.timestamp:.6f}): {exc}") from exc

            def dets(entry=entry):
                return load_detections(entry.detections_path, entry.timestamp, K.width, K.height,
                                       cfg.instances.score_min, categories)

            pipe.process(frame, dets if det_dir is not None else None, dump_dir)
        result = pipe.result()
    if export:
        export_results(result, cfg.output.directory, cfg.output.drop_empty_maps)
    return result
