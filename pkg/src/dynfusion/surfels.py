"""Surfel maps: storage, splat rendering, map/object matching and fusion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import Frame, Intrinsics, Pose, rgb_to_intensity

log = logging.getLogger(__name__)

STATIC = "static"
OBJECT = "object"


def surfel_radius(depth, normal_z, K: Intrinsics):
    """Disk radius covering one pixel footprint at ``depth``."""
    nz = np.clip(np.abs(normal_z), 0.5, 1.0)
    return np.asarray(depth, dtype=float) * math.sqrt(2.0) / (K.fx * nz)


class SurfelMap:
    """A growable set of surfels in the map's own frame."""

    def __init__(self, map_id: int, kind: str = STATIC, class_name: str = "", class_id: int = -1):
        if kind not in (STATIC, OBJECT):
            raise ValueError(f"unknown map kind {kind!r}")
        if kind == OBJECT and not class_name:
            raise ValueError("object maps need a class name")
        self.map_id = map_id
        self.kind = kind
        self.class_name = class_name
        self.class_id = class_id
        self.positions = np.zeros((0, 3))
        self.normals = np.zeros((0, 3))
        self.colors = np.zeros((0, 3), dtype=np.uint8)
        self.radii = np.zeros(0)
        self.weights = np.zeros(0)
        self.created_at = np.zeros(0, dtype=np.int64)
        self.last_updated = np.zeros(0, dtype=np.int64)
        self.poses: dict[int, Pose] = {}  # frame index -> camera-to-map pose

    def __len__(self):
        return self.positions.shape[0]

    def __repr__(self):
        return f"SurfelMap(id={self.map_id}, kind={self.kind}, class={self.class_name!r}, n={len(self)})"

    def add(self, positions, normals, colors, radii, weights, frame_index: int):
        n = len(positions)
        if n == 0:
            return
        self.positions = np.concatenate([self.positions, positions])
        self.normals = np.concatenate([self.normals, normals])
        self.colors = np.concatenate([self.colors, np.asarray(colors, dtype=np.uint8)])
        self.radii = np.concatenate([self.radii, radii])
        self.weights = np.concatenate([self.weights, weights])
        stamp = np.full(n, frame_index, dtype=np.int64)
        self.created_at = np.concatenate([self.created_at, stamp])
        self.last_updated = np.concatenate([self.last_updated, stamp])

    def keep(self, mask):
        for name in ("positions", "normals", "colors", "radii", "weights", "created_at", "last_updated"):
            setattr(self, name, getattr(self, name)[mask])

    def active(self, frame_index: int, inactive_timeout: int = 20) -> np.ndarray:
        return (frame_index - self.last_updated) < inactive_timeout

    def latest_pose(self) -> Pose | None:
        if not self.poses:
            return None
        return self.poses[max(self.poses)]

    @property
    def intensities(self) -> np.ndarray:
        return rgb_to_intensity(self.colors)


# --------------------------------------------------------------------------- rendering

@numba.njit(cache=True)
def _disk_window(x, y, z, r, u, v, ui, vi, k, fx, fy):
    """Pixel range that can see a disk of radius ``r`` centred at ``(x, y, z)``.

    Any disk point ``c + w`` (``|w| <= r``) projects within
    ``f * r * |c| / (z * (z - r))`` of the centre's projection, so pixels
    beyond that cannot hit. The centre pixel is always included.
    """
    if z > r:
        s = r * math.sqrt(x * x + y * y + z * z) / (z * (z - r))
        bx = fx * s
        by = fy * s
        x0 = max(ui - k, min(ui, int(math.ceil(u - bx))))
        x1 = min(ui + k, max(ui, int(math.floor(u + bx))))
        y0 = max(vi - k, min(vi, int(math.ceil(v - by))))
        y1 = min(vi + k, max(vi, int(math.floor(v + by))))
        return x0, x1, y0, y1
    return ui - k, ui + k, vi - k, vi + k


@numba.njit(cache=True)
def _splat(pc, nc, radii, fx, fy, cx, cy, width, height, occlusion_tol, max_window, rank):
    """Disk splatting with a two-pass z-buffer.

    Pass 1 finds the nearest ray/disk intersection per pixel. Pass 2 picks,
    among surfels within ``occlusion_tol`` of that front, the one with the
    lowest ``rank`` and then the projected centre closest to the pixel centre.
    """
    n = pc.shape[0]
    ray_x = (np.arange(width) - cx) / fx
    ray_y = (np.arange(height) - cy) / fy
    zbuf = np.full((height, width), np.inf)
    for i in range(n):
        x, y, z = pc[i, 0], pc[i, 1], pc[i, 2]
        if z <= 1e-6:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        foot = radii[i] * fx / z
        k = min(max_window, int(math.ceil(foot)))
        ui = int(math.floor(u + 0.5))
        vi = int(math.floor(v + 0.5))
        if ui + k < 0 or vi + k < 0 or ui - k >= width or vi - k >= height:
            continue
        x0, x1, y0, y1 = _disk_window(x, y, z, radii[i], u, v, ui, vi, k, fx, fy)
        ndotp = nc[i, 0] * x + nc[i, 1] * y + nc[i, 2] * z
        for py in range(y0, y1 + 1):
            if py < 0 or py >= height:
                continue
            ry = ray_y[py]
            for px in range(x0, x1 + 1):
                if px < 0 or px >= width:
                    continue
                rx = ray_x[px]
                ndotr = nc[i, 0] * rx + nc[i, 1] * ry + nc[i, 2]
                if abs(ndotr) < 1e-6:
                    if px != ui or py != vi:
                        continue
                    t = z
                else:
                    t = ndotp / ndotr
                if t <= 1e-6:
                    continue
                dx = t * rx - x
                dy = t * ry - y
                dz = t - z
                if (px != ui or py != vi) and dx * dx + dy * dy + dz * dz > radii[i] * radii[i]:
                    continue
                if t < zbuf[py, px]:
                    zbuf[py, px] = t

    index = np.full((height, width), -1, dtype=np.int64)
    depth = np.zeros((height, width))
    best = np.full((height, width), np.inf)
    best_rank = np.full((height, width), np.iinfo(np.int64).max)
    for i in range(n):
        x, y, z = pc[i, 0], pc[i, 1], pc[i, 2]
        if z <= 1e-6:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        foot = radii[i] * fx / z
        k = min(max_window, int(math.ceil(foot)))
        ui = int(math.floor(u + 0.5))
        vi = int(math.floor(v + 0.5))
        if ui + k < 0 or vi + k < 0 or ui - k >= width or vi - k >= height:
            continue
        x0, x1, y0, y1 = _disk_window(x, y, z, radii[i], u, v, ui, vi, k, fx, fy)
        ndotp = nc[i, 0] * x + nc[i, 1] * y + nc[i, 2] * z
        for py in range(y0, y1 + 1):
            if py < 0 or py >= height:
                continue
            ry = ray_y[py]
            for px in range(x0, x1 + 1):
                if px < 0 or px >= width:
                    continue
                rx = ray_x[px]
                ndotr = nc[i, 0] * rx + nc[i, 1] * ry + nc[i, 2]
                if abs(ndotr) < 1e-6:
                    if px != ui or py != vi:
                        continue
                    t = z
                else:
                    t = ndotp / ndotr
                if t <= 1e-6:
                    continue
                dx = t * rx - x
                dy = t * ry - y
                dz = t - z
                if (px != ui or py != vi) and dx * dx + dy * dy + dz * dz > radii[i] * radii[i]:
                    continue
                if t > zbuf[py, px] + occlusion_tol:
                    continue
                d2 = (px - u) * (px - u) + (py - v) * (py - v)
                if rank[i] < best_rank[py, px] or (rank[i] == best_rank[py, px] and d2 < best[py, px]):
                    best_rank[py, px] = rank[i]
                    best[py, px] = d2
                    index[py, px] = i
                    depth[py, px] = t
    return index, depth


@dataclass
class Rendering:
    """Per-pixel view of a map from one camera pose (camera-frame quantities)."""

    index: np.ndarray
    depth: np.ndarray
    vertex: np.ndarray
    normal: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray


def render_index(surfel_map: SurfelMap, pose: Pose, K: Intrinsics, occlusion_tol: float = 0.01,
                 max_window: int = 2, prefer=None):
    """Per-pixel surfel index (``-1`` where empty) and ray depth, plus the
    camera-frame normals of all surfels."""
    inv = pose.inverse()
    pc = np.ascontiguousarray(inv.apply(surfel_map.positions))
    nc = np.ascontiguousarray(inv.rotate(surfel_map.normals))
    rank = np.zeros(len(surfel_map), dtype=np.int64)
    if prefer is not None:
        rank[~np.asarray(prefer, dtype=bool)] = 1
    index, depth = _splat(pc, nc, np.ascontiguousarray(surfel_map.radii, dtype=float),
                          K.fx, K.fy, K.cx, K.cy, K.width, K.height, occlusion_tol, max_window, rank)
    return index, depth, nc


def render_map(surfel_map: SurfelMap, pose: Pose, K: Intrinsics, occlusion_tol: float = 0.01,
               max_window: int = 2, prefer=None) -> Rendering:
    """Splat ``surfel_map`` into the camera at ``pose`` (camera-to-map).

    Where several surfels lie within ``occlusion_tol`` of the front, those
    flagged in ``prefer`` win over the rest.
    """
    H, W = K.height, K.width
    if len(surfel_map) == 0:
        return Rendering(np.full((H, W), -1, dtype=np.int64), np.zeros((H, W)), np.zeros((H, W, 3)),
                         np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W), dtype=bool))
    index, depth, nc = render_index(surfel_map, pose, K, occlusion_tol, max_window, prefer)
    valid = index >= 0
    uu, vv = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    vertex = np.stack([(uu - K.cx) / K.fx * depth, (vv - K.cy) / K.fy * depth, depth], axis=-1)
    idx = np.where(valid, index, 0)
    normal = np.where(valid[..., None], nc[idx], 0.0)
    intensity = np.where(valid, surfel_map.intensities[idx], 0.0)
    return Rendering(index, depth, vertex, normal, intensity, valid)


@dataclass
class MapMask:
    map_id: int
    bits: np.ndarray


def project_map_mask(surfel_map: SurfelMap, pose: Pose, K: Intrinsics, occlusion_tol: float = 0.01,
                     rendering: Rendering | None = None) -> MapMask:
    """Pixels where at least one surfel of the map lands in front of the z-buffer tolerance."""
    if rendering is not None:
        return MapMask(surfel_map.map_id, rendering.valid.copy())
    if len(surfel_map) == 0:
        return MapMask(surfel_map.map_id, np.zeros((K.height, K.width), dtype=bool))
    return MapMask(surfel_map.map_id, render_index(surfel_map, pose, K, occlusion_tol)[0] >= 0)


# --------------------------------------------------------------------------- matching

@dataclass
class MatchResult:
    matches: dict[int, int]  # map_id -> instance_id
    unmatched_objects: list[int]
    unmatched_maps: list[int]
    overlaps: dict[tuple[int, int], float] = field(default_factory=dict)


def match_maps_to_objects(map_masks, rigid_objects, match_threshold: float = 0.3) -> MatchResult:
    """Greedy one-to-one matching by descending ``|map ∩ instance| / |instance|``.

    Ties go to the lower map id, then the lower instance id.
    """
    labels = rigid_objects.instance_labels
    inst_ids = [i.instance_id for i in rigid_objects.instances]
    sizes = np.bincount(labels.ravel(), minlength=max(inst_ids, default=0) + 1)
    overlaps = {}
    cand = []
    for mm in map_masks:
        inter = np.bincount(labels[mm.bits], minlength=sizes.size)
        for iid in inst_ids:
            if sizes[iid] == 0:
                continue
            ov = inter[iid] / sizes[iid]
            overlaps[(mm.map_id, iid)] = float(ov)
            if ov >= match_threshold:
                cand.append((-ov, mm.map_id, iid))
    cand.sort()
    matches = {}
    used = set()
    for _, mid, iid in cand:
        if mid in matches or iid in used:
            continue
        matches[mid] = iid
        used.add(iid)
    return MatchResult(matches, [i for i in inst_ids if i not in used],
                       [m.map_id for m in map_masks if m.map_id not in matches], overlaps)


# --------------------------------------------------------------------------- fusion

@dataclass
class FusionParams:
    assoc_dist: float = 0.05
    assoc_angle: float = math.radians(20.0)
    w_new: float = 1.0
    cull_weight: float = 0.5
    stability_frames: int = 10
    inactive_timeout: int = 20
    min_object_pixels: int = 1000
    occlusion_tol: float = 0.01


@dataclass
class FusionStats:
    updated: int = 0
    created: int = 0
    covered: int = 0
    removed: int = 0
    fused_pixels: np.ndarray | None = None


def fuse_pixels(surfel_map: SurfelMap, frame: Frame, pixels: np.ndarray, pose: Pose, K: Intrinsics,
                frame_index: int, params: FusionParams = FusionParams()) -> FusionStats:
    """Fuse the selected pixels of ``frame`` into ``surfel_map`` at ``pose`` (camera-to-map).

    A pixel associates with the surfel rendered at it when that surfel is
    active and within ``assoc_dist`` / ``assoc_angle``. Each surfel takes a
    weighted-average update from its closest associated pixel; the other
    associated pixels are absorbed. Unassociated pixels become new surfels.
    """
    sel = pixels & frame.valid_mask
    stats = FusionStats(fused_pixels=sel)
    if not sel.any():
        return stats
    ys, xs = np.nonzero(sel)
    flat = ys * frame.shape[1] + xs
    q = pose.apply(frame.vertex_map[ys, xs])
    nq = pose.rotate(frame.normal_map[ys, xs])
    col = frame.rgb[ys, xs]

    assoc = np.zeros(ys.size, dtype=bool)
    if len(surfel_map):
        active = surfel_map.active(frame_index, params.inactive_timeout)
        s = render_index(surfel_map, pose, K, params.occlusion_tol, prefer=active)[0][ys, xs]
        hit = s >= 0
        s_safe = np.where(hit, s, 0)
        dist = np.linalg.norm(q - surfel_map.positions[s_safe], axis=1)
        cosang = np.sum(nq * surfel_map.normals[s_safe], axis=1)
        assoc = hit & active[s_safe] & (dist <= params.assoc_dist) & (cosang >= math.cos(params.assoc_angle))
        if assoc.any():
            a = np.nonzero(assoc)[0]
            order = np.lexsort((flat[a], dist[a], s[a]))
            a = a[order]
            first = np.ones(a.size, dtype=bool)
            first[1:] = s[a][1:] != s[a][:-1]
            win = a[first]
            tgt = s[win]
            w_old = surfel_map.weights[tgt]
            w_new = params.w_new
            tot = w_old + w_new
            surfel_map.positions[tgt] = (w_old[:, None] * surfel_map.positions[tgt] + w_new * q[win]) / tot[:, None]
            nsum = w_old[:, None] * surfel_map.normals[tgt] + w_new * nq[win]
            nn = np.linalg.norm(nsum, axis=1)
            keep_old = nn < 1e-9
            nsum[keep_old] = surfel_map.normals[tgt][keep_old]
            surfel_map.normals[tgt] = nsum / np.linalg.norm(nsum, axis=1)[:, None]
            surfel_map.colors[tgt] = np.clip(np.round(
                (w_old[:, None] * surfel_map.colors[tgt] + w_new * col[win]) / tot[:, None]), 0, 255)
            new_r = surfel_radius(frame.depth[ys[win], xs[win]], frame.normal_map[ys[win], xs[win], 2], K)
            surfel_map.radii[tgt] = np.minimum(surfel_map.radii[tgt], new_r)
            surfel_map.weights[tgt] = tot
            surfel_map.last_updated[tgt] = frame_index
            stats.updated = int(win.size)
            stats.covered = int(a.size - win.size)

    new = ~assoc
    if new.any():
        r = surfel_radius(frame.depth[ys[new], xs[new]], frame.normal_map[ys[new], xs[new], 2], K)
        surfel_map.add(q[new], nq[new], col[new], r, np.full(int(new.sum()), params.w_new), frame_index)
        stats.created = int(new.sum())
    return stats


def shrink_map(surfel_map: SurfelMap, pose: Pose, K: Intrinsics, free: np.ndarray, frame_index: int,
               params: FusionParams = FusionParams()) -> int:
    """Lower the weight of surfels rendered into ``free`` pixels and cull weak ones.

    Returns the number of surfels removed.
    """
    if len(surfel_map) == 0:
        return 0
    index = render_index(surfel_map, pose, K, params.occlusion_tol)[0]
    hit = np.unique(index[(index >= 0) & free])
    if hit.size:
        surfel_map.weights[hit] = np.maximum(surfel_map.weights[hit] - params.w_new, 0.0)
    return cull(surfel_map, frame_index, params)


def cull(surfel_map: SurfelMap, frame_index: int, params: FusionParams = FusionParams()) -> int:
    """Drop surfels below ``cull_weight`` that are at least ``stability_frames`` old."""
    weak = (surfel_map.weights < params.cull_weight) & (
        frame_index - surfel_map.created_at >= params.stability_frames)
    n = int(weak.sum())
    if n:
        surfel_map.keep(~weak)
    return n


@dataclass
class FrameFusion:
    new_maps: list[SurfelMap] = field(default_factory=list)
    stats: dict[int, FusionStats] = field(default_factory=dict)
    static_pixels: np.ndarray | None = None
    invalid_contributions: int = 0
    skipped_maps: list[int] = field(default_factory=list)


def fuse_frame(frame: Frame, rigid_objects, invalid: np.ndarray, match: MatchResult,
               maps: dict[int, SurfelMap], poses: dict[int, Pose], K: Intrinsics, frame_index: int,
               params: FusionParams = FusionParams(), next_map_id: int | None = None,
               static_exclude: np.ndarray | None = None) -> FrameFusion:
    """Fuse one frame into all maps.

    ``poses`` maps map ids to camera-to-map poses for this frame; the static
    map has id 0. Matched instances extend their object map, unmatched
    instances large enough start a new object map anchored at the static
    camera pose, unmatched visible object maps shrink, and every remaining
    pixel outside ``invalid`` (and outside ``static_exclude``, if given) goes
    into the static map.
    """
    out = FrameFusion()
    invalid = np.asarray(invalid, dtype=bool)
    consumed = np.zeros(frame.shape, dtype=bool)
    static_pose = poses.get(0)
    if next_map_id is None:
        next_map_id = max(maps) + 1 if maps else 1

    for map_id, iid in sorted(match.matches.items()):
        inst_pixels = rigid_objects.mask(iid)
        consumed |= inst_pixels
        pose = poses.get(map_id)
        if pose is None:
            log.warning("no pose for visible map %d at frame %d; skipping its fusion", map_id, frame_index)
            out.skipped_maps.append(map_id)
            continue
        out.stats[map_id] = fuse_pixels(maps[map_id], frame, inst_pixels & ~invalid, pose, K,
                                        frame_index, params)

    for iid in match.unmatched_objects:
        inst = rigid_objects.get(iid)
        inst_pixels = rigid_objects.mask(iid) & ~invalid & frame.valid_mask
        if int(inst_pixels.sum()) < params.min_object_pixels or static_pose is None:
            continue
        m = SurfelMap(next_map_id, OBJECT, inst.class_name, inst.class_id)
        next_map_id += 1
        m.poses[frame_index] = static_pose
        out.stats[m.map_id] = fuse_pixels(m, frame, inst_pixels, static_pose, K, frame_index, params)
        consumed |= rigid_objects.mask(iid)
        out.new_maps.append(m)

    support = rigid_objects.support()
    for map_id in match.unmatched_maps:
        pose = poses.get(map_id)
        if pose is None:
            continue
        removed = shrink_map(maps[map_id], pose, K, ~support, frame_index, params)
        out.stats[map_id] = FusionStats(removed=removed)

    if static_pose is None:
        log.warning("no static pose at frame %d; static fusion skipped", frame_index)
        out.skipped_maps.append(0)
        out.static_pixels = np.zeros(frame.shape, dtype=bool)
    else:
        keep = ~invalid & ~consumed
        if static_exclude is not None:
            keep &= ~np.asarray(static_exclude, dtype=bool)
        out.stats[0] = fuse_pixels(maps[0], frame, keep, static_pose, K, frame_index, params)
        out.static_pixels = out.stats[0].fused_pixels
        cull(maps[0], frame_index, params)

    out.invalid_contributions = sum(
        int((s.fused_pixels & invalid).sum()) for s in out.stats.values() if s.fused_pixels is not None)
    return out
