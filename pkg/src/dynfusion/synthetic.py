"""Analytic RGB-D scene renderer producing TUM-format datasets with ground truth."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import (Detection, TrajectoryRecord, detection_filename, export_trajectory, format_detections,
                      write_calibration, write_depth_png, write_points_ply)
from .geometry import Intrinsics, Pose, so3_exp

SYNTH_INTRINSICS = Intrinsics(fx=262.5, fy=262.5, cx=159.5, cy=119.5, width=320, height=240)


class SceneError(ValueError):
    pass


@dataclass
class Plane:
    """Points x with ``normal . x + offset >= 0`` are in front of the plane."""

    normal: tuple[float, float, float]
    offset: float
    color: tuple[float, float, float] = (200, 200, 200)
    texture_seed: int = 0


@dataclass
class Box:
    half_extents: tuple[float, float, float]
    center: tuple[float, float, float]
    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # axis-angle, box -> world
    color: tuple[float, float, float] = (180, 120, 90)
    texture_seed: int = 1

    def pose(self) -> Pose:
        return Pose(so3_exp(self.rotation), self.center)


@dataclass
class MovingBody:
    """A box moving with constant linear (m/frame) and angular (rad/frame) velocity."""

    box: Box
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    angular_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    start_frame: int = 0
    class_id: int = 2
    class_name: str = "car"

    def pose(self, frame: int) -> Pose:
        k = max(0, frame - self.start_frame)
        base = self.box.pose()
        R = so3_exp(np.asarray(self.angular_velocity) * k) @ base.rotation
        t = base.translation + np.asarray(self.velocity) * k
        return Pose(R, t)


@dataclass
class CameraPath:
    """``arc``: look-at camera swinging on a horizontal arc; ``static``: fixed pose."""

    kind: str = "arc"
    look_at: tuple[float, float, float] = (0.0, 0.2, 2.6)
    radius: float = 2.6
    sweep: float = 0.25  # total yaw swing (rad)
    height: float = -0.1
    bob: float = 0.05  # vertical oscillation amplitude (m)
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def pose(self, frame: int, n_frames: int) -> Pose:
        if self.kind == "static":
            return Pose(np.eye(3), self.position)
        if self.kind != "arc":
            raise SceneError(f"unknown camera path {self.kind!r}")
        s = frame / max(1, n_frames - 1)
        yaw = self.sweep * (0.5 - 0.5 * math.cos(math.pi * s)) - 0.5 * self.sweep
        target = np.asarray(self.look_at, dtype=float)
        c = target + np.array([self.radius * math.sin(yaw), 0.0, -self.radius * math.cos(yaw)])
        c[1] = self.height + self.bob * math.sin(2 * math.pi * s)
        z = target - c
        z /= np.linalg.norm(z)
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)  # world y points down, like the camera
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return Pose(np.stack([x, y, z], axis=1), c)


@dataclass
class SyntheticScene:
    n_frames: int = 30
    fps: float = 30.0
    intrinsics: Intrinsics = SYNTH_INTRINSICS
    planes: list[Plane] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    bodies: list[MovingBody] = field(default_factory=list)
    camera: CameraPath = field(default_factory=CameraPath)
    noise: float = 0.0  # depth noise sigma = noise * z^2
    seed: int = 0
    detections: bool = False
    start_time: float = 1000.0

    def timestamp(self, i: int) -> float:
        return round(self.start_time + i / self.fps, 6)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        d = dict(d)
        if "intrinsics" in d and isinstance(d["intrinsics"], dict):
            d["intrinsics"] = Intrinsics(**d["intrinsics"])
        d["planes"] = [Plane(**p) for p in d.get("planes", [])]
        d["boxes"] = [Box(**b) for b in d.get("boxes", [])]
        d["bodies"] = [MovingBody(**{**b, "box": Box(**b["box"])}) for b in d.get("bodies", [])]
        if "camera" in d:
            d["camera"] = CameraPath(**d["camera"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)


def room_planes() -> list[Plane]:
    return [
        Plane((0.0, -1.0, 0.0), 1.0, (170, 160, 140), 11),   # floor at y = 1
        Plane((0.0, 0.0, -1.0), 4.5, (200, 205, 210), 12),   # back wall z = 4.5
        Plane((1.0, 0.0, 0.0), 2.2, (190, 170, 200), 13),    # left wall x = -2.2
        Plane((-1.0, 0.0, 0.0), 2.2, (160, 200, 170), 14),   # right wall x = 2.2
        Plane((0.0, 1.0, 0.0), 1.6, (210, 210, 190), 15),    # ceiling y = -1.6
    ]


def static_boxes() -> list[Box]:
    return [
        Box((0.3, 0.25, 0.3), (-0.9, 0.75, 3.2), (0.0, 0.4, 0.0), (150, 90, 60), 21),
        Box((0.25, 0.4, 0.25), (1.0, 0.6, 3.4), (0.0, -0.3, 0.0), (70, 110, 160), 22),
        Box((0.2, 0.15, 0.2), (0.2, 0.85, 3.9), (0.0, 0.9, 0.0), (90, 150, 90), 23),
    ]


def preset(name: str, n_frames: int | None = None, **overrides) -> SyntheticScene:
    """Built-in scenes: ``plane``, ``static``, ``two-body``."""
    if name == "plane":
        scene = SyntheticScene(n_frames=10, planes=[Plane((0.0, 0.0, -1.0), 2.0, (200, 180, 160), 3)],
                               camera=CameraPath(kind="static"))
    elif name == "static":
        scene = SyntheticScene(n_frames=100, planes=room_planes(), boxes=static_boxes())
    elif name == "two-body":
        body = MovingBody(Box((0.16, 0.16, 0.16), (-0.55, 0.15, 2.1), (0.0, 0.3, 0.0), (200, 60, 60), 31),
                          velocity=(0.02, 0.0, 0.03), angular_velocity=(0.0, 0.02, 0.0), start_frame=3)
        scene = SyntheticScene(n_frames=30, planes=room_planes(), boxes=static_boxes(), bodies=[body],
                               camera=CameraPath(sweep=0.12, bob=0.03))
    else:
        raise SceneError(f"unknown preset {name!r}")
    if n_frames is not None:
        scene.n_frames = n_frames
    for k, v in overrides.items():
        if not hasattr(scene, k):
            raise SceneError(f"unknown scene field {k!r}")
        setattr(scene, k, v)
    return scene


# --------------------------------------------------------------------------- rendering

def _texture(p: np.ndarray, seed: int) -> np.ndarray:
    """Smooth procedural albedo in [0, 1] of a 3-D point set."""
    rng = np.random.default_rng(seed)
    out = np.full(p.shape[0], 0.5)
    for wavelength, amp in ((0.45, 0.22), (0.19, 0.15), (0.08, 0.08)):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        phase = rng.uniform(0, 2 * np.pi)
        out += amp * np.sin(2 * np.pi * (p @ d) / wavelength + phase)
    return np.clip(out, 0.0, 1.0)


def _check_camera(scene: SyntheticScene, frame: int, c: np.ndarray):
    for pl in scene.planes:
        if np.dot(pl.normal, c) + pl.offset <= 0:
            raise SceneError(f"camera at frame {frame} is behind a plane")
    boxes = [(b, b.pose()) for b in scene.boxes] + [(m.box, m.pose(frame)) for m in scene.bodies]
    for b, pose in boxes:
        local = pose.rotation.T @ (c - pose.translation)
        if np.all(np.abs(local) < np.asarray(b.half_extents)):
            raise SceneError(f"camera at frame {frame} is inside a box")


def render_frame(scene: SyntheticScene, frame: int):
    """Render one frame: ``(rgb uint8, depth metres, instance mask, camera pose)``.

    The instance mask holds ``k + 1`` where moving body ``k`` is visible.
    """
    K = scene.intrinsics
    T_wc = scene.camera.pose(frame, scene.n_frames)
    c = T_wc.translation
    _check_camera(scene, frame, c)
    uu, vv = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    rays_c = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    rays = rays_c @ T_wc.rotation.T
    n = rays.shape[0]
    best_t = np.full(n, np.inf)
    albedo = np.zeros(n)
    color = np.zeros((n, 3))
    ident = np.zeros(n, dtype=np.uint8)

    def commit(hit, t, base, texture_points, seed, label):
        upd = hit & (t < best_t)
        if not upd.any():
            return
        best_t[upd] = t[upd]
        albedo[upd] = _texture(texture_points[upd], seed)
        color[upd] = base
        ident[upd] = label

    for pl in scene.planes:
        nrm = np.asarray(pl.normal, dtype=float)
        denom = rays @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -(nrm @ c + pl.offset) / denom
        hit = (denom < -1e-9) & (t > 1e-6)
        pts = c + np.where(hit, t, 0.0)[:, None] * rays
        commit(hit, t, pl.color, pts, pl.texture_seed, 0)

    boxes = [(b, b.pose(), 0) for b in scene.boxes]
    boxes += [(m.box, m.pose(frame), k + 1) for k, m in enumerate(scene.bodies)]
    for b, pose, label in boxes:
        o = pose.rotation.T @ (c - pose.translation)
        d = rays @ pose.rotation
        he = np.asarray(b.half_extents, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-he - o) * inv
            t2 = (he - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmin <= tmax) & (tmin > 1e-6)
        local = o + np.where(hit, tmin, 0.0)[:, None] * d
        commit(hit, tmin, b.color, local, b.texture_seed, label)

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    if scene.noise > 0:
        rng = np.random.default_rng(scene.seed * 100003 + frame)
        depth = np.where(depth > 0, depth + rng.normal(size=n) * scene.noise * depth ** 2, 0.0)
    shade = 0.3 + 0.7 * albedo
    rgb = np.clip(np.round(color * shade[:, None]), 0, 255).astype(np.uint8)
    shape = (K.height, K.width)
    return rgb.reshape(*shape, 3), depth.reshape(shape), ident.reshape(shape), T_wc


def mask_detections(scene: SyntheticScene, mask: np.ndarray, margin: int = 3, min_pixels: int = 50):
    """One detection per visible moving body, boxing its ground-truth mask."""
    K = scene.intrinsics
    out = []
    for k, body in enumerate(scene.bodies):
        ys, xs = np.nonzero(mask == k + 1)
        if ys.size < min_pixels:
            continue
        x0, y0 = max(0, xs.min() - margin), max(0, ys.min() - margin)
        x1, y1 = min(K.width, xs.max() + 1 + margin), min(K.height, ys.max() + 1 + margin)
        out.append(Detection(body.class_id, body.class_name, 0.95, (float(x0), float(y0), float(x1 - x0),
                                                                  float(y1 - y0))))
    return out


def sample_box_surface(box: Box, spacing: float = 0.005) -> np.ndarray:
    """Regular point samples on the six faces of a box, in the box frame."""
    he = np.asarray(box.half_extents, dtype=float)
    pts = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        ga = np.arange(-he[a], he[a] + 1e-9, spacing)
        gb = np.arange(-he[b], he[b] + 1e-9, spacing)
        A, B = np.meshgrid(ga, gb)
        for sign in (-1.0, 1.0):
            p = np.zeros((A.size, 3))
            p[:, a], p[:, b], p[:, axis] = A.ravel(), B.ravel(), sign * he[axis]
            pts.append(p)
    return np.concatenate(pts)


def generate_synthetic(scene: SyntheticScene, out_dir) -> Path:
    """Write a TUM-layout dataset with ground truth for ``scene``.

    Layout: ``rgb/``, ``depth/`` (16-bit, scale 5000), ``rgb.txt``,
    ``depth.txt``, ``groundtruth.txt``, ``calibration.txt``, ``masks/``
    (per-frame body ids), ``object_<k>.txt`` (body-to-world poses),
    ``object_<k>.ply`` (body model), ``detections/`` when requested, and
    ``scene.json``.
    """
    out = Path(out_dir)
    for sub in ("rgb", "depth", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if scene.detections:
        (out / "detections").mkdir(exist_ok=True)
    K = scene.intrinsics
    rgb_lines = ["# timestamp filename"]
    depth_lines = ["# timestamp filename"]
    cam_records = []
    body_records = [[] for _ in scene.bodies]
    for i in range(scene.n_frames):
        ts = scene.timestamp(i)
        name = f"{ts:.6f}.png"
        rgb, depth, mask, T_wc = render_frame(scene, i)
        Image.fromarray(rgb).save(out / "rgb" / name)
        write_depth_png(out / "depth" / name, depth, K.depth_scale)
        Image.fromarray(mask).save(out / "masks" / name)
        rgb_lines.append(f"{ts:.6f} rgb/{name}")
        depth_lines.append(f"{ts:.6f} depth/{name}")
        cam_records.append(TrajectoryRecord.from_pose(ts, T_wc))
        for k, body in enumerate(scene.bodies):
            body_records[k].append(TrajectoryRecord.from_pose(ts, body.pose(i)))
        if scene.detections:
            (out / "detections" / detection_filename(ts)).write_text(
                format_detections(mask_detections(scene, mask)))
    (out / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    export_trajectory(cam_records, out / "groundtruth.txt")
    write_calibration(out / "calibration.txt", K)
    for k, body in enumerate(scene.bodies):
        export_trajectory(body_records[k], out / f"object_{k + 1}.txt")
        write_points_ply(out / f"object_{k + 1}.ply", sample_box_surface(body.box))
    (out / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2))
    return out


def load_scene(path) -> SyntheticScene:
    return SyntheticScene.from_dict(json.loads(Path(path).read_text()))
