"""Rigid-body math, pinhole camera model and per-frame derived geometry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_MIN = 0.1
DEPTH_MAX = 6.0


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int = 2) -> "Intrinsics":
        """Intrinsics of an image downsampled by an integer ``factor``."""
        return Intrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            width=self.width // factor,
            height=self.height // factor,
            depth_scale=self.depth_scale,
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def inverse(self) -> "Pose":
        return pose_inverse(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(..., 3)`` array of points."""
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ self.rotation.T


@dataclass(frozen=True)
class Twist:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        if not (np.all(np.isfinite(self.omega)) and np.all(np.isfinite(self.v))):
            raise ValueError("twist components must be finite")

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])

    def __neg__(self) -> "Twist":
        return Twist(-self.omega, -self.v)


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * vee
    if np.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[k] / axis[k]
        axis /= np.linalg.norm(axis)
        if axis @ vee < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def _left_jacobian(omega) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * W @ W


def se3_exp(xi) -> Pose:
    """Exponential map from a twist (or 6-vector ``[omega, v]``) to a Pose."""
    if not isinstance(xi, Twist):
        xi = Twist.from_vector(xi)
    R = so3_exp(xi.omega)
    t = _left_jacobian(xi.omega) @ xi.v
    return Pose(R, t)


def se3_log(pose: Pose) -> Twist:
    omega = so3_log(pose.rotation)
    v = np.linalg.solve(_left_jacobian(omega), pose.translation)
    return Twist(omega, v)


def pose_compose(a: Pose, b: Pose) -> Pose:
    R = a.rotation @ b.rotation
    # re-orthonormalize to keep long composition chains on SO(3)
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] = -u[:, -1]
        R = u @ vt
    return Pose(R, a.rotation @ b.translation + a.translation)


def pose_inverse(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def transform_point(a: Pose, p) -> np.ndarray:
    return a.rotation @ np.asarray(p, dtype=float) + a.translation


def backproject(u, v, d, K: Intrinsics) -> np.ndarray:
    """Pixel + metric depth to a camera-frame point; NaNs for nonpositive depth."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.asarray(d, dtype=float)
    ok = d > 0
    x = np.where(ok, (u - K.cx) * d / K.fx, np.nan)
    y = np.where(ok, (v - K.cy) * d / K.fy, np.nan)
    z = np.where(ok, d, np.nan)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def project(p, K: Intrinsics) -> np.ndarray:
    """Camera-frame points to continuous pixel coordinates ``(..., 2)``."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    return np.stack([K.fx * p[..., 0] / z + K.cx, K.fy * p[..., 1] / z + K.cy], axis=-1)


def pixel_grid(K: Intrinsics):
    return np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))


def vertex_map_from_depth(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    uu, vv = pixel_grid(K)
    return np.stack([(uu - K.cx) * depth / K.fx, (vv - K.cy) * depth / K.fy, depth], axis=-1)


def depth_validity(depth: np.ndarray, depth_max: float = DEPTH_MAX) -> np.ndarray:
    return np.isfinite(depth) & (depth >= DEPTH_MIN) & (depth <= depth_max)


def compute_vertex_normal_maps(depth: np.ndarray, K: Intrinsics, depth_max: float = DEPTH_MAX):
    """Vertex map, camera-facing normal map and validity mask of a metric depth image.

    Normals are the cross product of central differences. A pixel is valid only
    if it and its four neighbours carry valid depth and the cross product is
    not degenerate. Invalid entries are zero in both maps.
    """
    depth = np.asarray(depth, dtype=float)
    ok = depth_validity(depth, depth_max)
    d = np.where(ok, depth, 0.0)
    vertex = vertex_map_from_depth(d, K)

    valid = ok.copy()
    valid[:, 0] = valid[:, -1] = False
    valid[0, :] = valid[-1, :] = False
    valid[1:-1, 1:-1] &= ok[1:-1, :-2] & ok[1:-1, 2:] & ok[:-2, 1:-1] & ok[2:, 1:-1]

    normal = np.zeros_like(vertex)
    du = vertex[1:-1, 2:] - vertex[1:-1, :-2]
    dv = vertex[2:, 1:-1] - vertex[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    inner = valid[1:-1, 1:-1] & (norm > 1e-12)
    n = n / np.where(norm > 1e-12, norm, 1.0)[..., None]
    # orient toward the camera: n . v < 0
    flip = np.sum(n * vertex[1:-1, 1:-1], axis=-1) > 0
    n[flip] = -n[flip]
    normal[1:-1, 1:-1] = np.where(inner[..., None], n, 0.0)
    valid[1:-1, 1:-1] = inner

    vertex[~valid] = 0.0
    return vertex, normal, valid


def rgb_to_intensity(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    return (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]) / 255.0


@dataclass
class Frame:
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray
    intensity: np.ndarray
    vertex_map: np.ndarray
    normal_map: np.ndarray
    valid_mask: np.ndarray
    index: int = 0

    @classmethod
    def from_images(cls, timestamp: float, rgb: np.ndarray, depth: np.ndarray, K: Intrinsics,
                    depth_max: float = DEPTH_MAX, index: int = 0) -> "Frame":
        rgb = np.asarray(rgb, dtype=np.uint8)
        depth = np.asarray(depth, dtype=float)
        if rgb.shape[:2] != depth.shape:
            raise ValueError(f"rgb {rgb.shape[:2]} and depth {depth.shape} sizes differ")
        depth = np.where(depth_validity(depth, depth_max), depth, 0.0)
        vertex, normal, valid = compute_vertex_normal_maps(depth, K, depth_max)
        return cls(timestamp, rgb, depth, rgb_to_intensity(rgb), vertex, normal, valid, index)

    @property
    def shape(self):
        return self.depth.shape
