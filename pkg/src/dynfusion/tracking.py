"""Frame-to-model camera tracking with joint geometric + photometric Gauss-Newton."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .geometry import Frame, Intrinsics, Pose, compute_vertex_normal_maps, se3_exp
from .surfels import SurfelMap, render_map

log = logging.getLogger(__name__)

RESIDUAL_SENTINEL = -1.0
VGA_PIXELS = 640 * 480


@dataclass
class TrackingParams:
    rgb_weight: float = 0.1
    dist_thresh: float = 0.10
    angle_thresh: float = math.radians(30.0)
    pyramid_levels: int = 3
    iterations: tuple[int, ...] = (10, 5, 4)  # coarse to fine
    convergence_eps: float = 1e-6
    max_halvings: int = 4
    min_inliers: int = 2000  # at 640x480, scaled by resolution
    min_visible_pixels: int = 3000  # at 640x480, scaled by resolution
    occlusion_tol: float = 0.01

    def scaled_min_inliers(self, K: Intrinsics) -> int:
        return max(6, int(round(self.min_inliers * K.width * K.height / VGA_PIXELS)))

    def scaled_min_visible(self, K: Intrinsics) -> int:
        return max(1, int(round(self.min_visible_pixels * K.width * K.height / VGA_PIXELS)))


@dataclass
class ReferenceFrame:
    vertex_map: np.ndarray
    normal_map: np.ndarray
    intensity: np.ndarray
    valid_mask: np.ndarray
    map_id: int
    pose: Pose  # camera-to-map pose the reference was rendered from
    intrinsics: Intrinsics

    @property
    def visible_pixels(self) -> int:
        return int(self.valid_mask.sum())


@dataclass
class TrackingResult:
    pose: Pose
    residual_map: np.ndarray
    inlier_count: int
    converged: bool
    iterations_used: int
    costs: list[tuple[int, float]] = field(default_factory=list)
    map_id: int = 0
    visible: bool = True
    reference: "ReferenceFrame | None" = None
    reference_levels: list | None = None


def render_reference(surfel_map: SurfelMap, pose: Pose, K: Intrinsics, occlusion_tol: float = 0.01) -> ReferenceFrame:
    r = render_map(surfel_map, pose, K, occlusion_tol)
    return ReferenceFrame(r.vertex, r.normal, r.intensity, r.valid, surfel_map.map_id, pose, K)


# --------------------------------------------------------------------------- pyramids

@dataclass
class Level:
    K: Intrinsics
    vertex: np.ndarray
    normal: np.ndarray
    intensity: np.ndarray
    valid: np.ndarray


def _blocks(a):
    h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
    a = a[:h, :w]
    return a.reshape(h // 2, 2, w // 2, 2, *a.shape[2:]).swapaxes(1, 2).reshape(h // 2, w // 2, 4, *a.shape[2:])


def downsample_depth(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Median of the valid depths in each 2x2 block (0 if none)."""
    b = _blocks(np.where(valid, depth, np.inf))
    s = np.sort(b, axis=-1)
    c = _blocks(valid).sum(-1)
    lo = np.take_along_axis(s, np.clip((c - 1) // 2, 0, 3)[..., None], -1)[..., 0]
    hi = np.take_along_axis(s, np.clip(c // 2, 0, 3)[..., None], -1)[..., 0]
    return np.where(c > 0, 0.5 * (lo + hi), 0.0)


def downsample_mean(img: np.ndarray, valid: np.ndarray) -> np.ndarray:
    b = _blocks(np.where(valid, img, 0.0))
    c = _blocks(valid).sum(-1)
    return np.where(c > 0, b.sum(-1) / np.maximum(c, 1), 0.0)


def downsample_any(mask: np.ndarray) -> np.ndarray:
    return _blocks(mask).any(-1)


def build_pyramid(vertex, normal, intensity, valid, K: Intrinsics, levels: int,
                  intensity_valid=None) -> list[Level]:
    """Finest level first. Coarser depth is the 2x2 median of valid depths,
    intensity the 2x2 mean; coarse normals come from central differences."""
    iv = valid if intensity_valid is None else intensity_valid
    pyr = [Level(K, vertex, normal, intensity, valid)]
    depth = np.where(valid, vertex[..., 2], 0.0)
    dvalid = valid
    for _ in range(1, levels):
        Kc = K.scaled(2)
        depth = downsample_depth(depth, dvalid)
        intensity = downsample_mean(intensity, iv)
        iv = downsample_any(iv)
        v, n, ok = compute_vertex_normal_maps(depth, Kc, depth_max=np.inf)
        pyr.append(Level(Kc, v, n, intensity, ok))
        dvalid = depth > 0
        K = Kc
    return pyr


def frame_pyramid(frame: Frame, K: Intrinsics, levels: int = 3) -> list[Level]:
    return build_pyramid(frame.vertex_map, frame.normal_map, frame.intensity, frame.valid_mask, K,
                         levels, intensity_valid=np.ones(frame.shape, dtype=bool))


def reference_pyramid(ref: ReferenceFrame, levels: int = 3) -> list[Level]:
    return build_pyramid(ref.vertex_map, ref.normal_map, ref.intensity, ref.valid_mask, ref.intrinsics, levels)


def mask_pyramid(mask, levels: int):
    out = [np.asarray(mask, dtype=bool)]
    for _ in range(1, levels):
        out.append(downsample_any(out[-1]))
    return out


# --------------------------------------------------------------------------- cost

@dataclass
class Association:
    """Projective correspondences frozen at one pose.

    ``cur`` indexes the flattened current level; ``ref_y/ref_x`` is the
    nearest reference pixel and ``cell_y/cell_x`` the top-left corner of the
    bilinear cell the projection fell into.
    """

    cur: np.ndarray
    ref_y: np.ndarray
    ref_x: np.ndarray
    cell_y: np.ndarray
    cell_x: np.ndarray

    def __len__(self):
        return self.cur.size


@dataclass
class Linearization:
    cost: float
    inliers: int
    association: Association | None = None
    H: np.ndarray | None = None
    g: np.ndarray | None = None
    J_geo: np.ndarray | None = None
    r_geo: np.ndarray | None = None
    J_rgb: np.ndarray | None = None
    r_rgb: np.ndarray | None = None


def associate(ref: Level, cur: Level, T: Pose, params: TrackingParams, exclude=None) -> Association:
    """Accepted projective correspondences of ``cur`` into ``ref`` at ``T``.

    A correspondence needs its nearest reference pixel and the whole bilinear
    cell valid, a vertex distance within ``dist_thresh`` and a normal angle
    within ``angle_thresh``.
    """
    use = cur.valid if exclude is None else cur.valid & ~exclude
    idx = np.flatnonzero(use)
    Kr = ref.K
    H, W = ref.valid.shape
    p = cur.vertex.reshape(-1, 3)[idx] @ T.rotation.T + T.translation
    z = p[:, 2]
    zs = np.where(z > 1e-6, z, 1.0)
    x = Kr.fx * p[:, 0] / zs + Kr.cx
    y = Kr.fy * p[:, 1] / zs + Kr.cy
    ok = (z > 1e-6) & (x >= 0) & (y >= 0) & (x < W - 1) & (y < H - 1)
    idx, p, x, y = idx[ok], p[ok], x[ok], y[ok]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    xi = x0 + (x - x0 >= 0.5)
    yi = y0 + (y - y0 >= 0.5)
    rv = ref.valid
    ok = rv[yi, xi] & rv[y0, x0] & rv[y0, x0 + 1] & rv[y0 + 1, x0] & rv[y0 + 1, x0 + 1]
    diff = ref.vertex[yi, xi] - p
    ok &= np.einsum("ij,ij->i", diff, diff) <= params.dist_thresh ** 2
    ncr = cur.normal.reshape(-1, 3)[idx] @ T.rotation.T
    ok &= np.einsum("ij,ij->i", ncr, ref.normal[yi, xi]) >= math.cos(params.angle_thresh)
    return Association(idx[ok], yi[ok], xi[ok], y0[ok], x0[ok])


def evaluate(ref: Level, cur: Level, T: Pose, assoc: Association, params: TrackingParams,
             jacobian: bool = True) -> Linearization:
    """Joint cost over fixed correspondences and its Gauss-Newton system.

    The cost is the mean over correspondences of
    ``r_geo^2 + rgb_weight * r_rgb^2`` with ``r_geo = (v_ref - T v_cur) . n_ref``
    and ``r_rgb = I_ref(pi(T v_cur)) - I_cur`` (bilinear inside the frozen
    cell). Jacobians are w.r.t. a left perturbation ``exp(xi) T``; ``H`` and
    ``g`` are scaled so that the cost gradient is ``2 g``.
    """
    n = len(assoc)
    if n == 0:
        return Linearization(0.0, 0, assoc)
    Kr = ref.K
    p = cur.vertex.reshape(-1, 3)[assoc.cur] @ T.rotation.T + T.translation
    nr = ref.normal[assoc.ref_y, assoc.ref_x]
    r_geo = np.einsum("ij,ij->i", ref.vertex[assoc.ref_y, assoc.ref_x] - p, nr)
    z = p[:, 2]
    aa = Kr.fx * p[:, 0] / z + Kr.cx - assoc.cell_x
    bb = Kr.fy * p[:, 1] / z + Kr.cy - assoc.cell_y
    I = ref.intensity
    y0, x0 = assoc.cell_y, assoc.cell_x
    i00, i10 = I[y0, x0], I[y0, x0 + 1]
    i01, i11 = I[y0 + 1, x0], I[y0 + 1, x0 + 1]
    iref = (1 - aa) * (1 - bb) * i00 + aa * (1 - bb) * i10 + (1 - aa) * bb * i01 + aa * bb * i11
    r_rgb = iref - cur.intensity.reshape(-1)[assoc.cur]

    lam = params.rgb_weight
    cost = float((np.sum(r_geo ** 2) + lam * np.sum(r_rgb ** 2)) / n)
    lin = Linearization(cost, n, assoc)
    if not jacobian:
        return lin

    J_geo = np.empty((n, 6))
    J_geo[:, :3] = np.cross(nr, p)
    J_geo[:, 3:] = -nr
    gx = (1 - bb) * (i10 - i00) + bb * (i11 - i01)
    gy = (1 - aa) * (i01 - i00) + aa * (i11 - i10)
    # dI/dp through the pinhole projection
    gp = np.stack([gx * Kr.fx / z, gy * Kr.fy / z,
                   -(gx * Kr.fx * p[:, 0] + gy * Kr.fy * p[:, 1]) / z ** 2], axis=1)
    J_rgb = np.empty((n, 6))
    # dp/domega = -[p]x  =>  dI/domega = p x dI/dp
    J_rgb[:, :3] = np.cross(p, gp)
    J_rgb[:, 3:] = gp

    lin.H = (J_geo.T @ J_geo + lam * (J_rgb.T @ J_rgb)) / n
    lin.g = (J_geo.T @ r_geo + lam * (J_rgb.T @ r_rgb)) / n
    lin.J_geo, lin.r_geo, lin.J_rgb, lin.r_rgb = J_geo, r_geo, J_rgb, r_rgb
    return lin


def linearize(ref: Level, cur: Level, T: Pose, params: TrackingParams, exclude=None,
              jacobian: bool = True) -> Linearization:
    """Associate at ``T`` and evaluate the joint cost there."""
    return evaluate(ref, cur, T, associate(ref, cur, T, params, exclude), params, jacobian)


@numba.njit(cache=True)
def _normal_equations(cv, cn, ci, use, rv, rn, ri, rvalid, R, t, fx, fy, cx, cy,
                      dist2, cos_thresh, lam):
    """Fused association + mean-cost Gauss-Newton accumulation."""
    H = np.zeros((6, 6))
    g = np.zeros(6)
    h, w = rvalid.shape
    hc, wc = use.shape
    total = 0.0
    n = 0
    J = np.empty(6)
    K = np.empty(6)
    for cy_ in range(hc):
        for cx_ in range(wc):
            if not use[cy_, cx_]:
                continue
            v0, v1, v2 = cv[cy_, cx_, 0], cv[cy_, cx_, 1], cv[cy_, cx_, 2]
            px = R[0, 0] * v0 + R[0, 1] * v1 + R[0, 2] * v2 + t[0]
            py = R[1, 0] * v0 + R[1, 1] * v1 + R[1, 2] * v2 + t[1]
            pz = R[2, 0] * v0 + R[2, 1] * v1 + R[2, 2] * v2 + t[2]
            if pz <= 1e-6:
                continue
            x = fx * px / pz + cx
            y = fy * py / pz + cy
            if not (x >= 0 and y >= 0 and x < w - 1 and y < h - 1):
                continue
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            aa = x - x0
            bb = y - y0
            xi = x0 + 1 if aa >= 0.5 else x0
            yi = y0 + 1 if bb >= 0.5 else y0
            if not (rvalid[yi, xi] and rvalid[y0, x0] and rvalid[y0, x0 + 1]
                    and rvalid[y0 + 1, x0] and rvalid[y0 + 1, x0 + 1]):
                continue
            d0 = rv[yi, xi, 0] - px
            d1 = rv[yi, xi, 1] - py
            d2 = rv[yi, xi, 2] - pz
            if d0 * d0 + d1 * d1 + d2 * d2 > dist2:
                continue
            n0, n1, n2 = rn[yi, xi, 0], rn[yi, xi, 1], rn[yi, xi, 2]
            c0, c1, c2 = cn[cy_, cx_, 0], cn[cy_, cx_, 1], cn[cy_, cx_, 2]
            m0 = R[0, 0] * c0 + R[0, 1] * c1 + R[0, 2] * c2
            m1 = R[1, 0] * c0 + R[1, 1] * c1 + R[1, 2] * c2
            m2 = R[2, 0] * c0 + R[2, 1] * c1 + R[2, 2] * c2
            if m0 * n0 + m1 * n1 + m2 * n2 < cos_thresh:
                continue
            r_geo = d0 * n0 + d1 * n1 + d2 * n2
            i00 = ri[y0, x0]
            i10 = ri[y0, x0 + 1]
            i01 = ri[y0 + 1, x0]
            i11 = ri[y0 + 1, x0 + 1]
            iref = ((1 - aa) * (1 - bb) * i00 + aa * (1 - bb) * i10
                    + (1 - aa) * bb * i01 + aa * bb * i11)
            r_rgb = iref - ci[cy_, cx_]
            total += r_geo * r_geo + lam * r_rgb * r_rgb
            n += 1
            J[0] = n1 * pz - n2 * py
            J[1] = n2 * px - n0 * pz
            J[2] = n0 * py - n1 * px
            J[3] = -n0
            J[4] = -n1
            J[5] = -n2
            gx = (1 - bb) * (i10 - i00) + bb * (i11 - i01)
            gy = (1 - aa) * (i01 - i00) + aa * (i11 - i10)
            g0 = gx * fx / pz
            g1 = gy * fy / pz
            g2 = -(gx * fx * px + gy * fy * py) / (pz * pz)
            K[0] = py * g2 - pz * g1
            K[1] = pz * g0 - px * g2
            K[2] = px * g1 - py * g0
            K[3] = g0
            K[4] = g1
            K[5] = g2
            for a in range(6):
                g[a] += J[a] * r_geo + lam * K[a] * r_rgb
                for b in range(a, 6):
                    H[a, b] += J[a] * J[b] + lam * K[a] * K[b]
    for a in range(6):
        for b in range(a):
            H[a, b] = H[b, a]
    if n > 0:
        H /= n
        g /= n
        total /= n
    return total, n, H, g


def normal_equations(ref: Level, cur: Level, T: Pose, params: TrackingParams, exclude=None) -> Linearization:
    """Same cost and system as :func:`linearize`, computed in one compiled pass
    without materializing correspondences or Jacobian rows."""
    use = cur.valid if exclude is None else cur.valid & ~exclude
    Kr = ref.K
    cost, n, H, g = _normal_equations(
        cur.vertex, cur.normal, cur.intensity, use, ref.vertex, ref.normal, ref.intensity, ref.valid,
        T.rotation, T.translation, Kr.fx, Kr.fy, Kr.cx, Kr.cy,
        params.dist_thresh ** 2, math.cos(params.angle_thresh), params.rgb_weight)
    return Linearization(float(cost), int(n), None, H, g)


def cost_gradient(lin: Linearization) -> np.ndarray:
    """Gradient of the joint cost w.r.t. the left perturbation."""
    return 2.0 * lin.g


def residual_map(ref: Level, cur: Level, T: Pose, dist_thresh: float = 0.10) -> np.ndarray:
    """Squared point-to-plane residual of every projective correspondence.

    All current pixels whose projection lands on a valid reference pixel get
    a value, whether or not the tracker accepted the correspondence; the rest
    hold ``RESIDUAL_SENTINEL``. Correspondences farther apart than
    ``dist_thresh`` (outside the tracker's distance gate) saturate at
    ``dist_thresh**2``, as do larger point-to-plane residuals.
    """
    H, W = ref.valid.shape
    out = np.full(cur.valid.shape, RESIDUAL_SENTINEL)
    idx = np.flatnonzero(cur.valid)
    p = cur.vertex.reshape(-1, 3)[idx] @ T.rotation.T + T.translation
    z = p[:, 2]
    zs = np.where(z > 1e-6, z, 1.0)
    u = np.floor(ref.K.fx * p[:, 0] / zs + ref.K.cx + 0.5).astype(np.int64)
    v = np.floor(ref.K.fy * p[:, 1] / zs + ref.K.cy + 0.5).astype(np.int64)
    ok = (z > 1e-6) & (u >= 0) & (v >= 0) & (u < W) & (v < H)
    ok[ok] = ref.valid[v[ok], u[ok]]
    s = np.flatnonzero(ok)
    diff = ref.vertex[v[s], u[s]] - p[s]
    r = np.einsum("ij,ij->i", diff, ref.normal[v[s], u[s]])
    cap = dist_thresh * dist_thresh
    far = np.einsum("ij,ij->i", diff, diff) > cap
    out.reshape(-1)[idx[s]] = np.where(far, cap, np.minimum(r * r, cap))
    return out


# --------------------------------------------------------------------------- solver

def _solve(H, g):
    try:
        return -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return -np.linalg.lstsq(H, g, rcond=None)[0]


def track(reference: ReferenceFrame, current: Frame | list[Level], init: Pose, mask=None,
          params: TrackingParams = TrackingParams(), reference_levels: list[Level] | None = None) -> TrackingResult:
    """Estimate the camera-to-map pose of ``current`` against a rendered reference.

    ``init`` is the camera-to-map starting pose. Pixels under ``mask`` are
    excluded. Steps that raise the cost are halved up to ``max_halvings``
    times, after which the level stops.
    """
    K = reference.intrinsics
    levels = params.pyramid_levels
    cur_pyr = current if isinstance(current, list) else frame_pyramid(current, K, levels)
    ref_pyr = reference_levels or reference_pyramid(reference, levels)
    mask_pyr = mask_pyramid(mask, levels) if mask is not None else [None] * levels
    iters = list(params.iterations)
    if len(iters) != levels:
        raise ValueError("need one iteration count per pyramid level")

    T = reference.pose.inverse() @ init  # current camera -> reference camera
    costs: list[tuple[int, float]] = []
    used = 0
    for level in reversed(range(levels)):
        ref_l, cur_l, m_l = ref_pyr[level], cur_pyr[level], mask_pyr[level]
        lin = normal_equations(ref_l, cur_l, T, params, m_l)
        costs.append((level, lin.cost))
        for _ in range(iters[levels - 1 - level]):
            if lin.inliers < 6:
                break
            delta = _solve(lin.H, lin.g)
            if not np.all(np.isfinite(delta)):
                break
            accepted = False
            step = delta
            for _ in range(params.max_halvings + 1):
                T_new = se3_exp(step) @ T
                lin_new = normal_equations(ref_l, cur_l, T_new, params, m_l)
                if lin_new.cost <= lin.cost:
                    accepted = True
                    break
                step = 0.5 * step
            if not accepted:
                break
            T, lin = T_new, lin_new
            used += 1
            costs.append((level, lin.cost))
            if np.linalg.norm(step) < params.convergence_eps:
                break

    # the finest level runs last, so ``lin`` holds the full-resolution inliers at ``T``
    res = residual_map(ref_pyr[0], cur_pyr[0], T, params.dist_thresh)
    ok = lin.inliers >= params.scaled_min_inliers(K)
    pose = reference.pose @ T if ok else init
    if not ok:
        log.debug("tracking against map %d failed: %d inliers", reference.map_id, lin.inliers)
    return TrackingResult(pose, res, lin.inliers, ok, used, costs, reference.map_id,
                          reference=reference, reference_levels=ref_pyr)


def track_all_maps(maps, previous_poses: dict[int, Pose], current: Frame, K: Intrinsics,
                   params: TrackingParams = TrackingParams(), executor=None,
                   current_levels: list[Level] | None = None) -> dict[int, TrackingResult]:
    """Stage-1 tracking of the current frame against every visible map.

    A map is visible when its rendered reference has at least the scaled
    ``min_visible_pixels``. Invisible maps carry their previous pose forward.
    """
    cur_pyr = current_levels or frame_pyramid(current, K, params.pyramid_levels)
    maps = list(maps.values()) if isinstance(maps, dict) else list(maps)
    min_vis = params.scaled_min_visible(K)

    def job(m):
        prev = previous_poses[m.map_id]
        ref = render_reference(m, prev, K, params.occlusion_tol)
        if ref.visible_pixels < min_vis:
            empty = np.full(current.shape, RESIDUAL_SENTINEL)
            return TrackingResult(prev, empty, 0, False, 0, [], m.map_id, visible=False, reference=ref)
        try:
            return track(ref, cur_pyr, prev, None, params)
        except Exception:  # one map failing must not stop the others
            log.exception("stage-1 tracking failed for map %d", m.map_id)
            empty = np.full(current.shape, RESIDUAL_SENTINEL)
            return TrackingResult(prev, empty, 0, False, 0, [], m.map_id, reference=ref)

    if executor is not None and len(maps) > 1:
        results = list(executor.map(job, maps))
    else:
        results = [job(m) for m in maps]
    return {m.map_id: r for m, r in zip(maps, results)}


def refine_static_pose(current, stage1: TrackingResult, invalid,
                       params: TrackingParams = TrackingParams()) -> TrackingResult:
    """Stage 2: re-align against the static map, warm-started from the stage-1
    pose and reusing its rendered reference pyramid, with ``invalid`` pixels
    excluded.

    With nothing to exclude the stage-1 result already is the answer and is
    returned unchanged. If the refinement fails the stage-1 result is kept.
    """
    invalid = np.asarray(invalid, dtype=bool)
    if stage1.reference is None or not invalid.any():
        return stage1
    refined = track(stage1.reference, current, stage1.pose, invalid, params, stage1.reference_levels)
    if not refined.converged:
        log.info("stage-2 refinement failed (%d inliers); keeping the stage-1 pose", refined.inlier_count)
        return stage1
    return refined
