"""Trajectory and reconstruction metrics, and plain-text reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .dataset import associate, load_trajectory, read_ply_points

BRUTE_FORCE_LIMIT = 50_000


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class AteReport:
    rmse: float
    mean: float
    median: float
    max: float
    aligned: bool
    pairs_used: int


@dataclass(frozen=True)
class CloudCompareReport:
    accuracy: float
    completeness: float
    threshold: float


def rigid_align(src: np.ndarray, dst: np.ndarray):
    """Least-squares ``R, t`` with ``R @ src + t ~ dst`` (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    ms, md = src.mean(0), dst.mean(0)
    C = (dst - md).T @ (src - ms)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ S @ Vt
    return R, md - R @ ms


def ate_rmse(estimated, ground_truth, max_assoc_gap: float = 0.02, align: bool = True) -> AteReport:
    """Absolute trajectory error of translations after rigid alignment.

    Both arguments are sequences of ``TrajectoryRecord`` (or paths to TUM
    trajectory files).
    """
    if not isinstance(estimated, (list, tuple)):
        estimated = load_trajectory(estimated)
    if not isinstance(ground_truth, (list, tuple)):
        ground_truth = load_trajectory(ground_truth)
    pairs = associate([r.timestamp for r in estimated], [r.timestamp for r in ground_truth], max_assoc_gap)
    if len(pairs) < 2:
        raise EvaluationError(f"need at least 2 associated poses, got {len(pairs)}")
    est = np.array([estimated[i].translation for i, _ in pairs])
    gt = np.array([ground_truth[j].translation for _, j in pairs])
    if align:
        R, t = rigid_align(est, gt)
        est = est @ R.T + t
    err = np.linalg.norm(est - gt, axis=1)
    return AteReport(float(np.sqrt(np.mean(err ** 2))), float(err.mean()), float(np.median(err)),
                     float(err.max()), align, len(pairs))


def nearest_distances(query: np.ndarray, points: np.ndarray, brute_force: bool | None = None) -> np.ndarray:
    """Distance from each query point to its nearest neighbour in ``points``."""
    query = np.asarray(query, dtype=float)
    points = np.asarray(points, dtype=float)
    if brute_force is None:
        brute_force = False
    if brute_force:
        if max(len(query), len(points)) > BRUTE_FORCE_LIMIT:
            raise ValueError("brute force is limited to 50k points")
        out = np.empty(len(query))
        for s in range(0, len(query), 1024):
            d2 = ((query[s:s + 1024, None, :] - points[None, :, :]) ** 2).sum(-1)
            out[s:s + 1024] = np.sqrt(d2.min(1))
        return out
    return cKDTree(points).query(query, k=1)[0]


def icp_point_to_point(src: np.ndarray, dst: np.ndarray, iterations: int = 30):
    """Rigid ICP aligning ``src`` onto ``dst``; returns ``(R, t)``."""
    tree = cKDTree(dst)
    R, t = np.eye(3), np.zeros(3)
    cur = np.asarray(src, dtype=float)
    for _ in range(iterations):
        _, j = tree.query(cur, k=1)
        dR, dt = rigid_align(cur, dst[j])
        cur = cur @ dR.T + dt
        R, t = dR @ R, dR @ t + dt
    return R, t


def cloud_compare(reconstructed, ground_truth, inlier_threshold: float = 0.01, align: bool = False,
                  brute_force: bool | None = None) -> CloudCompareReport:
    """Accuracy (reconstructed points near GT) and completeness (GT points near
    the reconstruction) at ``inlier_threshold`` meters."""
    rec = _points(reconstructed)
    gt = _points(ground_truth)
    if len(rec) == 0 or len(gt) == 0:
        raise EvaluationError("cloud_compare needs two nonempty clouds")
    if align:
        R, t = icp_point_to_point(rec, gt)
        rec = rec @ R.T + t
    acc = float(np.mean(nearest_distances(rec, gt, brute_force) <= inlier_threshold))
    comp = float(np.mean(nearest_distances(gt, rec, brute_force) <= inlier_threshold))
    return CloudCompareReport(acc, comp, inlier_threshold)


def _points(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.reshape(-1, 3).astype(float)
    return read_ply_points(x)


def format_report(report, fmt: str = "kv") -> str:
    """``key=value`` lines (``fmt='kv'``) or ``key value`` lines (``fmt='text'``)."""
    items = asdict(report).items() if hasattr(report, "__dataclass_fields__") else dict(report).items()
    if fmt not in ("kv", "text"):
        raise ValueError(f"unknown report format {fmt!r}")
    sep = "=" if fmt == "kv" else " "
    return "\n".join(f"{k}{sep}{_fmt(v)}" for k, v in items) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
