import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from dynfusion.dataset import TrajectoryRecord, export_trajectory
from dynfusion.evaluation import (AteReport, EvaluationError, ate_rmse, cloud_compare, format_report,
                                  nearest_distances, rigid_align)

QI = np.array([0.0, 0.0, 0.0, 1.0])


def _traj(points, t0=0.0):
    return [TrajectoryRecord(t0 + i * 0.1, np.asarray(p, float), QI) for i, p in enumerate(points)]


def _optimised_rmse(est, gt):
    """Independent oracle: minimise the aligned RMSE over rotations and translations numerically."""
    def f(x):
        R = Rotation.from_rotvec(x[:3]).as_matrix()
        return np.mean(np.sum((est @ R.T + x[3:] - gt) ** 2, axis=1))
    best = min((minimize(f, np.r_[np.random.default_rng(s).normal(scale=0.3, size=3), np.zeros(3)],
                         method="BFGS", options={"gtol": 1e-12}) for s in range(5)), key=lambda r: r.fun)
    return float(np.sqrt(best.fun))


def test_unit_square_with_displaced_corner():
    gt = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    est = gt.copy()
    est[2] += [0.0, 0.0, 0.1]
    rep = ate_rmse(_traj(est), _traj(gt))
    assert rep.rmse == pytest.approx(_optimised_rmse(est, gt), abs=1e-7)
    assert 0 < rep.rmse < 0.05  # alignment spreads the error below the unaligned 0.05
    assert ate_rmse(_traj(est), _traj(gt), align=False).rmse == pytest.approx(0.05)


def test_rigidly_moved_copy_has_zero_error():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(30, 3))
    R = Rotation.from_rotvec([0.3, -0.2, 1.0]).as_matrix()
    est = gt @ R.T + [1.0, 2.0, -3.0]
    rep = ate_rmse(_traj(est), _traj(gt))
    assert rep.rmse < 1e-10 and rep.pairs_used == 30 and rep.aligned


def test_error_is_invariant_to_rigid_motion_of_the_estimate():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(20, 3))
    est = gt + rng.normal(scale=0.05, size=gt.shape)
    base = ate_rmse(_traj(est), _traj(gt)).rmse
    for s in range(5):
        R = Rotation.random(random_state=s).as_matrix()
        moved = est @ R.T + rng.normal(size=3)
        assert ate_rmse(_traj(moved), _traj(gt)).rmse == pytest.approx(base, rel=1e-9)


def test_rigid_align_handles_reflection_case():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(10, 3))
    R, t = rigid_align(src, src * [1, 1, -1])
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_association_gap_and_too_few_pairs(tmp_path):
    est = _traj(np.zeros((5, 3)), t0=0.0)
    gt = _traj(np.zeros((5, 3)), t0=0.5)
    with pytest.raises(EvaluationError):
        ate_rmse(est, gt)
    export_trajectory(_traj(np.eye(3)), tmp_path / "a.txt")
    assert ate_rmse(tmp_path / "a.txt", tmp_path / "a.txt").rmse < 1e-12


def test_cloud_subset_halves_completeness():
    gt = np.array([[i * 0.1, 0, 0] for i in range(10)], float)
    rep = cloud_compare(gt[:5], gt, 0.01)
    assert rep.accuracy == 1.0 and rep.completeness == 0.5


def test_empty_cloud_rejected():
    with pytest.raises(EvaluationError):
        cloud_compare(np.zeros((0, 3)), np.zeros((3, 3)))
    with pytest.raises(EvaluationError):
        cloud_compare(np.zeros((3, 3)), np.zeros((0, 3)))


def test_scores_monotone_in_threshold():
    rng = np.random.default_rng(3)
    gt = rng.uniform(size=(400, 3))
    rec = gt[:300] + rng.normal(scale=0.02, size=(300, 3))
    prev = (0.0, 0.0)
    for thr in np.linspace(0.001, 0.2, 15):
        rep = cloud_compare(rec, gt, thr)
        assert rep.accuracy >= prev[0] and rep.completeness >= prev[1]
        prev = (rep.accuracy, rep.completeness)
    assert prev == (1.0, 1.0)


def test_tree_matches_brute_force():
    rng = np.random.default_rng(4)
    q, p = rng.normal(size=(500, 3)), rng.normal(size=(700, 3))
    np.testing.assert_allclose(nearest_distances(q, p), nearest_distances(q, p, brute_force=True), atol=1e-12)


def test_icp_alignment_recovers_shift():
    rng = np.random.default_rng(5)
    gt = rng.uniform(size=(2000, 3))
    rec = gt + [0.004, -0.003, 0.002]
    assert cloud_compare(rec, gt, 0.002).accuracy < 0.5
    assert cloud_compare(rec, gt, 0.002, align=True).accuracy == 1.0


def test_report_formats():
    rep = AteReport(0.0, 0.0, 0.0, 0.0, True, 3)
    assert format_report(rep, "text").splitlines()[0] == "rmse 0.000000"
    assert "rmse=0.000000" in format_report(rep).splitlines()
    assert "aligned=true" in format_report(rep)
    with pytest.raises(ValueError):
        format_report(rep, "table")
