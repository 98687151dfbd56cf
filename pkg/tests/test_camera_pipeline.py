"""Camera pipeline: PnP recovery, Jacobian, ambiguity resolution, circle
center derivation, simulator round-trip."""

import numpy as np
import pytest

from crosscal import geometry, sim
from crosscal.camera import (
    CornerObservation,
    derive_circle_centers,
    detect_target_camera,
    pnp_jacobian,
    solve_pnp,
)
from crosscal.errors import DegenerateConfiguration, InsufficientCorners
from crosscal.geometry import Intrinsics, RigidTransform
from crosscal.optimizer import SensorId
from crosscal.target import TargetSpec, checker_corners_board, circle_centers_board

K = Intrinsics(700.0, 700.0, 639.5, 359.5, 1280, 720)
SPEC = TargetSpec()

# board facing the camera (board +z toward the camera) at 3 m
_FACING = geometry.rot_x(np.pi)


def board_pose(rng=None, dist=3.0):
    if rng is None:
        return RigidTransform(_FACING, np.array([0.0, 0.0, dist]))
    tilt = geometry.rotation_exp(rng.normal(0.0, np.deg2rad(10.0), size=3))
    t = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), dist + rng.uniform(-0.5, 0.5)])
    return RigidTransform(tilt @ _FACING, t)


def synth_corners(pose, ids=None, noise=0.0, rng=None, k=K, spec=SPEC):
    out = []
    for cid, pt in checker_corners_board(spec):
        if ids is not None and cid not in ids:
            continue
        uv = geometry.project(k, pose.apply(pt))
        if noise > 0:
            uv = uv + rng.normal(0.0, noise, size=2)
        out.append(CornerObservation(cid, (float(uv[0]), float(uv[1]))))
    return out


def pose_delta(a, b):
    d = geometry.compose(geometry.invert(a), b)
    return float(np.linalg.norm(a.translation - b.translation)), geometry.rotation_angle(d.rotation)


def test_exact_recovery_16_corners():
    rng = np.random.default_rng(0)
    for _ in range(10):
        truth = board_pose(rng)
        ids = list(range(16))
        pose = solve_pnp(synth_corners(truth, ids=ids), SPEC, K)
        dt, dr = pose_delta(truth, pose)
        assert dt < 1e-6 and dr < 1e-6
        # reprojection residual below 1e-8 px
        for c in synth_corners(pose, ids=ids):
            pass
        obj = dict(checker_corners_board(SPEC))
        errs = [
            np.linalg.norm(geometry.project(K, pose.apply(obj[i])) - geometry.project(K, truth.apply(obj[i])))
            for i in ids
        ]
        assert max(errs) < 1e-8


def test_noisy_pnp_translation_error_median():
    rng = np.random.default_rng(1)
    errs = []
    for _ in range(20):
        truth = board_pose(rng)
        pose = solve_pnp(synth_corners(truth, noise=0.5, rng=rng), SPEC, K)
        errs.append(pose_delta(truth, pose)[0])
    assert np.median(errs) < 0.03


def test_too_few_corners():
    truth = board_pose()
    with pytest.raises(InsufficientCorners):
        solve_pnp(synth_corners(truth, ids=[0, 1, 2]), SPEC, K)
    with pytest.raises(InsufficientCorners):
        solve_pnp([], SPEC, K)
    with pytest.raises(InsufficientCorners):
        detect_target_camera([], SPEC, K)


def test_collinear_corners_degenerate():
    truth = board_pose()
    with pytest.raises(DegenerateConfiguration):
        solve_pnp(synth_corners(truth, ids=list(range(7))), SPEC, K)  # one board row


def test_unknown_corner_ids_ignored():
    truth = board_pose()
    corners = synth_corners(truth, ids=list(range(10)))
    corners.append(CornerObservation(999, (10.0, 10.0)))
    pose = solve_pnp(corners, SPEC, K)
    dt, dr = pose_delta(truth, pose)
    assert dt < 1e-6 and dr < 1e-6


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(2)
    obj = np.array([p for _, p in checker_corners_board(SPEC)])
    eps = 1e-6
    for _ in range(100):
        pose = board_pose(rng)
        jac = pnp_jacobian(pose, obj, K)
        num = np.zeros_like(jac)

        def residual(t):
            return geometry.project_many(K, t.apply(obj)).ravel()

        for col in range(6):
            dx = np.zeros(6)
            dx[col] = eps
            fp = residual(geometry.compose(geometry.exp_se3(dx), pose))
            fm = residual(geometry.compose(geometry.exp_se3(-dx), pose))
            num[:, col] = (fp - fm) / (2 * eps)
        scale = max(np.abs(jac).max(), 1.0)
        assert np.abs(jac - num).max() / scale < 1e-4


def test_planar_ambiguity_resolved_100_trials():
    rng = np.random.default_rng(3)
    for _ in range(100):
        truth = board_pose(rng)
        pose = solve_pnp(synth_corners(truth), SPEC, K)
        dt, dr = pose_delta(truth, pose)
        assert dt < 1e-5 and dr < 1e-5


def test_intrinsics_scale_invariance():
    rng = np.random.default_rng(4)
    truth = board_pose(rng)
    corners = synth_corners(truth)
    pose1 = solve_pnp(corners, SPEC, K)
    s = 2.0
    k2 = Intrinsics(K.fx * s, K.fy * s, K.cx * s, K.cy * s, int(K.width * s), int(K.height * s))
    scaled = [CornerObservation(c.corner_id, (c.pixel[0] * s, c.pixel[1] * s)) for c in corners]
    pose2 = solve_pnp(scaled, SPEC, k2)
    assert np.abs(pose1.matrix() - pose2.matrix()).max() < 1e-9


def test_partial_occlusion_60_percent():
    rng = np.random.default_rng(5)
    truth = board_pose(rng)
    keep = list(rng.choice(49, size=19, replace=False))  # ~60% occluded
    pose = solve_pnp(synth_corners(truth, ids=keep), SPEC, K)
    dt, dr = pose_delta(truth, pose)
    assert dt < 1e-6 and dr < 1e-6


def test_derive_circle_centers_trivial_shift():
    pose = RigidTransform(np.eye(3), np.array([0.0, 0.0, 2.0]))
    pts3, pts2 = derive_circle_centers(pose, SPEC, K)
    assert np.allclose(pts3, circle_centers_board(SPEC) + [0.0, 0.0, 2.0])
    assert np.allclose(pts2, geometry.project_many(K, pts3))


def test_derive_circle_centers_random_pose_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        pose = board_pose(rng)
        pts3, pts2 = derive_circle_centers(pose, SPEC, K)
        for k, c in enumerate(circle_centers_board(SPEC)):
            assert np.allclose(pts3[k], geometry.transform_point(pose, c), atol=1e-12)
            assert np.allclose(pts2[k], geometry.project(K, pts3[k]), atol=1e-12)


def test_detection_reports_error_and_count():
    rng = np.random.default_rng(7)
    truth = board_pose(rng)
    det = detect_target_camera(synth_corners(truth, noise=0.3, rng=rng), SPEC, K)
    assert det.corners_used == 49
    assert 0.0 < det.reprojection_error < 2.0
    det0 = detect_target_camera(synth_corners(truth), SPEC, K)
    assert det0.reprojection_error < 1e-8


def test_simulator_round_trip_noise_free():
    scene = sim.make_scene(n_lidars=1, m_cameras=1, sequences=3, seed=11)
    gt = sim.ground_truth(scene)
    cam = SensorId("camera", 0)
    for seq in range(3):
        if not sim.sensor_sees_board(scene, cam, seq):
            continue
        corners = sim.render_camera(scene, cam, seq)
        det = detect_target_camera(corners, scene.spec, scene.intrinsics[cam])
        truth = gt.board_in_sensor(cam, seq)
        dt, dr = pose_delta(truth, det.pose)
        assert dt < 1e-6 and dr < 1e-6
        assert np.abs(det.centers_3d - gt.centers_in_sensor(cam, seq)).max() < 1e-3
