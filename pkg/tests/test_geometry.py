"""Geometry tests. Derived expectations come from an independent
homogeneous-matrix pipeline built on scipy.spatial.transform.Rotation."""

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from biloop.geometry import (
    CameraIntrinsics,
    CameraPose,
    EmptyCorrespondenceError,
    InvalidPoseError,
    RelativePose,
    apply_relative,
    compose_relative,
    flip_yaw,
    in_view,
    matrix_to_quat,
    project,
    quat_angle_deg,
    quat_from_axis_angle,
    quat_multiply,
    quat_rotate,
    quat_to_matrix,
    read_trajectory,
    reprojection_error,
    unproject,
    write_trajectory,
)

from conftest import random_unit_quat


def _oracle_matrix(q_wxyz, t):
    """4x4 homogeneous transform via scipy (scalar-last convention inside)."""
    m = np.eye(4)
    m[:3, :3] = Rotation.from_quat(np.roll(q_wxyz, -1)).as_matrix()
    m[:3, 3] = t
    return m


def _pose(q, t, pid=-1):
    return CameraPose(q=np.asarray(q, float), t=np.asarray(t, float), id=pid)


class TestQuaternions:
    def test_to_matrix_matches_scipy(self, rng):
        for _ in range(20):
            q = random_unit_quat(rng)
            expected = Rotation.from_quat(np.roll(q, -1)).as_matrix()
            np.testing.assert_allclose(quat_to_matrix(q), expected, atol=1e-12)

    def test_matrix_round_trip(self, rng):
        for _ in range(20):
            q = random_unit_quat(rng)
            back = matrix_to_quat(quat_to_matrix(q))
            assert min(np.linalg.norm(back - q), np.linalg.norm(back + q)) < 1e-9

    def test_multiply_matches_matrix_product(self, rng):
        qa, qb = random_unit_quat(rng), random_unit_quat(rng)
        np.testing.assert_allclose(
            quat_to_matrix(quat_multiply(qa, qb)),
            quat_to_matrix(qa) @ quat_to_matrix(qb),
            atol=1e-12,
        )

    def test_angle_double_cover(self, rng):
        q = random_unit_quat(rng)
        assert quat_angle_deg(q, -q) == pytest.approx(0.0, abs=1e-9)

    def test_rotate_batch(self, rng):
        q = random_unit_quat(rng)
        pts = rng.normal(size=(5, 3))
        np.testing.assert_allclose(quat_rotate(q, pts), pts @ quat_to_matrix(q).T, atol=1e-12)


class TestCameraPose:
    def test_normalizes_and_canonicalizes(self):
        p = _pose([-1.0, 0, 0, 0], [0, 0, 0])
        np.testing.assert_allclose(p.q, [1, 0, 0, 0])
        q = np.array([1.0, 1e-8, 0, 0])  # mildly off unit: accepted, renormalized
        assert abs(np.linalg.norm(_pose(q, [0, 0, 0]).q) - 1.0) < 1e-9

    def test_rejects_far_from_unit(self):
        with pytest.raises(InvalidPoseError):
            CameraPose(q=np.array([1.0, 1.0, 0.0, 0.0]), t=np.zeros(3))
        # construction helper normalizes mildly off-unit input instead
        CameraPose(q=np.array([2.0, 0.0, 0.0, 0.0]) / 2.0000001, t=np.zeros(3))

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=1, cy=1, width=2, height=2)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=5, cy=1, width=2, height=2)

    def test_fov_from_focal(self, intrinsics):
        assert intrinsics.fov_deg == pytest.approx(90.0)


class TestComposeRelative:
    def test_identity_case(self, rng):
        q = random_unit_quat(rng)
        a = _pose(q, [1.0, 2.0, 3.0])
        rel = compose_relative(a, a)
        np.testing.assert_allclose(rel.q, [1, 0, 0, 0], atol=1e-12)
        np.testing.assert_allclose(rel.t, 0.0, atol=1e-12)

    def test_pure_translation(self):
        a = _pose([1, 0, 0, 0], [0, 0, 0])
        b = _pose([1, 0, 0, 0], [1, 0, 0])
        rel = compose_relative(a, b)
        np.testing.assert_allclose(rel.q, [1, 0, 0, 0], atol=1e-12)
        np.testing.assert_allclose(rel.t, [1, 0, 0], atol=1e-12)

    def test_rotated_pose_matches_matrix_oracle(self):
        qa = quat_from_axis_angle([0, 0, 1], math.pi / 2)
        a = _pose(qa, [0, 0, 0])
        b = _pose([1, 0, 0, 0], [1, 0, 0])
        rel = compose_relative(a, b)
        expected = np.linalg.inv(_oracle_matrix(a.q, a.t)) @ _oracle_matrix(b.q, b.t)
        np.testing.assert_allclose(quat_to_matrix(rel.q), expected[:3, :3], atol=1e-12)
        np.testing.assert_allclose(rel.t, expected[:3, 3], atol=1e-12)

    def test_random_poses_match_matrix_oracle(self, rng):
        for _ in range(25):
            a = _pose(random_unit_quat(rng), rng.normal(size=3))
            b = _pose(random_unit_quat(rng), rng.normal(size=3))
            rel = compose_relative(a, b)
            expected = np.linalg.inv(_oracle_matrix(a.q, a.t)) @ _oracle_matrix(b.q, b.t)
            np.testing.assert_allclose(quat_to_matrix(rel.q), expected[:3, :3], atol=1e-9)
            np.testing.assert_allclose(rel.t, expected[:3, 3], atol=1e-9)

    def test_round_trip_reconstructs_pose_b(self, rng):
        for _ in range(25):
            a = _pose(random_unit_quat(rng), rng.normal(size=3))
            b = _pose(random_unit_quat(rng), rng.normal(size=3))
            back = apply_relative(a, compose_relative(a, b))
            assert min(np.linalg.norm(back.q - b.q), np.linalg.norm(back.q + b.q)) < 1e-9
            np.testing.assert_allclose(back.t, b.t, atol=1e-9)


class TestProject:
    def test_principal_point(self, intrinsics):
        pix, behind = project(intrinsics, RelativePose.identity(), [[0, 0, 5.0]])
        np.testing.assert_allclose(pix[0], [intrinsics.cx, intrinsics.cy], atol=1e-12)
        assert not behind[0]

    def test_analytic_offset(self):
        K = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
        pix, _ = project(K, RelativePose.identity(), [[1.0, 0.0, 5.0]])
        np.testing.assert_allclose(pix[0], [70.0, 50.0], atol=1e-12)

    def test_homogeneous_points_accepted(self, intrinsics):
        pix4, _ = project(intrinsics, RelativePose.identity(), [[0, 0, 5.0, 1.0]])
        pix3, _ = project(intrinsics, RelativePose.identity(), [[0, 0, 5.0]])
        np.testing.assert_allclose(pix4, pix3)

    def test_behind_camera_flagged(self, intrinsics):
        pix, behind = project(intrinsics, RelativePose.identity(), [[0, 0, -1.0]])
        assert behind[0]
        assert np.isnan(pix[0]).all()

    def test_random_pose_matches_matrix_pipeline(self, rng, intrinsics):
        for _ in range(20):
            rel = RelativePose(q=random_unit_quat(rng), t=rng.normal(size=3))
            pts = rng.normal(size=(8, 3)) + [0, 0, 8.0]
            pix, behind = project(intrinsics, rel, pts)
            hom = np.linalg.inv(_oracle_matrix(rel.q, rel.t)) @ np.vstack(
                [pts.T, np.ones(len(pts))]
            )
            cam = hom[:3].T
            for i in range(len(pts)):
                if cam[i, 2] <= 0:
                    assert behind[i]
                    continue
                exp = [
                    intrinsics.fx * cam[i, 0] / cam[i, 2] + intrinsics.cx,
                    intrinsics.fy * cam[i, 1] / cam[i, 2] + intrinsics.cy,
                ]
                np.testing.assert_allclose(pix[i], exp, atol=1e-9)

    def test_unproject_round_trip(self, rng, intrinsics):
        pts = rng.uniform(-2, 2, size=(10, 3)) + [0, 0, 6.0]
        pix, _ = project(intrinsics, RelativePose.identity(), pts)
        back = unproject(intrinsics, pix, pts[:, 2])
        np.testing.assert_allclose(back, pts, atol=1e-9)


class TestReprojectionError:
    def test_self_consistency(self, rng, intrinsics):
        rel = RelativePose(q=random_unit_quat(rng), t=rng.normal(size=3) * 0.1)
        pts = rng.normal(size=(12, 3)) + [0, 0, 10.0]
        pix, _ = project(intrinsics, rel, pts)
        res = reprojection_error(pix, intrinsics, rel, pts)
        assert res.total < 1e-9
        assert not res.any_behind

    def test_one_pixel_offsets(self, intrinsics):
        pts = np.array([[0.0, 0.0, 5.0], [1.0, 0.5, 6.0], [-1.0, 0.2, 7.0]])
        pix, _ = project(intrinsics, RelativePose.identity(), pts)
        pix[:, 0] += 1.0
        res = reprojection_error(pix, intrinsics, RelativePose.identity(), pts)
        assert res.total == pytest.approx(len(pts), abs=1e-9)

    def test_small_rotation_matches_oracle(self, rng, intrinsics):
        pts = rng.normal(size=(15, 3)) + [0, 0, 10.0]
        pix, _ = project(intrinsics, RelativePose.identity(), pts)
        q = quat_from_axis_angle([0, 1, 0], math.radians(2.0))
        rel = RelativePose(q=q, t=np.zeros(3))
        res = reprojection_error(pix, intrinsics, rel, pts)
        hom = np.linalg.inv(_oracle_matrix(q, np.zeros(3))) @ np.vstack(
            [pts.T, np.ones(len(pts))]
        )
        cam = hom[:3].T
        expected = 0.0
        for i in range(len(pts)):
            u = intrinsics.fx * cam[i, 0] / cam[i, 2] + intrinsics.cx
            v = intrinsics.fy * cam[i, 1] / cam[i, 2] + intrinsics.cy
            expected += (pix[i, 0] - u) ** 2 + (pix[i, 1] - v) ** 2
        assert res.total == pytest.approx(expected, rel=1e-9)

    def test_empty_correspondences_raise(self, intrinsics):
        with pytest.raises(EmptyCorrespondenceError):
            reprojection_error(
                np.empty((0, 2)), intrinsics, RelativePose.identity(), np.empty((0, 3))
            )

    def test_behind_camera_penalty(self, intrinsics):
        pts = np.array([[0.0, 0.0, -5.0]])
        res = reprojection_error(
            np.array([[10.0, 10.0]]), intrinsics, RelativePose.identity(), pts, behind_penalty=123.0
        )
        assert res.any_behind
        assert res.total == pytest.approx(123.0)

    def test_invariant_under_common_rigid_transform(self, rng, intrinsics):
        for _ in range(10):
            a = _pose(random_unit_quat(rng), rng.normal(size=3))
            b = _pose(random_unit_quat(rng), rng.normal(size=3))
            world = quat_rotate(a.q, rng.normal(size=(10, 3)) + [0, 0, 8.0]) + a.t
            rel = compose_relative(a, b)
            pix, behind = project(intrinsics, rel, a.world_to_camera(world))
            if behind.any():
                continue
            base = reprojection_error(pix, intrinsics, rel, a.world_to_camera(world)).total
            g_q, g_t = random_unit_quat(rng), rng.normal(size=3)
            a2 = _pose(quat_multiply(g_q, a.q), quat_rotate(g_q, a.t) + g_t)
            b2 = _pose(quat_multiply(g_q, b.q), quat_rotate(g_q, b.t) + g_t)
            world2 = quat_rotate(g_q, world) + g_t
            rel2 = compose_relative(a2, b2)
            moved = reprojection_error(pix, intrinsics, rel2, a2.world_to_camera(world2)).total
            assert moved == pytest.approx(base, abs=1e-6)


def _looking_along_x(t, pid=-1, reverse=False):
    """Pose whose optical axis points along +x (or -x) with world z up."""
    rot = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    pose = CameraPose(q=matrix_to_quat(rot), t=np.asarray(t, float), id=pid)
    return flip_yaw(pose) if reverse else pose


class TestInView:
    def test_on_axis_in_range(self):
        q = _looking_along_x([0, 0, 0])
        c = _looking_along_x([5, 0, 0])
        assert in_view(q, c, fov_deg=90, d_min=2, d_max=11, orient_tol_deg=30, mode="forward")

    def test_too_close_excluded(self):
        q = _looking_along_x([0, 0, 0])
        c = _looking_along_x([1, 0, 0])
        assert not in_view(q, c, fov_deg=90, d_min=2, d_max=11, orient_tol_deg=30, mode="forward")

    def test_orientation_flip_definition(self):
        q = _looking_along_x([0, 0, 0])
        c = _looking_along_x([5, 0, 0], reverse=True)
        assert in_view(q, c, fov_deg=90, d_min=2, d_max=11, orient_tol_deg=30, mode="backward")
        assert not in_view(q, c, fov_deg=90, d_min=2, d_max=11, orient_tol_deg=30, mode="forward")

    def test_behind_query_excluded(self):
        q = _looking_along_x([0, 0, 0])
        c = _looking_along_x([-5, 0, 0])
        assert not in_view(q, c, fov_deg=90, d_min=2, d_max=11, orient_tol_deg=30, mode="forward")

    def test_outside_fov_cone(self):
        q = _looking_along_x([0, 0, 0])
        c = _looking_along_x([3, 4, 0])  # 53 deg off axis
        assert not in_view(q, c, fov_deg=90, d_min=2, d_max=11, orient_tol_deg=30, mode="forward")
        assert in_view(q, c, fov_deg=120, d_min=2, d_max=11, orient_tol_deg=30, mode="forward")

    def test_backward_equals_forward_after_candidate_flip(self, rng):
        for _ in range(50):
            q = _pose(random_unit_quat(rng), rng.normal(scale=5, size=3))
            c = _pose(random_unit_quat(rng), rng.normal(scale=5, size=3))
            kw = dict(fov_deg=100, d_min=1, d_max=12, orient_tol_deg=45)
            assert in_view(q, c, mode="backward", **kw) == in_view(
                q, flip_yaw(c), mode="forward", **kw
            )

    def test_precondition_validation(self):
        q = _looking_along_x([0, 0, 0])
        c = _looking_along_x([5, 0, 0])
        with pytest.raises(ValueError):
            in_view(q, c, fov_deg=190, d_min=2, d_max=11, orient_tol_deg=30, mode="forward")
        with pytest.raises(ValueError):
            in_view(q, c, fov_deg=90, d_min=5, d_max=2, orient_tol_deg=30, mode="forward")


class TestTrajectoryIO:
    def test_round_trip(self, tmp_path, rng):
        poses = [
            CameraPose(
                q=random_unit_quat(rng), t=rng.normal(size=3), id=i, timestamp=float(i) * 0.5
            )
            for i in range(7)
        ]
        path = tmp_path / "poses.txt"
        write_trajectory(path, poses)
        back = read_trajectory(path)
        assert [p.id for p in back] == [p.id for p in poses]
        for orig, load in zip(poses, back):
            np.testing.assert_allclose(load.q, orig.q, atol=1e-15)
            np.testing.assert_allclose(load.t, orig.t, atol=1e-15)
            assert load.timestamp == pytest.approx(orig.timestamp)

    def test_comments_and_errors(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("# comment only\n0 0.0 1 2 3 1 0 0 0  # trailing\n")
        assert len(read_trajectory(path)) == 1
        path.write_text("0 0.0 1 2 3\n")
        with pytest.raises(ValueError):
            read_trajectory(path)
