"""LBS, triangulation, canonicalization, registration, chamfer."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glassvol.errors import DimensionError, TriangulationError
from glassvol.geom import look_at, quat_to_matrix, rotvec_to_quat
from glassvol.raymarch import Camera, RenderConfig
from glassvol.rig import (
    BoneTransforms,
    SkinWeights,
    TriMesh,
    chamfer,
    chamfer_with_grad,
    fit_canonical,
    lbs_deform,
    register_to_face,
    soft_silhouette,
    triangulate_keypoints,
)

from conftest import grid_mesh, inverse_distance_weights, make_camera


class TestTriMesh:
    def test_rejects_out_of_range_faces(self):
        with pytest.raises(DimensionError):
            TriMesh(np.zeros((3, 3)) + np.eye(3), np.array([[0, 1, 5]]))

    def test_rejects_degenerate_faces(self):
        verts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]])
        faces = np.array([[0, 1, 2]])  # collinear
        with pytest.raises(DimensionError):
            TriMesh(verts, faces)


class TestLBS:
    def test_identity_transforms_unchanged(self):
        mesh = grid_mesh()
        w = inverse_distance_weights(mesh.vertices, np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        out = lbs_deform(mesh, w, BoneTransforms.identity(2))
        np.testing.assert_allclose(out.vertices, mesh.vertices, atol=1e-12)

    def test_single_bone_translation(self):
        mesh = grid_mesh()
        w = SkinWeights(np.ones((1, mesh.vertices.shape[0])))
        mats = np.eye(3, 4)[None].copy()
        mats[0, :, 3] = [1.0, 0.0, 0.0]
        out = lbs_deform(mesh, w, BoneTransforms(mats))
        np.testing.assert_allclose(out.vertices, mesh.vertices + [1.0, 0, 0], atol=1e-12)

    def test_two_bone_blend(self):
        mesh = TriMesh(np.array([[0.0, 0, 0], [0.5, 0.5, 0], [1.0, 0, 0]]), np.array([[0, 1, 2]]))
        w = SkinWeights(np.full((2, 3), 0.5))
        mats = np.tile(np.eye(3, 4), (2, 1, 1))
        mats[0, :, 3] = [2.0, 0, 0]
        mats[1, :, 3] = [0.0, 2.0, 0]
        out = lbs_deform(mesh, w, BoneTransforms(mats))
        np.testing.assert_allclose(out.vertices - mesh.vertices, np.tile([1.0, 1.0, 0.0], (3, 1)))

    def test_dimension_mismatch(self):
        mesh = grid_mesh()
        w = SkinWeights(np.ones((1, 4)))
        with pytest.raises(DimensionError):
            lbs_deform(mesh, w, BoneTransforms.identity(1))

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=15, deadline=None)
    def test_global_rigid_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        mesh = grid_mesh(5, 5)
        bones = rng.uniform(-1, 1, size=(3, 3))
        w = inverse_distance_weights(mesh.vertices, bones)
        rot = quat_to_matrix(rotvec_to_quat(rng.normal(scale=0.5, size=3)))
        trans = rng.normal(size=3)
        mats = np.tile(np.concatenate([rot, trans[:, None]], axis=1), (3, 1, 1))
        out = lbs_deform(mesh, w, BoneTransforms(mats))
        expected = mesh.vertices @ rot.T + trans
        np.testing.assert_allclose(out.vertices, expected, atol=1e-6)


class TestTriangulation:
    def _cameras(self):
        cams = {}
        for i, ang in enumerate([0.0, 0.7, 1.4, 2.1]):
            eye = 3.0 * np.array([np.sin(ang), 0.2, np.cos(ang)])
            cams[f"cam{i}"] = make_camera(eye=eye, width=64, height=64)
        return cams

    def test_noiseless_roundtrip(self, rng):
        cams = self._cameras()
        points = rng.uniform(-0.4, 0.4, size=(10, 3))
        detections = {cid: cam.project(points)[0] for cid, cam in cams.items()}
        recovered, residuals = triangulate_keypoints(detections, cams)
        np.testing.assert_allclose(recovered, points, atol=1e-6)
        assert residuals.max() < 1e-6

    def test_degenerate_baseline_flagged(self, rng):
        cam = make_camera(eye=(0, 0, 3), width=64, height=64)
        cams = {"a": cam, "b": Camera(cam.intrinsics, cam.pose, cam.resolution)}
        points = rng.uniform(-0.3, 0.3, size=(4, 3))
        detections = {cid: c.project(points)[0] for cid, c in cams.items()}
        with pytest.raises(TriangulationError):
            triangulate_keypoints(detections, cams)

    def test_single_camera_rejected(self):
        cams = {"a": make_camera()}
        with pytest.raises(TriangulationError):
            triangulate_keypoints({"a": np.zeros((3, 2))}, cams)

    def test_noise_bound_monte_carlo(self, rng):
        cams = self._cameras()
        f = cams["cam0"].intrinsics[0, 0]
        points = rng.uniform(-0.3, 0.3, size=(100, 3))
        detections = {
            cid: cam.project(points)[0] + rng.normal(scale=1.0, size=(100, 2))
            for cid, cam in cams.items()
        }
        recovered, _ = triangulate_keypoints(detections, cams)
        errs = np.linalg.norm(recovered - points, axis=1)
        # depth ~3, focal f: 1px of image noise ~ 3/f world units per ray;
        # 4 cameras give ~sqrt(2/4) reduction; allow 2x the analytic bound
        bound = 2.0 * (3.0 / f)
        assert np.mean(errs) < bound


class TestFitCanonical:
    def test_already_aligned_identity(self, rng):
        kp = rng.uniform(-1, 1, size=(20, 3))
        transforms, rms = fit_canonical(kp, kp, iterations=50)
        assert rms == 0.0
        np.testing.assert_allclose(transforms.matrices, np.tile(np.eye(3, 4), (20, 1, 1)), atol=1e-12)

    def test_recovers_translation(self, rng):
        kp = rng.uniform(-1, 1, size=(20, 3))
        mean = kp + np.array([0.0, 1.0, 0.0])
        transforms, rms = fit_canonical(kp, mean, iterations=800, lr=1e-2)
        assert rms < 1e-4
        moved = transforms.apply_points(kp)
        np.testing.assert_allclose(moved, mean, atol=1e-3)

    def test_random_perturbations_reduce_100x(self, rng):
        kp = rng.uniform(-1, 1, size=(20, 3))
        mean = kp + rng.normal(scale=0.05, size=(20, 3))
        initial_rms = np.sqrt(np.mean(np.sum((kp - mean) ** 2, axis=1)))
        _, rms = fit_canonical(kp, mean, iterations=1000, lr=1e-2)
        assert rms < initial_rms / 100


class TestRegistration:
    def _setup(self, rng):
        mesh = grid_mesh(7, 7, scale=0.6)
        kp = np.stack(
            [np.linspace(-0.5, 0.5, 20), np.zeros(20) + 0.1, np.zeros(20)], axis=-1
        )
        weights = inverse_distance_weights(mesh.vertices, kp)
        cam = make_camera(eye=(0, 0, 2.5), width=40, height=40, fov_deg=45)
        return mesh, kp, weights, cam

    def test_keypoint_only_translation_recovery(self, rng):
        mesh, kp, weights, cam = self._setup(rng)
        target_kp = kp + np.array([0.02, -0.015, 0.01])
        transforms, info = register_to_face(
            mesh, weights, kp, target_kp, None, None, iterations=1000, lr=1e-3
        )
        moved = transforms.apply_points(kp)
        np.testing.assert_allclose(moved, target_kp, atol=1e-4)

    def test_affine_roundtrip_with_mask(self, rng):
        mesh, kp, weights, cam = self._setup(rng)
        true = np.tile(np.eye(3, 4), (20, 1, 1))
        true[:, :, 3] += rng.normal(scale=0.01, size=(20, 3))
        true[:, :, :3] += rng.normal(scale=0.01, size=(20, 3, 3))
        true_t = BoneTransforms(true)
        target_kp = true_t.apply_points(kp)
        deformed = lbs_deform(mesh, weights, true_t)
        radius = 0.03 * mesh.diameter
        target_mask = soft_silhouette(deformed.vertices, cam, RenderConfig(step_size=radius / 2), radius)
        transforms, info = register_to_face(
            mesh, weights, kp, target_kp, target_mask, cam,
            iterations=400, lr=2e-3, proxy_radius=radius,
        )
        rms = info["keypoint_rms"]
        assert rms < 1e-3 * mesh.diameter

    def test_empty_mask_rejected(self, rng):
        mesh, kp, weights, cam = self._setup(rng)
        from glassvol.raymarch import Image

        with pytest.raises(DimensionError):
            register_to_face(
                mesh, weights, kp, kp, Image(np.zeros((40, 40, 1))), cam, iterations=1
            )


class TestChamfer:
    def test_identical_sets_zero(self, rng):
        a = rng.uniform(size=(50, 3))
        assert chamfer(a, a) == 0.0

    def test_two_point_example(self):
        assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == pytest.approx(2.0)

    def test_matches_brute_force(self, rng):
        a = rng.uniform(size=(100, 3))
        b = rng.uniform(size=(100, 3))
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        brute = d2.min(axis=1).mean() + d2.min(axis=0).mean()
        assert chamfer(a, b) == pytest.approx(brute, abs=1e-10)

    @given(seed=st.integers(0, 500))
    @settings(max_examples=15, deadline=None)
    def test_rigid_invariance(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(30, 3))
        b = rng.uniform(size=(25, 3))
        rot = quat_to_matrix(rotvec_to_quat(rng.normal(scale=1.0, size=3)))
        t = rng.normal(size=3)
        before = chamfer(a, b)
        after = chamfer(a @ rot.T + t, b @ rot.T + t)
        assert after == pytest.approx(before, abs=1e-9)

    def test_empty_set_rejected(self):
        with pytest.raises(DimensionError):
            chamfer(np.zeros((0, 3)), np.ones((3, 3)))

    def test_gradient_matches_fd(self, rng):
        a = rng.uniform(size=(12, 3))
        b = rng.uniform(size=(15, 3))
        val, grad = chamfer_with_grad(a, b)
        h = 1e-6
        for idx in [(0, 0), (5, 1), (11, 2)]:
            ap = a.copy()
            ap[idx] += h
            am = a.copy()
            am[idx] -= h
            fd = (chamfer(ap, b) - chamfer(am, b)) / (2 * h)
            assert fd == pytest.approx(grad[idx], rel=1e-4, abs=1e-8)
