"""Back-projection correctness against hand-computed points and the forward
pinhole projection oracle."""

import numpy as np
import pytest

from latentmap.errors import BehindCameraError, ValidationError
from latentmap.ingest import (
    CameraFrame,
    CameraIntrinsics,
    CameraPose,
    back_project,
    concat_batches,
    filter_dynamic,
    forward_project,
    patch_center_pixels,
)

from conftest import random_rotation, unit_vectors


def _frame(depth, k=4, pose=None, intrinsics=None, mask=None, emb=None):
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    if intrinsics is None:
        intrinsics = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1)
    if pose is None:
        pose = CameraPose(np.eye(3), np.zeros(3))
    if emb is None:
        emb = unit_vectors(np.random.default_rng(0), h * w, k).reshape(h, w, k)
    return CameraFrame(depth, emb, pose, intrinsics, mask)


class TestBackProjectExact:
    def test_identity_projection(self):
        """fx=fy=1, cx=cy=0, R=I, t=0, patch (0,0) at depth 1 -> (0, 0, 1)."""
        batch = back_project(_frame([[1.0]]))
        assert len(batch) == 1
        np.testing.assert_allclose(batch.xs[0], [0.0, 0.0, 1.0], atol=1e-15)

    def test_pure_translation(self):
        """Same ray, camera at t=(1,2,3) -> (1, 2, 4)."""
        pose = CameraPose(np.eye(3), np.array([1.0, 2.0, 3.0]))
        batch = back_project(_frame([[1.0]], pose=pose))
        np.testing.assert_allclose(batch.xs[0], [1.0, 2.0, 4.0], atol=1e-15)

    def test_off_center_patch(self):
        """Patch (row 1, col 2) of a stride-1 grid sits at pixel (u=2, v=1):
        x = ((2-cx)/fx * Z, (1-cy)/fy * Z, Z)."""
        intr = CameraIntrinsics(2.0, 4.0, 0.5, 0.25, 1)
        depth = np.zeros((3, 4))
        depth[1, 2] = 8.0
        batch = back_project(_frame(depth, intrinsics=intr))
        assert len(batch) == 1
        expected = [8.0 * (2 - 0.5) / 2.0, 8.0 * (1 - 0.25) / 4.0, 8.0]
        np.testing.assert_allclose(batch.xs[0], expected, atol=1e-12)
        np.testing.assert_array_equal(batch.patch_indices[0], [1, 2])

    def test_stride_two_patch_center(self):
        """Stride 2: patch (0,0) center sits at pixel coordinate 0.5 on both
        axes, and depth is read at the rounded pixel (1,1)."""
        intr = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 2)
        depth = np.array([[0.0, 0.0], [0.0, 3.0]])
        emb = unit_vectors(np.random.default_rng(1), 1, 4).reshape(1, 1, 4)
        batch = back_project(CameraFrame(depth, emb, CameraPose(np.eye(3), np.zeros(3)), intr))
        assert len(batch) == 1
        np.testing.assert_allclose(batch.xs[0], [1.5, 1.5, 3.0], atol=1e-12)

    def test_rotated_camera(self):
        """90 degree yaw: camera z maps to world y."""
        rot = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]).T
        pose = CameraPose(rot.T, np.zeros(3))
        batch = back_project(_frame([[2.0]], pose=pose))
        np.testing.assert_allclose(batch.xs[0], pose.rotation @ [0, 0, 2.0], atol=1e-12)


class TestForwardProject:
    def test_identity(self):
        (u, v), d = forward_project([0.0, 0.0, 1.0], CameraPose(np.eye(3), np.zeros(3)),
                                    CameraIntrinsics(1.0, 1.0, 0.0, 0.0))
        assert (u, v) == (0.0, 0.0)
        assert d == 1.0

    def test_inverts_translation_example(self):
        pose = CameraPose(np.eye(3), np.array([1.0, 2.0, 3.0]))
        (u, v), d = forward_project([1.0, 2.0, 4.0], pose, CameraIntrinsics(1, 1, 0, 0))
        np.testing.assert_allclose([u, v, d], [0.0, 0.0, 1.0], atol=1e-15)

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            forward_project([0.0, 0.0, -1.0], CameraPose(np.eye(3), np.zeros(3)),
                            CameraIntrinsics(1, 1, 0, 0))


class TestRoundTrip:
    def test_thousand_random_frames(self):
        """back_project then forward_project recovers patch center and depth
        within 1e-9 across 1000 randomized frames."""
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(1000):
            h, w = int(rng.integers(1, 4)), int(rng.integers(1, 5))
            stride = int(rng.integers(1, 4))
            intr = CameraIntrinsics(
                fx=float(rng.uniform(0.5, 200.0)),
                fy=float(rng.uniform(0.5, 200.0)),
                cx=float(rng.uniform(-5.0, 5.0)),
                cy=float(rng.uniform(-5.0, 5.0)),
                patch_stride=stride,
            )
            pose = CameraPose(random_rotation(rng), rng.uniform(-3, 3, size=3))
            depth = rng.uniform(0.1, 10.0, size=(h * stride, w * stride))
            emb = unit_vectors(rng, h * w, 3).reshape(h, w, 3)
            frame = CameraFrame(depth, emb, pose, intr)
            batch = back_project(frame)
            assert len(batch) == h * w
            u, v = patch_center_pixels((h, w), stride)
            for x, (r, c) in zip(batch.xs, batch.patch_indices):
                (pu, pv), d = forward_project(x, pose, intr)
                worst = max(worst, abs(pu - u[r, c]), abs(pv - v[r, c]))
                # Depth was read at the pixel nearest the patch center.
                iv = int(np.floor(v[r, c] + 0.5))
                iu = int(np.floor(u[r, c] + 0.5))
                worst = max(worst, abs(d - depth[iv, iu]))
        assert worst < 1e-9


class TestFiltersAndCounts:
    def test_invalid_depth_skipped_and_counted(self):
        depth = np.array([[1.0, 0.0], [-2.0, 3.0]])
        batch = back_project(_frame(depth))
        assert len(batch) == 2
        assert batch.skip_counts["invalid_depth"] == 2

    def test_sample_count_is_exact(self):
        """count = patches with valid depth minus masked patches."""
        rng = np.random.default_rng(7)
        depth = rng.uniform(-1.0, 5.0, size=(6, 7))
        mask = (rng.random((6, 7)) < 0.3).astype(np.uint8)
        batch = back_project(_frame(depth, mask=mask))
        valid = depth > 0
        expected = int(valid.sum() - (valid & mask.astype(bool)).sum())
        assert len(batch) == expected
        assert batch.skip_counts["dynamic"] == int((valid & mask.astype(bool)).sum())

    def test_unit_norm_targets(self):
        rng = np.random.default_rng(3)
        emb = rng.normal(size=(4, 5, 6)) * 37.0  # deliberately unnormalized
        frame = CameraFrame(np.full((4, 5), 2.0), emb,
                            CameraPose(np.eye(3), np.zeros(3)),
                            CameraIntrinsics(1, 1, 0, 0))
        batch = back_project(frame)
        np.testing.assert_allclose(np.linalg.norm(batch.ys, axis=1), 1.0, atol=1e-6)

    def test_bounds_filter_counts(self):
        depth = np.array([[1.0, 50.0]])
        batch = back_project(_frame(depth), bounds=((-5, -5, -5), (5, 5, 5)))
        assert len(batch) == 1
        assert batch.skip_counts["out_of_bounds"] == 1

    def test_all_invalid_is_empty_not_error(self):
        batch = back_project(_frame(np.zeros((2, 2))))
        assert len(batch) == 0

    def test_non_orthonormal_rotation_rejected(self):
        bad = np.eye(3)
        bad[0, 0] = 1.5
        with pytest.raises(ValidationError):
            CameraPose(bad, np.zeros(3))

    def test_reflection_rejected(self):
        mirror = np.diag([-1.0, 1.0, 1.0])  # orthonormal but det -1
        with pytest.raises(ValidationError):
            CameraPose(mirror, np.zeros(3))


class TestFilterDynamic:
    def _batch(self):
        return back_project(_frame(np.full((2, 2), 1.5)))

    def test_all_zeros_mask_is_identity(self):
        batch = self._batch()
        out = filter_dynamic(batch, np.zeros((2, 2)))
        assert len(out) == len(batch)
        np.testing.assert_array_equal(out.xs, batch.xs)

    def test_all_ones_mask_empties(self):
        out = filter_dynamic(self._batch(), np.ones((2, 2)))
        assert len(out) == 0

    def test_checkerboard_keeps_two(self):
        out = filter_dynamic(self._batch(), np.array([[1, 0], [0, 1]]))
        assert len(out) == 2
        # Survivors keep their original relative order.
        np.testing.assert_array_equal(out.patch_indices, [[0, 1], [1, 0]])

    def test_shape_mismatch_errors(self):
        with pytest.raises(ValidationError):
            filter_dynamic(self._batch(), np.zeros((3, 3)))


class TestBatchPlumbing:
    def test_concat_requires_matching_k(self):
        a = back_project(_frame([[1.0]], k=4))
        b = back_project(_frame([[1.0]], k=5))
        with pytest.raises(ValidationError):
            concat_batches([a, b])

    def test_concat_preserves_order(self):
        a = back_project(_frame(np.full((1, 2), 1.0)))
        b = back_project(_frame(np.full((1, 2), 2.0)))
        merged = concat_batches([a, b])
        assert len(merged) == 4
        np.testing.assert_array_equal(merged.xs[:2], a.xs)

    def test_samples_iterate(self):
        batch = back_project(_frame(np.full((2, 2), 1.0)))
        samples = list(batch)
        assert len(samples) == 4
        np.testing.assert_allclose(np.linalg.norm(samples[0].y), 1.0, atol=1e-9)
