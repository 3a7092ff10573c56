"""Posed RGB-D frames with per-patch embeddings, lifted into 3D training samples.

A frame carries a depth image at pixel resolution and an embedding grid at
patch resolution (one k-vector per patch). Back-projection turns every patch
with valid depth into a world-space coordinate/feature pair; forward
projection is its exact algebraic inverse and serves as the test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, ValidationError

# Depth values <= 0 mark invalid pixels; one sentinel convention everywhere.
INVALID_DEPTH = 0.0

_ROTATION_TOL = 1e-9
_UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus the pixel stride of the embedding patch grid."""

    fx: float
    fy: float
    cx: float
    cy: float
    patch_stride: int = 1

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValidationError(
                f"focal lengths must be positive, got fx={self.fx} fy={self.fy}"
            )
        if self.patch_stride < 1:
            raise ValidationError(f"patch_stride must be >= 1, got {self.patch_stride}")


@dataclass(frozen=True)
class CameraPose:
    """Rigid world<-camera transform: x_world = rotation @ x_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {rot.shape}")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        det = np.linalg.det(rot)
        if err > _ROTATION_TOL or abs(det - 1.0) > _ROTATION_TOL:
            raise ValidationError(
                f"rotation is not orthonormal with det +1 (max|R'R-I|={err:.3e}, det={det:.12f})"
            )
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class CameraFrame:
    """One posed observation: depth at pixel resolution, embeddings per patch.

    ``depth`` is (H_px, W_px); ``embeddings`` is (H, W, k) with one target
    vector per patch. ``dynamic_mask`` is an optional (H, W) grid where 1
    means "dynamic element, exclude from mapping".
    """

    depth: np.ndarray
    embeddings: np.ndarray
    pose: CameraPose
    intrinsics: CameraIntrinsics
    dynamic_mask: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if depth.ndim != 2:
            raise ValidationError(f"depth must be 2-D, got shape {depth.shape}")
        if emb.ndim != 3:
            raise ValidationError(f"embeddings must be (H, W, k), got shape {emb.shape}")
        h, w, _ = emb.shape
        s = self.intrinsics.patch_stride
        if h * s > depth.shape[0] or w * s > depth.shape[1]:
            raise ValidationError(
                f"patch grid {h}x{w} at stride {s} exceeds depth image {depth.shape}"
            )
        mask = self.dynamic_mask
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != (h, w):
                raise ValidationError(
                    f"dynamic_mask shape {mask.shape} does not match patch grid {(h, w)}"
                )
            mask = mask.astype(np.uint8)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "dynamic_mask", mask)

    @property
    def patch_grid(self) -> tuple[int, int]:
        return self.embeddings.shape[0], self.embeddings.shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.embeddings.shape[2]


@dataclass(frozen=True)
class Sample:
    """One world coordinate paired with a unit-norm target embedding."""

    x: np.ndarray
    y: np.ndarray


class SampleBatch:
    """Ordered coordinate/feature pairs emitted from one source frame.

    Backed by arrays: ``xs`` (n, 3) world coordinates, ``ys`` (n, k) unit-norm
    targets, ``patch_indices`` (n, 2) row/col provenance into the source patch
    grid. ``skip_counts`` reports how many patches were dropped per reason.
    """

    def __init__(
        self,
        xs: np.ndarray,
        ys: np.ndarray,
        patch_indices: np.ndarray | None = None,
        patch_grid: tuple[int, int] | None = None,
        source_frame_id: str = "",
        skip_counts: dict[str, int] | None = None,
    ):
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        ys = np.asarray(ys, dtype=np.float64)
        if ys.ndim != 2 or ys.shape[0] != xs.shape[0]:
            raise ValidationError(
                f"ys must be (n, k) aligned with xs, got {ys.shape} vs {xs.shape}"
            )
        if not np.isfinite(xs).all():
            raise ValidationError("sample coordinates must be finite")
        if len(ys) > 0:
            norm_err = np.abs(np.linalg.norm(ys, axis=1) - 1.0).max()
            if norm_err > _UNIT_NORM_TOL:
                raise ValidationError(
                    f"target embeddings must be unit norm within {_UNIT_NORM_TOL}, "
                    f"max deviation {norm_err:.3e}"
                )
        if patch_indices is None:
            patch_indices = np.zeros((len(xs), 2), dtype=np.int64)
        self.xs = xs
        self.ys = ys
        self.patch_indices = np.asarray(patch_indices, dtype=np.int64).reshape(-1, 2)
        self.patch_grid = patch_grid
        self.source_frame_id = source_frame_id
        self.skip_counts = dict(skip_counts or {})

    def __len__(self) -> int:
        return self.xs.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield Sample(x=self.xs[i], y=self.ys[i])

    @property
    def embedding_dim(self) -> int:
        return self.ys.shape[1]

    def subset(self, indices: np.ndarray) -> "SampleBatch":
        return SampleBatch(
            self.xs[indices],
            self.ys[indices],
            self.patch_indices[indices],
            self.patch_grid,
            self.source_frame_id,
        )


def concat_batches(batches) -> SampleBatch:
    """Concatenate batches (one dataset from many frames); k must agree."""
    batches = list(batches)
    if not batches:
        raise ValidationError("cannot concatenate zero batches")
    dims = {b.embedding_dim for b in batches if len(b) > 0}
    if len(dims) > 1:
        raise ValidationError(f"embedding dims differ across batches: {sorted(dims)}")
    return SampleBatch(
        np.concatenate([b.xs for b in batches]),
        np.concatenate([b.ys for b in batches]),
        np.concatenate([b.patch_indices for b in batches]),
        None,
        "merged",
    )


def patch_center_pixels(patch_grid: tuple[int, int], stride: int):
    """Continuous (u, v) pixel coordinates of every patch center.

    Patch (row, col) covers pixels [row*s, (row+1)*s) x [col*s, (col+1)*s);
    its center sits at ((col+0.5)*s - 0.5, (row+0.5)*s - 0.5), which matches
    the embedding's receptive-field center and is symmetric in the patch.
    """
    h, w = patch_grid
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u = (cols + 0.5) * stride - 0.5
    v = (rows + 0.5) * stride - 0.5
    return u, v


def back_project(frame: CameraFrame, bounds=None) -> SampleBatch:
    """Lift each valid patch of a frame into a world coordinate/feature pair.

    For patch center pixel p = (u, v) with depth Z the world point is
    ``x = R @ K^-1 @ [u, v, 1] * Z + t``. Patches are skipped (and counted)
    when depth is invalid (<= 0 or non-finite), the dynamic mask is set, the
    embedding has no direction to normalize, or the point falls outside
    ``bounds`` when given. Targets are L2-normalized at ingestion.
    """
    h, w = frame.patch_grid
    intr = frame.intrinsics
    u, v = patch_center_pixels((h, w), intr.patch_stride)

    # Depth is read at the pixel nearest to each patch center.
    pv = np.clip(np.floor(v + 0.5).astype(np.int64), 0, frame.depth.shape[0] - 1)
    pu = np.clip(np.floor(u + 0.5).astype(np.int64), 0, frame.depth.shape[1] - 1)
    z = frame.depth[pv, pu]

    skip = {"invalid_depth": 0, "dynamic": 0, "invalid_embedding": 0, "out_of_bounds": 0}
    keep = np.isfinite(z) & (z > 0.0)
    skip["invalid_depth"] = int((~keep).sum())

    if frame.dynamic_mask is not None:
        dyn = frame.dynamic_mask.astype(bool)
        skip["dynamic"] = int((keep & dyn).sum())
        keep &= ~dyn

    emb = frame.embeddings.reshape(h * w, -1)
    norms = np.linalg.norm(emb, axis=1).reshape(h, w)
    degenerate = keep & (norms < 1e-12)
    skip["invalid_embedding"] = int(degenerate.sum())
    keep &= ~degenerate

    rows, cols = np.nonzero(keep)
    zk = z[rows, cols]
    rays = np.stack(
        [
            (u[rows, cols] - intr.cx) / intr.fx,
            (v[rows, cols] - intr.cy) / intr.fy,
            np.ones(len(rows)),
        ],
        axis=1,
    )
    xs = (rays * zk[:, None]) @ frame.pose.rotation.T + frame.pose.translation
    ys = frame.embeddings[rows, cols]
    ys = ys / norms[rows, cols][:, None]

    if bounds is not None:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
        inside = np.all((xs >= lo) & (xs <= hi), axis=1)
        skip["out_of_bounds"] = int((~inside).sum())
        xs, ys = xs[inside], ys[inside]
        rows, cols = rows[inside], cols[inside]

    return SampleBatch(
        xs,
        ys,
        np.stack([rows, cols], axis=1),
        (h, w),
        frame.frame_id,
        skip,
    )


def forward_project(x, pose: CameraPose, intrinsics: CameraIntrinsics):
    """Project a world point to (pixel (u, v), depth); inverse of back_project.

    Raises :class:`BehindCameraError` when the camera-frame z is not positive.
    """
    x = np.asarray(x, dtype=np.float64).reshape(3)
    q = pose.rotation.T @ (x - pose.translation)
    if q[2] <= 0.0:
        raise BehindCameraError(f"point has camera depth {q[2]:.6g} <= 0")
    u = intrinsics.fx * q[0] / q[2] + intrinsics.cx
    v = intrinsics.fy * q[1] / q[2] + intrinsics.cy
    return (u, v), q[2]


def filter_dynamic(batch: SampleBatch, mask: np.ndarray) -> SampleBatch:
    """Drop samples whose originating patch is flagged dynamic (mask == 1).

    The mask must match the batch's source patch grid; survivor order is
    preserved.
    """
    mask = np.asarray(mask)
    if batch.patch_grid is None:
        raise ValidationError("batch carries no patch grid; cannot align mask")
    if mask.shape != tuple(batch.patch_grid):
        raise ValidationError(
            f"mask shape {mask.shape} does not match patch grid {batch.patch_grid}"
        )
    flagged = mask.astype(bool)[batch.patch_indices[:, 0], batch.patch_indices[:, 1]]
    out = batch.subset(~flagged)
    out.skip_counts = dict(batch.skip_counts)
    out.skip_counts["dynamic"] = out.skip_counts.get("dynamic", 0) + int(flagged.sum())
    return out
