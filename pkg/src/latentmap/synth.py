"""Synthetic scenes with exact ground-truth feature fields.

A scene is a set of disjoint axis-aligned boxes inside the bounds, each
carrying one unit-norm prototype embedding. Depth frames are ray-cast from
an orbit trajectory; each patch that hits a box receives that box's
prototype (plus optional seeded noise, renormalized). Because the field is
piecewise constant, the oracle answers the exact target embedding for any
query point, which makes reconstruction thresholds meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .ingest import CameraFrame, CameraIntrinsics, CameraPose, patch_center_pixels

_RAY_NEAR = 1e-6


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise ValidationError(f"degenerate box: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=1)

    def overlaps(self, other: "Box") -> bool:
        return bool(np.all(self.hi > other.lo) and np.all(other.hi > self.lo))

    def translated(self, offset) -> "Box":
        off = np.asarray(offset, dtype=np.float64).reshape(3)
        return Box(self.lo + off, self.hi + off)


@dataclass(frozen=True)
class OrbitCamera:
    """Circular look-at trajectory around a target point (z-up world)."""

    n_frames: int = 50
    patch_grid: tuple[int, int] = (24, 32)  # (H, W) patches
    patch_stride: int = 1
    fx: float = 30.0
    fy: float = 30.0
    radius: float = 2.0
    height: float = 1.2
    target: tuple[float, float, float] = (0.0, 0.0, 0.3)
    phase: float = 0.0

    def pose(self, index: int) -> CameraPose:
        angle = self.phase + 2.0 * np.pi * index / max(self.n_frames, 1)
        target = np.asarray(self.target, dtype=np.float64)
        eye = target + np.array(
            [self.radius * np.cos(angle), self.radius * np.sin(angle), 0.0]
        )
        eye[2] = self.height
        forward = target - eye
        norm = np.linalg.norm(forward)
        if norm < 1e-9:
            raise ValidationError("degenerate trajectory: camera sits on its target")
        forward /= norm
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-9:
            raise ValidationError("degenerate trajectory: view axis parallel to world up")
        right /= rnorm
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward], axis=1)  # world <- camera
        return CameraPose(rotation, eye)

    def intrinsics(self) -> CameraIntrinsics:
        h, w = self.patch_grid
        s = self.patch_stride
        # Principal point at the center of the pixel grid.
        cx = (w * s - 1) / 2.0
        cy = (h * s - 1) / 2.0
        return CameraIntrinsics(self.fx, self.fy, cx, cy, s)


@dataclass(frozen=True)
class SynthSpec:
    """Full description of a synthetic scene and its capture trajectory."""

    bounds_min: tuple[float, float, float]
    bounds_max: tuple[float, float, float]
    boxes: tuple[Box, ...]
    embedding_dim: int = 64
    prototype_seed: int = 1
    prototype_indices: tuple[int, ...] | None = None  # defaults to 0..n_boxes-1
    noise_sigma: float = 0.0
    camera: OrbitCamera = field(default_factory=OrbitCamera)
    seed: int = 0

    def __post_init__(self):
        if len(self.boxes) < 1:
            raise ValidationError("scene needs at least one region box")
        for i, a in enumerate(self.boxes):
            for b in self.boxes[i + 1 :]:
                if a.overlaps(b):
                    raise ValidationError(f"region boxes must be disjoint, {a} overlaps {b}")
        idx = self.prototype_indices
        if idx is not None and len(idx) != len(self.boxes):
            raise ValidationError("prototype_indices must align with boxes")

    @property
    def region_prototype_indices(self) -> tuple[int, ...]:
        if self.prototype_indices is not None:
            return self.prototype_indices
        return tuple(range(len(self.boxes)))

    def with_box_moved(self, index: int, offset) -> "SynthSpec":
        """Relocate one region; everything else (prototypes, camera) unchanged."""
        boxes = list(self.boxes)
        boxes[index] = boxes[index].translated(offset)
        return replace(self, boxes=tuple(boxes))


def make_prototypes(k: int, count: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm prototype embeddings, one row each."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(count, k))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


class FeatureOracle:
    """Exact ground-truth feature field of a synthetic scene."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        n_protos = max(spec.region_prototype_indices) + 1
        self.prototypes = make_prototypes(
            spec.embedding_dim, n_protos, spec.prototype_seed
        )

    def region_index(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Region containing each point (-1 when outside every box)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.full(len(points), -1, dtype=np.int64)
        for i, box in enumerate(self.spec.boxes):
            hit = box.contains(points, tol)
            out[hit & (out == -1)] = i
        return out

    def query(self, points: np.ndarray, tol: float = 1e-9):
        """Ground-truth embedding per point plus a validity mask.

        Points outside every region get a zero row and mask False.
        """
        region = self.region_index(points, tol)
        valid = region >= 0
        out = np.zeros((len(region), self.spec.embedding_dim))
        proto_idx = np.asarray(self.spec.region_prototype_indices, dtype=np.int64)
        out[valid] = self.prototypes[proto_idx[region[valid]]]
        return out, valid


def _ray_box_depth(origin: np.ndarray, dirs: np.ndarray, box: Box) -> np.ndarray:
    """Entry depth of each ray into a box, +inf for misses.

    Rays are parameterized by camera z-depth: p(Z) = origin + dirs * Z, so the
    slab intersection works directly in depth units.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box.lo - origin) / dirs
        t2 = (box.hi - origin) / dirs
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # Axis-parallel rays: inside the slab means unbounded, outside means miss.
    parallel = np.abs(dirs) < 1e-15
    inside = (origin >= box.lo) & (origin <= box.hi)
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
    t_in = np.maximum(near.max(axis=1), _RAY_NEAR)
    t_out = far.min(axis=1)
    hit = t_out >= t_in
    return np.where(hit, t_in, np.inf)


def render_frame(spec: SynthSpec, frame_index: int, oracle: FeatureOracle,
                 n_frames: int | None = None) -> CameraFrame:
    """Ray-cast one orbit frame: depth per pixel, prototype per patch."""
    cam = spec.camera if n_frames is None else replace(spec.camera, n_frames=n_frames)
    pose = cam.pose(frame_index)
    intr = cam.intrinsics()
    h, w = cam.patch_grid
    s = cam.patch_stride
    h_px, w_px = h * s, w * s

    cols, rows = np.meshgrid(np.arange(w_px), np.arange(h_px))
    dirs_cam = np.stack(
        [
            (cols.ravel() - intr.cx) / intr.fx,
            (rows.ravel() - intr.cy) / intr.fy,
            np.ones(h_px * w_px),
        ],
        axis=1,
    )
    dirs = dirs_cam @ pose.rotation.T

    depths = np.full(h_px * w_px, np.inf)
    labels = np.full(h_px * w_px, -1, dtype=np.int64)
    for i, box in enumerate(spec.boxes):
        d = _ray_box_depth(pose.translation, dirs, box)
        closer = d < depths
        depths[closer] = d[closer]
        labels[closer] = i

    depth_img = np.where(np.isfinite(depths), depths, 0.0).reshape(h_px, w_px)
    labels = labels.reshape(h_px, w_px)

    # Patch embeddings follow the label under the patch-center pixel.
    pu, pv = patch_center_pixels((h, w), s)
    iu = np.clip(np.floor(pu + 0.5).astype(np.int64), 0, w_px - 1)
    iv = np.clip(np.floor(pv + 0.5).astype(np.int64), 0, h_px - 1)
    patch_labels = labels[iv, iu]

    proto_idx = np.asarray(spec.region_prototype_indices, dtype=np.int64)
    embeddings = np.zeros((h, w, spec.embedding_dim))
    hit = patch_labels >= 0
    embeddings[hit] = oracle.prototypes[proto_idx[patch_labels[hit]]]
    if spec.noise_sigma > 0.0:
        rng = np.random.default_rng((spec.seed, frame_index))
        noisy = embeddings[hit] + rng.normal(
            0.0, spec.noise_sigma, size=embeddings[hit].shape
        )
        embeddings[hit] = noisy / np.linalg.norm(noisy, axis=1, keepdims=True)

    return CameraFrame(
        depth=depth_img,
        embeddings=embeddings,
        pose=pose,
        intrinsics=intr,
        frame_id=f"frame_{frame_index:04d}",
    )


def synth_scene(spec: SynthSpec, n_frames: int | None = None):
    """Render the full trajectory; returns (frames, oracle), seeded."""
    count = spec.camera.n_frames if n_frames is None else int(n_frames)
    if count < 1:
        raise ValidationError("need at least one frame")
    oracle = FeatureOracle(spec)
    frames = [render_frame(spec, i, oracle, n_frames=count) for i in range(count)]
    return frames, oracle


def spec_to_json(spec: SynthSpec) -> dict:
    cam = spec.camera
    return {
        "bounds_min": list(spec.bounds_min),
        "bounds_max": list(spec.bounds_max),
        "boxes": [{"lo": b.lo.tolist(), "hi": b.hi.tolist()} for b in spec.boxes],
        "embedding_dim": spec.embedding_dim,
        "prototype_seed": spec.prototype_seed,
        "prototype_indices": (
            list(spec.prototype_indices) if spec.prototype_indices is not None else None
        ),
        "noise_sigma": spec.noise_sigma,
        "camera": {
            "n_frames": cam.n_frames,
            "patch_grid": list(cam.patch_grid),
            "patch_stride": cam.patch_stride,
            "fx": cam.fx,
            "fy": cam.fy,
            "radius": cam.radius,
            "height": cam.height,
            "target": list(cam.target),
            "phase": cam.phase,
        },
        "seed": spec.seed,
    }


def spec_from_json(payload: dict) -> SynthSpec:
    try:
        cam_d = payload.get("camera", {})
        camera = OrbitCamera(
            n_frames=int(cam_d.get("n_frames", 50)),
            patch_grid=tuple(cam_d.get("patch_grid", (24, 32))),
            patch_stride=int(cam_d.get("patch_stride", 1)),
            fx=float(cam_d.get("fx", 30.0)),
            fy=float(cam_d.get("fy", 30.0)),
            radius=float(cam_d.get("radius", 2.0)),
            height=float(cam_d.get("height", 1.2)),
            target=tuple(cam_d.get("target", (0.0, 0.0, 0.3))),
            phase=float(cam_d.get("phase", 0.0)),
        )
        idx = payload.get("prototype_indices")
        return SynthSpec(
            bounds_min=tuple(payload["bounds_min"]),
            bounds_max=tuple(payload["bounds_max"]),
            boxes=tuple(Box(b["lo"], b["hi"]) for b in payload["boxes"]),
            embedding_dim=int(payload.get("embedding_dim", 64)),
            prototype_seed=int(payload.get("prototype_seed", 1)),
            prototype_indices=tuple(idx) if idx is not None else None,
            noise_sigma=float(payload.get("noise_sigma", 0.0)),
            camera=camera,
            seed=int(payload.get("seed", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad scene spec: {exc}") from exc
