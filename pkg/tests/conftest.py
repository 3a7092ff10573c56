import numpy as np
import pytest

from latentmap.grid import GridConfig, LatentGrid
from latentmap.synth import Box, OrbitCamera, SynthSpec


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random proper rotation via QR with sign fix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def unit_vectors(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    v = rng.normal(size=(n, k))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def small_scene_spec(
    n_boxes: int = 4,
    k: int = 16,
    n_frames: int = 12,
    seed: int = 0,
    prototype_seed: int = 1,
    phase: float = 0.0,
    layout_offsets=None,
) -> SynthSpec:
    """Compact tabletop scene: small boxes on a ring, fast to render and fit."""
    half = 0.12
    centers = [
        (-0.55, -0.35, 0.3), (0.55, -0.35, 0.3), (-0.55, 0.35, 0.3), (0.55, 0.35, 0.3),
        (0.0, -0.55, 0.3), (0.0, 0.55, 0.3), (-0.55, 0.0, 0.55), (0.55, 0.0, 0.55),
    ][:n_boxes]
    if layout_offsets is not None:
        centers = [tuple(np.add(c, o)) for c, o in zip(centers, layout_offsets)]
    boxes = tuple(
        Box(np.subtract(c, half), np.add(c, half)) for c in centers
    )
    return SynthSpec(
        bounds_min=(-1.2, -1.2, -0.1),
        bounds_max=(1.2, 1.2, 1.1),
        boxes=boxes,
        embedding_dim=k,
        prototype_seed=prototype_seed,
        camera=OrbitCamera(
            n_frames=n_frames,
            patch_grid=(20, 24),
            fx=24.0,
            fy=24.0,
            radius=1.9,
            height=1.0,
            target=(0.0, 0.0, 0.3),
            phase=phase,
        ),
        seed=seed,
    )


def small_grid_config(seed: int = 0, feature_dim: int = 8) -> GridConfig:
    return GridConfig(
        bounds_min=(-1.2, -1.2, -0.1),
        bounds_max=(1.2, 1.2, 1.1),
        cell_sizes=(0.24, 0.12),
        feature_dim=feature_dim,
        seed=seed,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_grid():
    """Unit-cube two-level grid with small dense tables."""
    return LatentGrid(
        GridConfig((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (0.5, 0.25), feature_dim=4, seed=9)
    )
