"""Multiresolution latent voxel grid with trilinear interpolation.

The scene-specific parameters live here: L levels of per-vertex feature
vectors (dense arrays when the level fits the table budget, spatially hashed
above it), plus an exact occupancy set over finest-level vertex coordinates.
Querying a point gathers the eight surrounding vertices per level, blends
them trilinearly, and concatenates the per-level results coarse to fine.

No positional encoding of the query coordinate enters the feature: the grid
itself is the only carrier of spatial information, which keeps features free
of absolute-coordinate structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._workspace import scratch
from .errors import OutOfBoundsError, ValidationError

# Spatial hash: coord * prime per axis, xor-folded, modulo table size.
HASH_PRIMES = (1, 2654435761, 805459861)

FEATURE_INIT_SCALE = 1e-4

# Cell corner offsets in x-fastest order: bit 0 -> x, bit 1 -> y, bit 2 -> z.
CORNER_OFFSETS = np.array(
    [[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64
)


@dataclass(frozen=True)
class GridConfig:
    """Geometry and storage budget of the multiresolution grid."""

    bounds_min: np.ndarray
    bounds_max: np.ndarray
    cell_sizes: tuple[float, ...]
    feature_dim: int = 8
    table_size: int = 2**19
    seed: int = 0

    def __post_init__(self):
        lo = np.asarray(self.bounds_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.bounds_max, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise ValidationError(f"degenerate bounds: min={lo}, max={hi}")
        cells = tuple(float(c) for c in self.cell_sizes)
        if len(cells) < 1:
            raise ValidationError("need at least one grid level")
        if any(c <= 0 for c in cells):
            raise ValidationError(f"cell sizes must be positive: {cells}")
        for coarse, fine in zip(cells, cells[1:]):
            if fine >= coarse:
                raise ValidationError(
                    f"cell sizes must strictly decrease coarse to fine: {cells}"
                )
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be >= 1")
        if self.table_size < 1:
            raise ValidationError("table_size must be >= 1")
        object.__setattr__(self, "bounds_min", lo)
        object.__setattr__(self, "bounds_max", hi)
        object.__setattr__(self, "cell_sizes", cells)

    @property
    def num_levels(self) -> int:
        return len(self.cell_sizes)


class GridLevel:
    """One resolution level: vertex dims plus dense or hashed feature storage."""

    def __init__(self, cell_size: float, dims: np.ndarray, mode: str, features: np.ndarray):
        self.cell_size = cell_size
        self.dims = dims  # vertex counts per axis
        self.mode = mode  # "dense" | "hashed"
        self.features = features  # (slots, c) float64

    @property
    def num_vertices(self) -> int:
        return int(np.prod(self.dims))

    @property
    def num_slots(self) -> int:
        return self.features.shape[0]


class LatentGrid:
    """Scene-specific feature store: L grid levels plus finest-level occupancy."""

    def __init__(self, config: GridConfig):
        self.config = config
        self.levels: list[GridLevel] = []
        rng = np.random.default_rng(config.seed)
        extent = config.bounds_max - config.bounds_min
        for cell in config.cell_sizes:
            n_cells = np.maximum(1, np.ceil(extent / cell - 1e-12).astype(np.int64))
            dims = n_cells + 1
            total = int(np.prod(dims))
            if total <= config.table_size:
                mode, slots = "dense", total
            else:
                mode, slots = "hashed", config.table_size
            feats = rng.uniform(-FEATURE_INIT_SCALE, FEATURE_INIT_SCALE,
                                size=(slots, config.feature_dim))
            self.levels.append(GridLevel(cell, dims, mode, feats))
        self.occupancy: set[tuple[int, int, int]] = set()
        self._grads: list[np.ndarray] | None = None
        # Finest-level cells whose corners are already in the occupancy set;
        # lets repeated marking of hot cells skip the expensive expansion.
        self._marked_cells: set[int] = set()

    # ── geometry ─────────────────────────────────────────────────────────

    @property
    def bounds(self):
        return self.config.bounds_min, self.config.bounds_max

    @property
    def feature_dim(self) -> int:
        """Width of the concatenated encoding: levels * per-level width."""
        return len(self.levels) * self.config.feature_dim

    def _check_bounds(self, xs: np.ndarray):
        lo, hi = self.bounds
        bad = ~np.all((xs >= lo) & (xs <= hi), axis=-1)
        if np.any(bad):
            first = np.asarray(xs).reshape(-1, 3)[np.flatnonzero(bad.ravel())[0]]
            raise OutOfBoundsError(
                f"{int(bad.sum())} point(s) outside bounds [{lo}, {hi}], first: {first}"
            )

    def _cells_and_fracs(self, xs: np.ndarray, level_index: int):
        """Cell index and in-cell fraction per point; max-face points clamp
        into the last cell (fraction 1)."""
        level = self.levels[level_index]
        u = (xs - self.config.bounds_min) / level.cell_size
        cell = np.minimum(np.floor(u).astype(np.int64), level.dims - 2)
        cell = np.maximum(cell, 0)
        frac = np.clip(u - cell, 0.0, 1.0)
        return cell, frac

    # ── interpolation ────────────────────────────────────────────────────

    def interpolation_weights(self, x, level_index: int):
        """Integer coords and trilinear weights of the 8 vertices around x.

        Weights are the product over axes of (frac if the corner is offset
        along that axis else 1 - frac); they are nonnegative and sum to 1.
        """
        x = np.asarray(x, dtype=np.float64).reshape(3)
        self._check_bounds(x)
        cell, frac = self._cells_and_fracs(x[None, :], level_index)
        coords = cell[0] + CORNER_OFFSETS  # (8, 3)
        return coords, self._corner_weights(frac)[0]

    def vertex_slot(self, level_index: int, coord) -> int:
        """Storage slot of one vertex: row-major (x fastest) when dense,
        xor-of-primes hash modulo table size when hashed."""
        level = self.levels[level_index]
        coord = np.asarray(coord, dtype=np.int64).reshape(3)
        if np.any(coord < 0) or np.any(coord >= level.dims):
            raise ValidationError(
                f"vertex coord {coord} outside level dims {level.dims}"
            )
        x, y, z = (int(c) for c in coord)
        if level.mode == "dense":
            dx, dy, _ = (int(d) for d in level.dims)
            return x + dx * (y + dy * z)
        p1, p2, p3 = HASH_PRIMES
        return ((x * p1) ^ (y * p2) ^ (z * p3)) % level.num_slots

    def _slots_batch(self, level_index: int, coords: np.ndarray) -> np.ndarray:
        """Vectorized vertex_slot over (..., 3) integer coords."""
        level = self.levels[level_index]
        c = coords.astype(np.uint64)
        if level.mode == "dense":
            dx, dy = np.uint64(level.dims[0]), np.uint64(level.dims[1])
            out = c[..., 0] + dx * (c[..., 1] + dy * c[..., 2])
        else:
            p1, p2, p3 = (np.uint64(p) for p in HASH_PRIMES)
            # uint64 products stay below 2**64 for any realistic dims.
            out = (c[..., 0] * p1) ^ (c[..., 1] * p2) ^ (c[..., 2] * p3)
            out %= np.uint64(level.num_slots)
        return out.astype(np.int64)

    def level_feature(self, level_index: int, x) -> np.ndarray:
        """Trilinear blend of the 8 neighbor features at one level."""
        coords, w = self.interpolation_weights(x, level_index)
        slots = self._slots_batch(level_index, coords)
        return w @ self.levels[level_index].features[slots]

    def encode(self, x) -> np.ndarray:
        """Concatenated per-level features, coarse to fine; length L * c."""
        return np.concatenate(
            [self.level_feature(li, x) for li in range(len(self.levels))]
        )

    @staticmethod
    def _corner_weights(frac: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """(n, 8) trilinear weights in x-fastest corner order."""
        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        w = np.empty((len(frac), 8)) if out is None else out
        w[:, 0] = gx * gy * gz
        w[:, 1] = fx * gy * gz
        w[:, 2] = gx * fy * gz
        w[:, 3] = fx * fy * gz
        w[:, 4] = gx * gy * fz
        w[:, 5] = fx * gy * fz
        w[:, 6] = gx * fy * fz
        w[:, 7] = fx * fy * fz
        return w

    def _corner_slots(self, level_index: int, cell: np.ndarray,
                      workspace: dict | None = None) -> np.ndarray:
        """(n, 8) storage slots of the corners of each cell."""
        level = self.levels[level_index]
        n = len(cell)
        if level.mode == "dense":
            dx, dy = int(level.dims[0]), int(level.dims[1])
            base = cell[:, 0] + dx * (cell[:, 1] + dy * cell[:, 2])
            deltas = (
                CORNER_OFFSETS[:, 0]
                + dx * (CORNER_OFFSETS[:, 1] + dy * CORNER_OFFSETS[:, 2])
            )
            slots = scratch(workspace, ("slots", level_index), (n, 8), np.int64)
            np.add(base[:, None], deltas[None, :], out=slots)
            return slots
        coords = cell[:, None, :] + CORNER_OFFSETS[None, :, :]
        return self._slots_batch(level_index, coords)

    def encode_batch(self, xs: np.ndarray, workspace: dict | None = None):
        """Encode (n, 3) points; returns features (n, L*c) and a cache of
        (slots, weights) per level for the backward pass.

        A workspace dict reuses the per-level scratch arrays between calls;
        the cache then stays valid only until the next encode with the same
        workspace.
        """
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        self._check_bounds(xs)
        n = len(xs)
        c = self.config.feature_dim
        out = scratch(workspace, "encoded", (n, self.feature_dim))
        cache = []
        for li, level in enumerate(self.levels):
            cell, frac = self._cells_and_fracs(xs, li)
            w = self._corner_weights(frac, out=scratch(workspace, ("w", li), (n, 8)))
            slots = self._corner_slots(li, cell, workspace)
            gathered = scratch(workspace, ("gather", li), (n * 8, c))
            np.take(level.features, slots.ravel(), axis=0, out=gathered)
            blend = scratch(workspace, ("blend", li), (n, 1, c))
            # Batched (1, 8) @ (8, c) per point.
            np.matmul(w[:, None, :], gathered.reshape(n, 8, c), out=blend)
            out[:, li * c : (li + 1) * c] = blend[:, 0, :]
            cache.append((slots, w))
        return out, cache

    # ── gradients ────────────────────────────────────────────────────────

    @property
    def grads(self) -> list[np.ndarray]:
        if self._grads is None:
            self._grads = [np.zeros_like(lv.features) for lv in self.levels]
        return self._grads

    def zero_grad(self):
        for g in self.grads:
            g.fill(0.0)

    def accumulate_gradient(self, level_index: int, coords, weights, upstream):
        """Scatter ``weight * upstream`` into each touched vertex slot.

        ``upstream`` is the loss gradient with respect to this level's
        c-vector output; hashed collisions superpose into the shared slot.
        """
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
        slots = self._slots_batch(level_index, coords)
        grad = self.grads[level_index]
        for s, w in zip(slots, weights):
            grad[s] += w * upstream

    def accumulate_gradient_batch(self, cache, upstream: np.ndarray,
                                  workspace: dict | None = None):
        """Backward of encode_batch: split the (n, L*c) upstream per level and
        scatter-add weighted contributions into the gradient tables."""
        c = self.config.feature_dim
        channel = np.arange(c, dtype=np.int64)
        for li, (slots, w) in enumerate(cache):
            grad = self.grads[li]
            n = len(w)
            up = upstream[:, li * c : (li + 1) * c]
            # (n, 8, c) per-point upstream scaled into all 8 corners at once.
            vals = scratch(workspace, ("vals", li), (n, 8, c))
            np.matmul(w[:, :, None], up[:, None, :], out=vals)
            flat = slots.reshape(-1)
            # One bincount over a composite (slot, channel) index.
            idx = scratch(workspace, ("idx", li), (n * 8, c), np.int64)
            np.multiply(flat[:, None], c, out=idx)
            idx += channel
            acc = np.bincount(idx.ravel(), weights=vals.ravel(), minlength=grad.size)
            grad += acc.reshape(grad.shape)

    # ── occupancy ────────────────────────────────────────────────────────

    def mark_occupied(self, x):
        """Insert the 8 finest-level vertices around x into the occupancy set."""
        self.mark_occupied_batch(np.asarray(x, dtype=np.float64).reshape(1, 3))

    def mark_occupied_batch(self, xs: np.ndarray):
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        self._check_bounds(xs)
        finest = len(self.levels) - 1
        dims = self.levels[finest].dims
        cell, _ = self._cells_and_fracs(xs, finest)
        keys = np.unique(cell[:, 0] + dims[0] * (cell[:, 1] + dims[1] * cell[:, 2]))
        fresh = [k for k in keys.tolist() if k not in self._marked_cells]
        if not fresh:
            return
        self._marked_cells.update(fresh)
        fresh = np.asarray(fresh, dtype=np.int64)
        cells = np.stack(
            [fresh % dims[0], (fresh // dims[0]) % dims[1], fresh // (dims[0] * dims[1])],
            axis=1,
        )
        corners = (cells[:, None, :] + CORNER_OFFSETS[None, :, :]).reshape(-1, 3)
        self.occupancy.update(map(tuple, corners.tolist()))

    def occupied_vertices(self):
        """Occupied finest-level vertices, lexicographically sorted.

        Returns integer coords (m, 3) and their world positions
        ``bounds_min + coord * finest_cell_size``.
        """
        if not self.occupancy:
            return np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3))
        coords = np.array(sorted(self.occupancy), dtype=np.int64)
        positions = self.config.bounds_min + coords * self.levels[-1].cell_size
        return coords, positions
