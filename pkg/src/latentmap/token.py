"""Global map token: summarize the map into one fixed-size vector.

Occupied finest-level vertices are decoded to target space, their coordinates
sinusoidally encoded, and a shared per-point network maps each (encoding,
feature) pair to a token-sized vector; the element-wise maximum over points
is the map token. Max pooling makes the token invariant to point order and
to duplicated points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import MlpDecoder, init_decoder
from .errors import EmptyMapError, OutOfBoundsError, ValidationError
from .grid import LatentGrid


@dataclass(frozen=True)
class PosEncConfig:
    """Sinusoidal coordinate encoding over normalized scene bounds."""

    bounds_min: np.ndarray
    bounds_max: np.ndarray
    num_frequencies: int = 6

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValidationError("num_frequencies must be >= 1")
        object.__setattr__(
            self, "bounds_min", np.asarray(self.bounds_min, dtype=np.float64).reshape(3)
        )
        object.__setattr__(
            self, "bounds_max", np.asarray(self.bounds_max, dtype=np.float64).reshape(3)
        )

    @property
    def output_dim(self) -> int:
        return 6 * self.num_frequencies

    @classmethod
    def for_grid(cls, grid: LatentGrid, num_frequencies: int = 6) -> "PosEncConfig":
        lo, hi = grid.bounds
        return cls(lo, hi, num_frequencies)


@dataclass(frozen=True)
class AggregatorWeights:
    """Shared per-point network (same MLP structure as the decoder) plus seed."""

    net: MlpDecoder
    seed: int = 0

    @property
    def token_dim(self) -> int:
        return self.net.out_dim


@dataclass(frozen=True)
class MapToken:
    """Max-pooled global aggregate over decoded occupied vertices."""

    values: np.ndarray
    vertex_count: int
    map_version: int = 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(v).all():
            raise ValidationError("map token has non-finite entries")
        object.__setattr__(self, "values", v)


def init_aggregator(seed: int, in_dim: int, hidden_dims=(128, 256),
                    token_dim: int = 256) -> AggregatorWeights:
    return AggregatorWeights(init_decoder(seed, hidden_dims, in_dim, token_dim), seed)


def positional_encode_batch(zs: np.ndarray, cfg: PosEncConfig) -> np.ndarray:
    """(n, 6B) sinusoidal features: per axis, [sin(2^b pi u), cos(2^b pi u)]
    for b = 0..B-1, axis-major, with u the bounds-normalized coordinate."""
    zs = np.asarray(zs, dtype=np.float64).reshape(-1, 3)
    lo, hi = cfg.bounds_min, cfg.bounds_max
    if np.any(zs < lo) or np.any(zs > hi):
        raise OutOfBoundsError("positional encoding input outside bounds")
    u = (zs - lo) / (hi - lo)
    freqs = (2.0 ** np.arange(cfg.num_frequencies)) * np.pi  # (B,)
    ang = u[:, :, None] * freqs[None, None, :]  # (n, 3, B)
    parts = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (n, 3, B, 2)
    return parts.reshape(len(zs), cfg.output_dim)


def positional_encode(z, cfg: PosEncConfig) -> np.ndarray:
    return positional_encode_batch(np.asarray(z).reshape(1, 3), cfg)[0]


def decode_occupied(grid: LatentGrid, decoder: MlpDecoder):
    """Decoded feature at every occupied finest vertex, in sorted coord order.

    Returns (positions (m, 3), features (m, k)); both empty when nothing is
    occupied.
    """
    _, positions = grid.occupied_vertices()
    if len(positions) == 0:
        return positions, np.zeros((0, decoder.out_dim))
    feats, _ = grid.encode_batch(positions)
    return positions, decoder.decode_batch(feats)


def pointwise_outputs(positions: np.ndarray, features: np.ndarray,
                      weights: AggregatorWeights, cfg: PosEncConfig) -> np.ndarray:
    """Per-point network outputs before pooling: net([posenc(z), feature])."""
    enc = positional_encode_batch(positions, cfg)
    x = np.concatenate([enc, np.asarray(features, dtype=np.float64)], axis=1)
    if x.shape[1] != weights.net.in_dim:
        raise ValidationError(
            f"aggregator expects {weights.net.in_dim} inputs, got {x.shape[1]} "
            f"(= {cfg.output_dim} encoding + {x.shape[1] - cfg.output_dim} feature)"
        )
    return weights.net.decode_batch(x)


def aggregate(positions: np.ndarray, features: np.ndarray,
              weights: AggregatorWeights, cfg: PosEncConfig,
              allow_empty: bool = False, map_version: int = 1) -> MapToken:
    """Max-pool per-point network outputs into the global map token.

    An empty vertex set raises :class:`EmptyMapError` unless ``allow_empty``
    requests a zero token of the aggregator's output width.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        if allow_empty:
            return MapToken(np.zeros(weights.token_dim), 0, map_version)
        raise EmptyMapError("no occupied vertices to aggregate")
    out = pointwise_outputs(positions, features, weights, cfg)
    return MapToken(out.max(axis=0), len(positions), map_version)


def map_token(grid: LatentGrid, decoder: MlpDecoder, weights: AggregatorWeights,
              num_frequencies: int = 6, allow_empty: bool = False) -> MapToken:
    """Full pipeline: decode occupied vertices, then aggregate."""
    cfg = PosEncConfig.for_grid(grid, num_frequencies)
    positions, feats = decode_occupied(grid, decoder)
    return aggregate(positions, feats, weights, cfg, allow_empty=allow_empty)
