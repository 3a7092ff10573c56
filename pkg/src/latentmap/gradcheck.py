"""Finite-difference verification of every hand-derived gradient path.

Each check perturbs one parameter at a time and compares the analytic
gradient against central differences of the plain forward pass, which keeps
the oracle independent of the backward implementation. Random cases are
regenerated until all rectifier pre-activations sit clear of zero, so the
difference quotient never straddles a kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import MlpDecoder, init_decoder
from .grid import GridConfig, LatentGrid
from .trainer import cosine_loss_batch

FD_STEP = 1e-5
REL_TOL = 1e-4
# Pre-activations must clear zero by more than the perturbation can move them.
KINK_MARGIN = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / denom).max())


def _central_diff(fn, param: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(param)
    flat = param.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def _min_preactivation(decoder: MlpDecoder, x: np.ndarray) -> float:
    """Smallest |pre-activation| over all hidden units (own forward pass)."""
    h = np.asarray(x, dtype=np.float64)
    worst = np.inf
    for i, (w, b) in enumerate(zip(decoder.weights, decoder.biases)):
        z = h @ w + b
        if i == decoder.num_layers - 1:
            break
        worst = min(worst, float(np.abs(z).min()))
        h = np.maximum(z, 0.0)
    return worst


# ── decoder-only check ───────────────────────────────────────────────────


def check_decoder(seed: int, hidden_dims=(8, 8), in_dim: int = 6, out_dim: int = 5,
                  batch: int = 3) -> float:
    """Max relative error of decoder parameter and input gradients for a
    random linear functional of the outputs."""
    attempt = 0
    while True:
        rng = np.random.default_rng((seed, attempt))
        decoder = init_decoder(int(rng.integers(1 << 31)), hidden_dims, in_dim, out_dim)
        x = rng.uniform(-1.0, 1.0, size=(batch, in_dim))
        if _min_preactivation(decoder, x) > KINK_MARGIN:
            break
        attempt += 1
    upstream = rng.normal(size=(batch, out_dim))

    def objective() -> float:
        y, _ = decoder.forward_batch(x)
        return float(np.sum(y * upstream))

    y, cache = decoder.forward_batch(x)
    param_grads, dx = decoder.backward_batch(cache, upstream)

    worst = 0.0
    for param, grad in zip(decoder.parameters, param_grads):
        fd = _central_diff(objective, param)
        worst = max(worst, relative_error(grad, fd))
    fd_x = _central_diff(objective, x)
    worst = max(worst, relative_error(dx, fd_x))
    return worst


# ── grid scatter check ───────────────────────────────────────────────────


def _toy_grid(rng: np.random.Generator, feature_dim: int = 3) -> LatentGrid:
    config = GridConfig(
        bounds_min=(0.0, 0.0, 0.0),
        bounds_max=(1.0, 1.0, 1.0),
        cell_sizes=(0.5, 0.25),
        feature_dim=feature_dim,
        seed=int(rng.integers(1 << 31)),
    )
    grid = LatentGrid(config)
    for level in grid.levels:
        level.features[:] = rng.uniform(-0.5, 0.5, size=level.features.shape)
    return grid


def check_grid(seed: int, batch: int = 4) -> float:
    """Max relative error of grid feature gradients under a random linear
    functional of the concatenated encoding."""
    rng = np.random.default_rng(seed)
    grid = _toy_grid(rng)
    xs = rng.uniform(0.0, 1.0, size=(batch, 3))
    upstream = rng.normal(size=(batch, grid.feature_dim))

    def objective() -> float:
        feats, _ = grid.encode_batch(xs)
        return float(np.sum(feats * upstream))

    _, cache = grid.encode_batch(xs)
    grid.zero_grad()
    grid.accumulate_gradient_batch(cache, upstream)

    worst = 0.0
    for level, grad in zip(grid.levels, grid.grads):
        fd = _central_diff(objective, level.features)
        worst = max(worst, relative_error(grad, fd))
    return worst


# ── composite loss check ─────────────────────────────────────────────────


@dataclass
class CompositeCase:
    grid: LatentGrid
    decoder: MlpDecoder
    xs: np.ndarray
    ys: np.ndarray


def build_composite_case(seed: int, feature_dim: int = 3, hidden_dims=(8,),
                         out_dim: int = 5, batch: int = 4) -> CompositeCase:
    """Random two-level grid + decoder + batch, regenerated until rectifier
    pre-activations clear the kink margin."""
    attempt = 0
    while True:
        rng = np.random.default_rng((seed, attempt))
        grid = _toy_grid(rng, feature_dim)
        decoder = init_decoder(
            int(rng.integers(1 << 31)), hidden_dims, grid.feature_dim, out_dim
        )
        xs = rng.uniform(0.0, 1.0, size=(batch, 3))
        ys = rng.normal(size=(batch, out_dim))
        ys /= np.linalg.norm(ys, axis=1, keepdims=True)
        feats, _ = grid.encode_batch(xs)
        if _min_preactivation(decoder, feats) > KINK_MARGIN:
            return CompositeCase(grid, decoder, xs, ys)
        attempt += 1


def composite_loss(case: CompositeCase) -> float:
    feats, _ = case.grid.encode_batch(case.xs)
    y_hat = case.decoder.decode_batch(feats)
    losses, _ = cosine_loss_batch(y_hat, case.ys)
    return float(losses.mean())


def check_composite(seed: int) -> float:
    """Max relative error of the full loss gradient through the decoder and
    both grid levels against central differences."""
    case = build_composite_case(seed)
    grid, decoder = case.grid, case.decoder
    n = len(case.xs)

    feats, grid_cache = grid.encode_batch(case.xs)
    y_hat, dec_cache = decoder.forward_batch(feats)
    _, dy = cosine_loss_batch(y_hat, case.ys)
    dy /= n
    param_grads, dfeat = decoder.backward_batch(dec_cache, dy)
    grid.zero_grad()
    grid.accumulate_gradient_batch(grid_cache, dfeat)

    objective = lambda: composite_loss(case)
    worst = 0.0
    for level, grad in zip(grid.levels, grid.grads):
        fd = _central_diff(objective, level.features)
        worst = max(worst, relative_error(grad, fd))
    for param, grad in zip(decoder.parameters, param_grads):
        fd = _central_diff(objective, param)
        worst = max(worst, relative_error(grad, fd))
    return worst


def run_suite(seed: int = 0, cases: int = 20, verbose: bool = False) -> dict:
    """Run every check ``cases`` times; returns per-check worst errors."""
    results = {"decoder": 0.0, "grid": 0.0, "composite": 0.0}
    for i in range(cases):
        results["decoder"] = max(results["decoder"], check_decoder(seed * 100003 + i))
        results["grid"] = max(results["grid"], check_grid(seed * 100003 + i))
        results["composite"] = max(
            results["composite"], check_composite(seed * 100003 + i)
        )
        if verbose:
            print(f"gradcheck case {i + 1}/{cases}: worst so far {results}")
    results["passed"] = all(results[k] <= REL_TOL for k in ("decoder", "grid", "composite"))
    return results
