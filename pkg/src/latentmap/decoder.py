"""Scene-agnostic feed-forward decoder from latent features to target space.

A plain MLP with rectifier hidden activations and a linear output layer,
with forward and hand-derived reverse-mode passes. The output is left
unnormalized; the reconstruction loss is scale-invariant. The rectifier
subgradient at exactly 0 is taken as 0.
"""

from __future__ import annotations

import numpy as np

from ._workspace import scratch
from .errors import ValidationError


class MlpDecoder:
    """Layered (weight, bias) pairs; weights stored as (in_dim, out_dim)."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValidationError("decoder needs matching, non-empty weight/bias lists")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValidationError(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i > 0 and w.shape[0] != weights[i - 1].shape[1]:
                raise ValidationError(
                    f"layer {i} input {w.shape[0]} != layer {i-1} output "
                    f"{weights[i-1].shape[1]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValidationError(f"layer {i} has non-finite parameters")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list [W0, b0, W1, b1, ...] for the optimizer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpDecoder":
        return MlpDecoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    # ── forward ──────────────────────────────────────────────────────────

    def forward_batch(self, x: np.ndarray, workspace: dict | None = None):
        """Forward over (n, in_dim); returns outputs and the activation cache
        needed for the backward pass.

        ``workspace`` reuses the layer buffers between calls; only safe for a
        single exclusive caller (the training loop). Without it every call
        allocates fresh arrays and stays safe for concurrent readers.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValidationError(f"expected (n, {self.in_dim}) input, got {x.shape}")
        n = x.shape[0]
        activations = [x]  # input to each layer
        masks = []  # rectifier pass-through masks; strict >0 so the kink passes 0
        h = x
        last = self.num_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = scratch(workspace, ("z", i), (n, w.shape[1]))
            np.matmul(h, w, out=z)
            z += b
            if i == last:
                h = z
            else:
                mask = scratch(workspace, ("mask", i), z.shape, bool)
                np.greater(z, 0.0, out=mask)
                masks.append(mask)
                np.maximum(z, 0.0, out=z)  # clamped z doubles as the activation
                h = z
                activations.append(h)
        return h, {"activations": activations, "masks": masks, "out_shape": h.shape}

    def decode(self, f) -> np.ndarray:
        """Predicted target embedding for one latent vector (unnormalized)."""
        f = np.asarray(f, dtype=np.float64).reshape(-1)
        if f.shape[0] != self.in_dim:
            raise ValidationError(f"expected length-{self.in_dim} input, got {f.shape[0]}")
        y, _ = self.forward_batch(f[None, :])
        return y[0]

    def decode_batch(self, fs: np.ndarray) -> np.ndarray:
        y, _ = self.forward_batch(fs)
        return y

    # ── backward ─────────────────────────────────────────────────────────

    def backward_batch(self, cache, upstream: np.ndarray, need_param_grads: bool = True,
                       workspace: dict | None = None):
        """Reverse-mode gradients given a forward cache.

        Returns ([dW0, db0, dW1, db1, ...], d_input) summed over the batch
        for parameters and per-row for the input. Frozen-parameter callers
        pass ``need_param_grads=False`` to skip the weight-gradient products.
        """
        if not cache or "masks" not in cache:
            raise ValidationError("backward requires the forward activation cache")
        acts, masks = cache["activations"], cache["masks"]
        dz = np.asarray(upstream, dtype=np.float64)
        if dz.shape != cache["out_shape"]:
            raise ValidationError(
                f"upstream shape {dz.shape} does not match output {cache['out_shape']}"
            )
        n = dz.shape[0]
        param_grads: list = [None] * (2 * self.num_layers)
        for i in range(self.num_layers - 1, -1, -1):
            if need_param_grads:
                param_grads[2 * i] = acts[i].T @ dz
                param_grads[2 * i + 1] = dz.sum(axis=0)
            da = scratch(workspace, ("da", i), (n, self.weights[i].shape[0]))
            np.matmul(dz, self.weights[i].T, out=da)
            if i > 0:
                da *= masks[i - 1]
                dz = da
        return param_grads, da

    def decode_backward(self, cache, upstream):
        """Single-vector convenience wrapper around :meth:`backward_batch`."""
        upstream = np.asarray(upstream, dtype=np.float64).reshape(1, -1)
        grads, dx = self.backward_batch(cache, upstream)
        return grads, dx[0]


def init_decoder(seed: int, hidden_dims, in_dim: int, out_dim: int) -> MlpDecoder:
    """He-scaled random weights, zero biases, deterministic per seed."""
    dims = [int(in_dim)] + [int(h) for h in hidden_dims] + [int(out_dim)]
    if any(d <= 0 for d in dims):
        raise ValidationError(f"all dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpDecoder(weights, biases)
