"""Optimization of grid features and decoder weights from coordinate/feature pairs.

The objective is the mean cosine reconstruction loss over a batch,
``1 - cos(decode(encode(x)), y)``, minimized with bias-corrected Adam. Grid
features always train; decoder weights train unless frozen. All accumulation
runs in float64 so gradients can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._workspace import scratch
from .decoder import MlpDecoder
from .errors import ValidationError
from .grid import LatentGrid
from .ingest import SampleBatch, concat_batches

# Guard for the cosine denominator; a zero-output decoder must not NaN.
COSINE_DENOM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for per-scene fitting and decoder pre-training."""

    batch_size: int = 4096
    lr_grid: float = 1e-2
    lr_decoder: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    freeze_decoder: bool = False
    seed: int = 0
    loss: str = "cosine"  # "cosine" | "l2"
    target_cosine: float | None = None  # optional early stop on train cosine
    eval_every: int = 250

    def __post_init__(self):
        if self.lr_grid <= 0 or self.lr_decoder <= 0:
            raise ValidationError("learning rates must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValidationError("adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.steps < 1:
            raise ValidationError("batch_size and steps must be >= 1")
        if self.loss not in ("cosine", "l2"):
            raise ValidationError(f"unknown loss {self.loss!r}")


@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_array(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState,
                lr: float, cfg: TrainConfig):
    """One bias-corrected Adam step, applied to ``param`` in place."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValidationError("adam shapes do not match parameter")
    state.t += 1
    state.m *= cfg.beta1
    state.m += (1.0 - cfg.beta1) * grad
    state.v *= cfg.beta2
    state.v += (1.0 - cfg.beta2) * grad * grad
    m_hat = state.m / (1.0 - cfg.beta1 ** state.t)
    v_hat = state.v / (1.0 - cfg.beta2 ** state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


# ── losses ───────────────────────────────────────────────────────────────


def cosine_loss_batch(y_hat: np.ndarray, y: np.ndarray, workspace: dict | None = None):
    """Per-sample ``1 - cos(y_hat, y)`` and its gradient wrt y_hat.

    The cosine denominator is clamped below at COSINE_DENOM_EPS; inside the
    clamp the denominator is constant, so the gradient there is -y / eps.
    """
    s = np.einsum("ij,ij->i", y_hat, y)
    n1 = np.sqrt(np.einsum("ij,ij->i", y_hat, y_hat))
    n2 = np.sqrt(np.einsum("ij,ij->i", y, y))
    raw = n1 * n2
    den = np.maximum(raw, COSINE_DENOM_EPS)
    cos = s / den
    losses = 1.0 - cos
    clamped = raw < COSINE_DENOM_EPS
    n1_sq = np.where(clamped, 1.0, n1 * n1)  # avoid 0/0; branch unused when clamped
    # grad = coef * y_hat - y / den, assembled in place.
    grad = scratch(workspace, "cos_grad", y_hat.shape)
    np.multiply(y_hat, (s / (n1_sq * den))[:, None], out=grad)
    tmp = scratch(workspace, "cos_tmp", y.shape)
    np.divide(y, den[:, None], out=tmp)
    grad -= tmp
    grad[clamped] = -y[clamped] / COSINE_DENOM_EPS
    return losses, grad


def l2_loss_batch(y_hat: np.ndarray, y: np.ndarray, workspace: dict | None = None):
    """Per-sample squared error and its gradient wrt y_hat (ablation path)."""
    diff = scratch(workspace, "l2_grad", y_hat.shape)
    np.subtract(y_hat, y, out=diff)
    losses = np.einsum("ij,ij->i", diff, diff)
    diff *= 2.0
    return losses, diff


def cosine_loss(y_hat, y):
    """Single-pair loss value and analytic gradient."""
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(1, -1)
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    if y_hat.shape != y.shape:
        raise ValidationError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    losses, grad = cosine_loss_batch(y_hat, y)
    return float(losses[0]), grad[0]


_LOSSES = {"cosine": cosine_loss_batch, "l2": l2_loss_batch}


# ── training ─────────────────────────────────────────────────────────────


class Trainer:
    """Owns the optimizer state for one grid and one (possibly shared) decoder."""

    def __init__(self, grid: LatentGrid, decoder: MlpDecoder, cfg: TrainConfig,
                 decoder_states: list[AdamState] | None = None):
        if grid.feature_dim != decoder.in_dim:
            raise ValidationError(
                f"grid encodes {grid.feature_dim} dims but decoder expects {decoder.in_dim}"
            )
        self.grid = grid
        self.decoder = decoder
        self.cfg = cfg
        self.grid_states = [AdamState.for_array(lv.features) for lv in grid.levels]
        self.decoder_states = decoder_states or [
            AdamState.for_array(p) for p in decoder.parameters
        ]
        self._loss_fn = _LOSSES[cfg.loss]
        self._ws: dict = {}  # scratch buffers; this trainer is the exclusive owner

    def train_step(self, batch: SampleBatch) -> float:
        """One forward/backward/update over a batch; returns pre-update mean loss.

        Every sample's cell corners are marked occupied. Decoder parameters
        move only when the config does not freeze them.
        """
        n = len(batch)
        if n == 0:
            raise ValidationError("cannot train on an empty batch")
        if batch.embedding_dim != self.decoder.out_dim:
            raise ValidationError(
                f"batch embeddings have k={batch.embedding_dim}, decoder emits "
                f"{self.decoder.out_dim}"
            )
        self.grid.mark_occupied_batch(batch.xs)

        feats, grid_cache = self.grid.encode_batch(batch.xs, workspace=self._ws)
        y_hat, dec_cache = self.decoder.forward_batch(feats, workspace=self._ws)
        losses, dy = self._loss_fn(y_hat, batch.ys, self._ws)
        mean_loss = float(losses.mean())
        dy /= n  # mean reduction

        param_grads, dfeat = self.decoder.backward_batch(
            dec_cache, dy, need_param_grads=not self.cfg.freeze_decoder,
            workspace=self._ws,
        )
        self.grid.zero_grad()
        self.grid.accumulate_gradient_batch(grid_cache, dfeat, workspace=self._ws)

        for level, state, grad in zip(self.grid.levels, self.grid_states, self.grid.grads):
            adam_update(level.features, grad, state, self.cfg.lr_grid, self.cfg)
        if not self.cfg.freeze_decoder:
            for param, state, grad in zip(
                self.decoder.parameters, self.decoder_states, param_grads
            ):
                adam_update(param, grad, state, self.cfg.lr_decoder, self.cfg)
        return mean_loss


def train_step(grid: LatentGrid, decoder: MlpDecoder, batch: SampleBatch,
               cfg: TrainConfig) -> float:
    """Single step with throwaway optimizer state (first-step Adam semantics)."""
    return Trainer(grid, decoder, cfg).train_step(batch)


def mean_cosine(grid: LatentGrid, decoder: MlpDecoder, batch: SampleBatch) -> float:
    """Mean cosine similarity between decoded and target embeddings."""
    if len(batch) == 0:
        raise ValidationError("cannot evaluate an empty batch")
    feats, _ = grid.encode_batch(batch.xs)
    y_hat = decoder.decode_batch(feats)
    n1 = np.linalg.norm(y_hat, axis=1)
    n2 = np.linalg.norm(batch.ys, axis=1)
    den = np.maximum(n1 * n2, COSINE_DENOM_EPS)
    return float((np.sum(y_hat * batch.ys, axis=1) / den).mean())


def _as_dataset(dataset) -> SampleBatch:
    if isinstance(dataset, SampleBatch):
        return dataset
    return concat_batches(dataset)


def fit_scene(grid: LatentGrid, decoder: MlpDecoder, dataset,
              cfg: TrainConfig) -> np.ndarray:
    """Seeded shuffled mini-batch optimization; returns per-step losses.

    ``dataset`` is a SampleBatch or an iterable of them. Runs ``cfg.steps``
    steps, stopping early once the train-set cosine reaches
    ``cfg.target_cosine`` (checked every ``cfg.eval_every`` steps).
    """
    data = _as_dataset(dataset)
    if len(data) == 0:
        raise ValidationError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    trainer = Trainer(grid, decoder, cfg)
    history: list[float] = []
    step = 0
    while step < cfg.steps:
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            if step >= cfg.steps:
                break
            idx = order[start : start + cfg.batch_size]
            history.append(trainer.train_step(data.subset(idx)))
            step += 1
            if (
                cfg.target_cosine is not None
                and step % cfg.eval_every == 0
                and mean_cosine(grid, decoder, data) >= cfg.target_cosine
            ):
                return np.array(history)
    return np.array(history)


def pretrain_decoder(datasets, grids: list[LatentGrid], decoder: MlpDecoder,
                     cfg: TrainConfig) -> np.ndarray:
    """Jointly train one shared decoder across scenes, one grid per scene.

    Batches interleave round-robin across scenes; each scene keeps its own
    grid optimizer state while the decoder state is shared. Returns per-step
    losses. With a single scene this reduces to fit_scene.
    """
    data = [_as_dataset(d) for d in datasets]
    if len(data) < 1:
        raise ValidationError("need at least one scene")
    if len(data) != len(grids):
        raise ValidationError(f"{len(data)} datasets but {len(grids)} grids")
    ks = {d.embedding_dim for d in data}
    if len(ks) != 1:
        raise ValidationError(f"scenes disagree on embedding dim: {sorted(ks)}")
    if any(len(d) == 0 for d in data):
        raise ValidationError("every scene dataset must be non-empty")

    shared = [AdamState.for_array(p) for p in decoder.parameters]
    trainers = [Trainer(g, decoder, cfg, decoder_states=shared) for g in grids]
    rngs = [np.random.default_rng(cfg.seed + i) for i in range(len(data))]
    orders = [rng.permutation(len(d)) for rng, d in zip(rngs, data)]
    cursors = [0] * len(data)

    history: list[float] = []
    for step in range(cfg.steps):
        s = step % len(data)
        d = data[s]
        if cursors[s] >= len(d):
            orders[s] = rngs[s].permutation(len(d))
            cursors[s] = 0
        idx = orders[s][cursors[s] : cursors[s] + cfg.batch_size]
        cursors[s] += cfg.batch_size
        history.append(trainers[s].train_step(d.subset(idx)))
    return np.array(history)
