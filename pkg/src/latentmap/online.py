"""Periodic online optimization of grid features from streaming frames.

Every T_update environment steps, the current frame (if any, and unless the
robot is grasping) is back-projected into a per-step training set and the
grid features take exactly K_update optimization steps against the frozen
decoder. All other steps leave the map untouched. Dynamic elements are
excluded by the frame's mask during ingestion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import MlpDecoder
from .errors import ValidationError
from .grid import LatentGrid
from .ingest import CameraFrame, back_project
from .trainer import TrainConfig, Trainer


@dataclass(frozen=True)
class OnlineConfig:
    """Cadence and optimizer settings for online map updates."""

    t_update: int = 5
    k_update: int = 20
    eta: float = 1e-2
    freeze_decoder: bool = True
    batch_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.t_update < 1 or self.k_update < 1:
            raise ValidationError("t_update and k_update must be >= 1")
        if self.eta <= 0:
            raise ValidationError("eta must be positive")


@dataclass
class StepReport:
    """What happened at one environment step."""

    tau: int
    updated: bool
    reason: str  # "" when updated; else why the tick was skipped
    num_samples: int = 0
    losses: list[float] = field(default_factory=list)

    @property
    def opt_steps(self) -> int:
        return len(self.losses)


class OnlineMapper:
    """Holds the evolving grid, the (frozen) decoder, and the step counter."""

    def __init__(self, grid: LatentGrid, decoder: MlpDecoder, cfg: OnlineConfig):
        self.grid = grid
        self.decoder = decoder
        self.cfg = cfg
        self.tau = 0
        self.reports: list[StepReport] = []

    def step(self, frame: CameraFrame | None = None, grasping: bool = False) -> StepReport:
        """Advance one environment step; optimize only on update ticks.

        A tick (tau divisible by t_update) runs k_update optimization steps
        on samples from the current frame, unless suspended by grasping or a
        missing/empty frame; the skip reason is recorded either way.
        """
        self.tau += 1
        cfg = self.cfg
        report = StepReport(tau=self.tau, updated=False, reason="")
        if self.tau % cfg.t_update != 0:
            report.reason = "between_updates"
        elif grasping:
            report.reason = "grasping"
        elif frame is None:
            report.reason = "no_frame"
        else:
            batch = back_project(frame, bounds=self.grid.bounds)
            report.num_samples = len(batch)
            if len(batch) == 0:
                report.reason = "no_samples"
            else:
                report.updated = True
                report.losses = self._optimize(batch)
        self.reports.append(report)
        return report

    def _optimize(self, batch) -> list[float]:
        cfg = self.cfg
        train_cfg = TrainConfig(
            batch_size=cfg.batch_size,
            lr_grid=cfg.eta,
            freeze_decoder=cfg.freeze_decoder,
            seed=cfg.seed,
        )
        # Fresh optimizer state per tick: each tick adapts to its own frame.
        trainer = Trainer(self.grid, self.decoder, train_cfg)
        rng = np.random.default_rng((cfg.seed, self.tau))
        losses = []
        for _ in range(cfg.k_update):
            if len(batch) > cfg.batch_size:
                idx = rng.choice(len(batch), size=cfg.batch_size, replace=False)
                step_batch = batch.subset(idx)
            else:
                step_batch = batch
            losses.append(trainer.train_step(step_batch))
        return losses


def replay(grid: LatentGrid, decoder: MlpDecoder, stream,
           cfg: OnlineConfig) -> list[StepReport]:
    """Run the online loop over (frame | None, grasping) pairs.

    The grid and decoder are updated in place; returns the per-step reports.
    An empty stream leaves the map untouched.
    """
    mapper = OnlineMapper(grid, decoder, cfg)
    for frame, grasping in stream:
        mapper.step(frame, grasping)
    return mapper.reports
