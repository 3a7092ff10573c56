"""Incremental 3D latent feature mapping.

Fuses posed RGB-D observations carrying dense target embeddings into a
trainable multiresolution latent voxel grid, decodes the grid back to the
embedding space with a small MLP, keeps the map fresh with periodic online
optimization, and distills it into a compact global map token.
"""

from .decoder import MlpDecoder, init_decoder
from .errors import (
    BehindCameraError,
    EmptyMapError,
    FormatError,
    LatentMapError,
    OutOfBoundsError,
    ValidationError,
)
from .grid import GridConfig, GridLevel, LatentGrid
from .ingest import (
    CameraFrame,
    CameraIntrinsics,
    CameraPose,
    Sample,
    SampleBatch,
    back_project,
    concat_batches,
    filter_dynamic,
    forward_project,
)
from .online import OnlineConfig, OnlineMapper, StepReport, replay
from .token import (
    AggregatorWeights,
    MapToken,
    PosEncConfig,
    aggregate,
    decode_occupied,
    init_aggregator,
    map_token,
    positional_encode,
)
from .trainer import (
    AdamState,
    TrainConfig,
    Trainer,
    adam_update,
    cosine_loss,
    fit_scene,
    mean_cosine,
    pretrain_decoder,
    train_step,
)

__version__ = "0.1.0"
