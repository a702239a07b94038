"""RetSeg: U-shaped binary segmentation with a 2-D multi-head retention bottleneck.

Everything runs on a small float64 tensor engine with reverse-mode
differentiation (:mod:`retseg.tensor`). Convolution, upsampling and decay-mask
kernels come from a compiled extension when it is built and from numpy
otherwise; see :mod:`retseg.kernels`.
"""
from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    BlobParams,
    DatasetManifest,
    Sample,
    batch_iterator,
    generate_synthetic_dataset,
    load_image,
    load_mask,
    scan_dataset,
    split_dataset,
    split_samples,
    write_mask_png,
)
from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    DecodeError,
    ParameterError,
    RetSegError,
    ShapeError,
    UsageError,
)
from .losses import (
    LossConfig,
    MetricsRecord,
    bce_loss,
    compute_metrics,
    dice_loss,
    focal_loss,
    l1_recon_loss,
    measure_fps,
    total_loss,
)
from .model import RetSegConfig, RetSegModel, RetSegParams, init_params, param_count, retseg_forward, tiny_config
from .retention import (
    build_decay_mask,
    multi_head_retention,
    patchify,
    retention_block,
    retention_parallel,
    retention_recurrent_oracle,
    unpatchify,
)
from .tensor import Tape, Tensor, backward, grad_check
from .train import TrainConfig, evaluate, load_train_config, parse_train_config, train

__version__ = "0.1.0"
