"""Lightweight convolutional autoencoder for low-light enhancement and 2x SR.

The package is self-contained: tensors, the differentiation tape, every
layer, the SSIM/PSNR metrics, and the Adam optimizer are implemented here on
top of plain numpy.  Pillow handles image decode/encode and matplotlib
renders training reports; neither touches the math.
"""

from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .dataio import (
    PAIR_DIRS,
    batch_iter,
    load_paired_dataset,
    load_png,
    make_sr_dataset,
    make_sr_pair,
    save_png,
)
from .metrics import MetricRecord, SSIMConfig, hybrid_loss, mae, mse, psnr, ssim
from .model import (
    TASKS,
    Model,
    ModelConfig,
    ParameterReport,
    build_model,
    enhancement_preset,
    parameter_report,
    sr_preset,
)
from .optim import AdamState, adam_step, init_adam, zero_grads
from .report import render_report
from .tensor import (
    GraphError,
    ShapeError,
    Tape,
    Tensor4,
    backward,
    derived_rng,
    finite_difference_grad,
    make_rng,
)
from .train import EpochLog, SplitStats, TrainConfig, evaluate, train

__all__ = [
    "AdamState",
    "EpochLog",
    "GraphError",
    "MetricRecord",
    "Model",
    "ModelConfig",
    "PAIR_DIRS",
    "ParameterReport",
    "SSIMConfig",
    "ShapeError",
    "SplitStats",
    "TASKS",
    "Tape",
    "Tensor4",
    "TrainConfig",
    "adam_step",
    "backward",
    "batch_iter",
    "build_model",
    "derived_rng",
    "enhancement_preset",
    "evaluate",
    "finite_difference_grad",
    "hybrid_loss",
    "init_adam",
    "load_checkpoint",
    "load_paired_dataset",
    "load_png",
    "mae",
    "make_rng",
    "make_sr_dataset",
    "make_sr_pair",
    "mse",
    "parameter_report",
    "psnr",
    "read_header",
    "render_report",
    "save_checkpoint",
    "save_png",
    "sr_preset",
    "ssim",
    "train",
    "zero_grads",
]

__version__ = "0.1.0"
