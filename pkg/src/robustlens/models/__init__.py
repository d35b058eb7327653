"""Toy ViT and residual CNN: forward passes, training, counting, checkpoints."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from .checkpoint import CheckpointFormatError, ModelCheckpoint, manifest
from .cnn import cnn_features, cnn_head
from .config import CNNConfig, ViTConfig
from .counting import count_params_flops
from .training import OptimizerSpec, TrainingDivergedError, accuracy, initial_checkpoint, train
from .vit import ForwardTrace, mhsa, vit_trace

__all__ = [
    "CNNConfig",
    "CheckpointFormatError",
    "ForwardTrace",
    "ModelCheckpoint",
    "OptimizerSpec",
    "TrainingDivergedError",
    "ViTConfig",
    "accuracy",
    "cnn_forward",
    "count_params_flops",
    "initial_checkpoint",
    "manifest",
    "mhsa",
    "train",
    "vit_forward",
]


def vit_forward(ckpt: ModelCheckpoint, image, record_attention: bool = False) -> ForwardTrace:
    """Logits (and optionally attention maps) for a (C, H, W) image or a batch."""
    if not isinstance(ckpt.config, ViTConfig):
        raise TypeError("vit_forward needs a ViT checkpoint")
    return vit_trace(ckpt.params, ckpt.config, image, record_attention)


def cnn_forward(ckpt: ModelCheckpoint, image) -> T.Tensor:
    """Logits for a (C, H, W) image or (N, C, H, W) batch."""
    if not isinstance(ckpt.config, CNNConfig):
        raise TypeError("cnn_forward needs a CNN checkpoint")
    x = image if isinstance(image, T.Tensor) else T.Tensor(image)
    ckpt.check_input(x.shape)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("input contains non-finite values")
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    logits = cnn_head(ckpt.params, cnn_features(ckpt.params, ckpt.config, x))
    return logits[0] if single else logits
