"""Exact parameter counts and multiply-accumulate based FLOP counts."""

from __future__ import annotations

import math

from .checkpoint import manifest
from .config import CNNConfig, ModelConfig, ViTConfig


def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def _vit_macs(cfg: ViTConfig) -> int:
    t, d = cfg.num_tokens, cfg.hidden_dim
    macs = cfg.num_patches * cfg.patch_dim * d
    per_block = 3 * t * d * d + 2 * t * t * d + t * d * d + 2 * t * d * cfg.mlp_dim
    macs += cfg.depth * per_block
    if cfg.head_type == "mlp":
        macs += d * cfg.head_hidden + cfg.head_hidden * cfg.num_classes
    else:
        macs += d * cfg.num_classes
    return macs


def _cnn_macs(cfg: CNNConfig) -> int:
    size = cfg.image_size
    macs = size * size * cfg.widths[0] * cfg.channels * 9
    prev = cfg.widths[0]
    for s, width in enumerate(cfg.widths):
        if s > 0:
            size = (size + 2 - 3) // 2 + 1
            macs += size * size * width * prev * 9
        macs += cfg.blocks_per_stage * size * size * width * width * cfg.kernel_size**2
        prev = width
    return macs + prev * cfg.num_classes


def block_params(cfg: ViTConfig) -> int:
    """Parameters in the transformer blocks only."""
    return sum(math.prod(shape) for name, shape in manifest(cfg) if name.startswith("blocks."))


def count_params_flops(config: ModelConfig) -> tuple[int, int]:
    """(parameter count, FLOPs of one single-image forward pass).

    FLOPs are twice the multiply-accumulates of the matmuls and convolutions;
    normalisation, activations, softmax and pooling are not counted.
    """
    params = sum(math.prod(shape) for _, shape in manifest(config))
    macs = _vit_macs(config) if isinstance(config, ViTConfig) else _cnn_macs(config)
    return int(params), int(2 * macs)
