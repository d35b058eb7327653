"""Toy residual CNN with group normalisation (a miniature BiT-style baseline)."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .. import tensor as T
from .config import CNNConfig
from .vit import trunc_normal


def cnn_manifest(cfg: CNNConfig) -> list[tuple[str, tuple[int, ...]]]:
    k = cfg.kernel_size
    out: list[tuple[str, tuple[int, ...]]] = []

    def conv_norm(prefix, c_in, c_out, size):
        out.extend(
            [
                (prefix + "conv.weight", (c_out, c_in, size, size)),
                (prefix + "conv.bias", (c_out,)),
                (prefix + "norm.gain", (c_out,)),
                (prefix + "norm.bias", (c_out,)),
            ]
        )

    conv_norm("stem.", cfg.channels, cfg.widths[0], 3)
    prev = cfg.widths[0]
    for s, width in enumerate(cfg.widths):
        if s > 0:
            conv_norm(f"stages.{s}.down.", prev, width, 3)
        for b in range(cfg.blocks_per_stage):
            conv_norm(f"stages.{s}.blocks.{b}.", width, width, k)
        prev = width
    out += [("head.weight", (prev, cfg.num_classes)), ("head.bias", (cfg.num_classes,))]
    return out


def init_cnn_params(cfg: CNNConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in cnn_manifest(cfg):
        if name.endswith("conv.weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = trunc_normal(rng, shape, std=math.sqrt(2.0 / fan_in))
        elif name == "head.weight":
            params[name] = trunc_normal(rng, shape)
        elif name.endswith("gain"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def _conv_norm_relu(x, params, prefix, cfg, stride):
    pad = params[prefix + "conv.weight"].shape[-1] // 2
    h = T.conv2d(x, params[prefix + "conv.weight"], params[prefix + "conv.bias"], stride=stride, padding=pad)
    h = T.group_norm(h, cfg.groups, params[prefix + "norm.gain"], params[prefix + "norm.bias"], cfg.gn_eps)
    return T.relu(h)


def residual_sum(x, params: Mapping, prefix: str) -> T.Tensor:
    """``x + conv(x)``: the pre-normalisation residual of one block."""
    weight = params[prefix + "conv.weight"]
    pad = weight.shape[-1] // 2
    return x + T.conv2d(x, weight, params[prefix + "conv.bias"], stride=1, padding=pad)


def residual_block(x, params: Mapping, prefix: str, cfg: CNNConfig) -> T.Tensor:
    h = residual_sum(x, params, prefix)
    h = T.group_norm(h, cfg.groups, params[prefix + "norm.gain"], params[prefix + "norm.bias"], cfg.gn_eps)
    return T.relu(h)


def cnn_features(params: Mapping, cfg: CNNConfig, x: T.Tensor) -> T.Tensor:
    """Output of the last convolutional block, (N, C_last, h, w)."""
    h = _conv_norm_relu(x, params, "stem.", cfg, stride=1)
    for s in range(len(cfg.widths)):
        if s > 0:
            h = _conv_norm_relu(h, params, f"stages.{s}.down.", cfg, stride=2)
        for b in range(cfg.blocks_per_stage):
            h = residual_block(h, params, f"stages.{s}.blocks.{b}.", cfg)
    return h


def cnn_head(params: Mapping, features: T.Tensor) -> T.Tensor:
    pooled = T.mean(features, axis=(2, 3))
    return T.matmul(pooled, params["head.weight"]) + params["head.bias"]


def cnn_logits(params: Mapping, cfg: CNNConfig, x: T.Tensor, rng=None) -> T.Tensor:
    return cnn_head(params, cnn_features(params, cfg, x))


def check_cnn_input(cfg: CNNConfig, shape) -> None:
    if tuple(shape[-3:]) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"CNN expects images of shape {(cfg.channels, cfg.image_size, cfg.image_size)}, got {tuple(shape[-3:])}")
