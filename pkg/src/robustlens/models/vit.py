"""Toy Vision Transformer: patch embedding, class token, pre-LN blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .. import tensor as T
from .config import ViTConfig


def vit_manifest(cfg: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in serialisation order."""
    d, m = cfg.hidden_dim, cfg.mlp_dim
    out = [
        ("patch_embed.weight", (cfg.patch_dim, d)),
        ("patch_embed.bias", (d,)),
        ("cls_token", (d,)),
        ("pos_embed", (cfg.num_tokens, d)),
    ]
    for layer in range(cfg.depth):
        p = f"blocks.{layer}."
        out += [
            (p + "ln1.gain", (d,)),
            (p + "ln1.bias", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.bq", (d,)),
            (p + "attn.wk", (d, d)),
            (p + "attn.bk", (d,)),
            (p + "attn.wv", (d, d)),
            (p + "attn.bv", (d,)),
            (p + "attn.wo", (d, d)),
            (p + "attn.bo", (d,)),
            (p + "ln2.gain", (d,)),
            (p + "ln2.bias", (d,)),
            (p + "mlp.w1", (d, m)),
            (p + "mlp.b1", (m,)),
            (p + "mlp.w2", (m, d)),
            (p + "mlp.b2", (d,)),
        ]
    out += [("ln_f.gain", (d,)), ("ln_f.bias", (d,))]
    if cfg.head_type == "mlp":
        out += [
            ("head.w1", (d, cfg.head_hidden)),
            ("head.b1", (cfg.head_hidden,)),
            ("head.weight", (cfg.head_hidden, cfg.num_classes)),
            ("head.bias", (cfg.num_classes,)),
        ]
    else:
        out += [("head.weight", (d, cfg.num_classes)), ("head.bias", (cfg.num_classes,))]
    return out


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_vit_params(cfg: ViTConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in vit_manifest(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name == "cls_token" or leaf.startswith("b") or leaf == "bias":
            params[name] = np.zeros(shape)
        elif leaf == "gain":
            params[name] = np.ones(shape)
        else:
            params[name] = trunc_normal(rng, shape)
    return params


@dataclass
class ForwardTrace:
    """Logits plus, when requested, per-layer attention and final-block tokens.

    ``attention`` is (L, N, heads, T, T) for a batch or (L, heads, T, T) for a
    single image; ``tokens`` are the last block's outputs before the final LN.
    """

    logits: T.Tensor
    attention: np.ndarray | None = None
    tokens: T.Tensor | None = None


def patchify(x: T.Tensor, patch_size: int) -> T.Tensor:
    """(N, C, H, W) -> (N, num_patches, P*P*C), patches in row-major grid order."""
    n, c, h, w = x.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = T.reshape(x, (n, c, g_h, patch_size, g_w, patch_size))
    x = T.transpose(x, (0, 2, 4, 3, 5, 1))
    return T.reshape(x, (n, g_h * g_w, patch_size * patch_size * c))


def embed(params: Mapping, cfg: ViTConfig, x: T.Tensor) -> T.Tensor:
    """Patch projection, prepended class token and position embeddings: (N, T, D)."""
    n = x.shape[0]
    patches = T.matmul(patchify(x, cfg.patch_size), params["patch_embed.weight"]) + params["patch_embed.bias"]
    cls = T.reshape(params["cls_token"], (1, 1, cfg.hidden_dim)) + np.zeros((n, 1, cfg.hidden_dim))
    tokens = T.concat([cls, patches], axis=1)
    return tokens + params["pos_embed"]


def mhsa(x, params: Mapping, heads: int, head_dim: int, prefix: str = "", return_attention: bool = False):
    """Multi-head scaled dot-product self-attention over (N, T, D) or (T, D) tokens.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo`` under ``prefix``.
    """
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    n, t, d = x.shape
    if d != heads * head_dim:
        raise T.DimensionError(f"token width {d} != heads {heads} x head_dim {head_dim}")

    def split(name):
        proj = T.matmul(x, params[prefix + "w" + name]) + params[prefix + "b" + name]
        return T.transpose(T.reshape(proj, (n, t, heads, head_dim)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) / math.sqrt(head_dim)
    attn = T.softmax(scores, axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (n, t, d))
    out = T.matmul(ctx, params[prefix + "wo"]) + params[prefix + "bo"]
    if single:
        out = T.reshape(out, (t, d))
    if return_attention:
        return out, attn.data[0] if single else attn.data
    return out


def block(z: T.Tensor, params: Mapping, cfg: ViTConfig, layer: int, rng=None):
    p = f"blocks.{layer}."
    h = T.layernorm(z, params[p + "ln1.gain"], params[p + "ln1.bias"], cfg.ln_eps)
    return block_tail(z, h, params, cfg, layer, rng)


def block_tail(z: T.Tensor, h: T.Tensor, params: Mapping, cfg: ViTConfig, layer: int, rng=None):
    """Rest of a block given its input ``z`` and the LN1 output ``h``."""
    p = f"blocks.{layer}."
    a, attn = mhsa(h, params, cfg.heads, cfg.head_dim, prefix=p + "attn.", return_attention=True)
    z = z + T.dropout(a, cfg.dropout_rate, rng)
    h = T.layernorm(z, params[p + "ln2.gain"], params[p + "ln2.bias"], cfg.ln_eps)
    h = T.gelu(T.matmul(h, params[p + "mlp.w1"]) + params[p + "mlp.b1"])
    h = T.matmul(T.dropout(h, cfg.dropout_rate, rng), params[p + "mlp.w2"]) + params[p + "mlp.b2"]
    return z + T.dropout(h, cfg.dropout_rate, rng), attn


def encode(params: Mapping, cfg: ViTConfig, tokens: T.Tensor, rng=None):
    """Run the transformer blocks; returns (final tokens, list of attention arrays)."""
    attentions = []
    z = tokens
    for layer in range(cfg.depth):
        z, attn = block(z, params, cfg, layer, rng)
        attentions.append(attn)
    return z, attentions


def classify(params: Mapping, cfg: ViTConfig, tokens: T.Tensor) -> T.Tensor:
    """Final LN on the class token followed by the classification head."""
    cls = tokens[:, 0]
    y = T.layernorm(cls, params["ln_f.gain"], params["ln_f.bias"], cfg.ln_eps)
    if cfg.head_type == "mlp":
        y = T.tanh(T.matmul(y, params["head.w1"]) + params["head.b1"])
    return T.matmul(y, params["head.weight"]) + params["head.bias"]


def vit_logits(params: Mapping, cfg: ViTConfig, x: T.Tensor, rng=None) -> T.Tensor:
    z, _ = encode(params, cfg, embed(params, cfg, x), rng)
    return classify(params, cfg, z)


def check_vit_input(cfg: ViTConfig, shape) -> None:
    if tuple(shape[-3:]) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"ViT expects images of shape {(cfg.channels, cfg.image_size, cfg.image_size)}, got {tuple(shape[-3:])}")


def vit_trace(params: Mapping, cfg: ViTConfig, image, record_attention: bool = False) -> ForwardTrace:
    """Forward a (C, H, W) image or (N, C, H, W) batch."""
    x = image if isinstance(image, T.Tensor) else T.Tensor(image)
    check_vit_input(cfg, x.shape)
    if not np.all(np.isfinite(x.data)):
        raise ValueError("input contains non-finite values")
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    z, attentions = encode(params, cfg, embed(params, cfg, x))
    logits = classify(params, cfg, z)
    if single:
        logits = logits[0]
    if not record_attention:
        return ForwardTrace(logits)
    attention = np.stack(attentions) if attentions else np.zeros((0, x.shape[0], cfg.heads, cfg.num_tokens, cfg.num_tokens))
    if single:
        attention = attention[:, 0]
    return ForwardTrace(logits, attention, z[0] if single else z)
