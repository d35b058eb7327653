"""Model checkpoints and their self-describing binary file format.

Layout (all integers little-endian)::

    b"ROBUSTLENS-CKPT\\n"              16-byte magic
    u32  format version
    u32  n, then n bytes of UTF-8 ``key=value`` lines (config, then meta.*)
    u32  parameter count
    per parameter, in manifest order:
        u16 name length, name, u8 ndim, ndim x u32 extents, <f8 values
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .. import tensor as T
from .cnn import check_cnn_input, cnn_logits, cnn_manifest
from .config import CNNConfig, ModelConfig, ViTConfig, config_from_items, config_to_items
from .vit import check_vit_input, vit_logits, vit_manifest

MAGIC = b"ROBUSTLENS-CKPT\n"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    return vit_manifest(config) if isinstance(config, ViTConfig) else cnn_manifest(config)


def _freeze(array) -> np.ndarray:
    a = np.array(array, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    """Architecture config, parameters in manifest order, and training metadata.

    Parameter arrays are read-only so a checkpoint can be shared between
    concurrent inference workers.
    """

    config: ModelConfig
    params: Mapping[str, np.ndarray]
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        expected = manifest(self.config)
        names = [n for n, _ in expected]
        if sorted(self.params) != sorted(names):
            missing = sorted(set(names) - set(self.params))
            extra = sorted(set(self.params) - set(names))
            raise ValueError(f"parameters do not match manifest: missing {missing}, unexpected {extra}")
        ordered = {}
        for name, shape in expected:
            arr = np.asarray(self.params[name])
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, manifest says {shape}")
            ordered[name] = _freeze(arr)
        object.__setattr__(self, "params", ordered)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def kind(self) -> str:
        return self.config.kind

    def check_input(self, shape) -> None:
        if isinstance(self.config, ViTConfig):
            check_vit_input(self.config, shape)
        else:
            check_cnn_input(self.config, shape)

    def forward(self, x: T.Tensor, params: Mapping | None = None, rng=None) -> T.Tensor:
        """Differentiable logits for a (N, C, H, W) tensor."""
        self.check_input(x.shape)
        p = self.params if params is None else params
        if isinstance(self.config, ViTConfig):
            return vit_logits(p, self.config, x, rng)
        return cnn_logits(p, self.config, x, rng)

    def predict_logits(self, images, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        self.check_input(x.shape)
        if not np.all(np.isfinite(x)):
            raise ValueError("input contains non-finite values")
        chunks = []
        with T.no_grad():
            for start in range(0, x.shape[0], batch_size):
                chunks.append(self.forward(T.Tensor(x[start : start + batch_size])).data)
        out = np.concatenate(chunks) if chunks else np.zeros((0, self.config.num_classes))
        return out[0] if single else out

    # -- serialisation -------------------------------------------------

    def to_bytes(self) -> bytes:
        items = config_to_items(self.config)
        items.update({f"meta.{k}": repr(v) if isinstance(v, float) else str(v) for k, v in self.metadata.items()})
        for key, value in items.items():
            if "\n" in key or "=" in key or "\n" in value:
                raise ValueError(f"unserialisable config entry {key!r}")
        text = "".join(f"{k}={v}\n" for k, v in items.items()).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        buf.write(struct.pack("<I", len(text)))
        buf.write(text)
        buf.write(struct.pack("<I", len(self.params)))
        for name, arr in self.params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> ModelCheckpoint:
        view = memoryview(blob)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointFormatError("truncated checkpoint")
            chunk = view[pos : pos + n]
            pos += n
            return chunk

        if bytes(take(len(MAGIC))) != MAGIC:
            raise CheckpointFormatError("not a robustlens checkpoint (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (text_len,) = struct.unpack("<I", take(4))
        items = {}
        for line in bytes(take(text_len)).decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            items[key] = value
        config = config_from_items({k: v for k, v in items.items() if not k.startswith("meta.")})
        metadata = {k[5:]: _parse_meta(v) for k, v in items.items() if k.startswith("meta.")}
        (count,) = struct.unpack("<I", take(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = bytes(take(name_len)).decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape)
        if pos != len(view):
            raise CheckpointFormatError("trailing bytes after parameter blobs")
        return cls(config, params, metadata)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> ModelCheckpoint:
        return cls.from_bytes(Path(path).read_bytes())


def _parse_meta(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def param_arrays_equal(a: ModelCheckpoint, b: ModelCheckpoint) -> bool:
    return a.config == b.config and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


__all__ = ["ModelCheckpoint", "CheckpointFormatError", "manifest", "param_arrays_equal", "CNNConfig", "ViTConfig"]
