"""Architecture descriptors for the toy ViT and the toy residual CNN."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    hidden_dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_dim: int = 128
    num_classes: int = 8
    channels: int = 3
    dropout_rate: float = 0.0
    head_type: str = "linear"
    head_hidden: int = 64
    ln_eps: float = 1e-6

    kind = "vit"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} is not a multiple of patch size {self.patch_size}")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden dim {self.hidden_dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.head_type not in ("linear", "mlp"):
            raise ValueError(f"head_type must be 'linear' or 'mlp', got {self.head_type!r}")
        if self.depth < 0 or self.num_classes < 2:
            raise ValueError("depth must be >= 0 and num_classes >= 2")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class CNNConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    num_classes: int = 8
    groups: int = 4
    image_size: int = 32
    channels: int = 3
    kernel_size: int = 3
    gn_eps: float = 1e-5

    kind = "cnn"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("need at least one stage")
        for w in self.widths:
            if w % self.groups:
                raise ValueError(f"width {w} not divisible by {self.groups} groups")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def feature_size(self) -> int:
        size = self.image_size
        for _ in self.widths[1:]:
            size = (size + 2 - 3) // 2 + 1
        return size


ModelConfig = ViTConfig | CNNConfig


def config_to_items(config: ModelConfig) -> dict[str, str]:
    """Flat string key/values, ``kind`` first."""
    items = {"kind": config.kind}
    for key, value in asdict(config).items():
        items[key] = ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
    return items


def config_from_items(items: dict[str, str]) -> ModelConfig:
    kind = items.get("kind")
    cls = {"vit": ViTConfig, "cnn": CNNConfig}.get(kind)
    if cls is None:
        raise ValueError(f"unknown model kind {kind!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in items:
            continue
        raw = items[f.name]
        default = f.default
        if isinstance(default, tuple):
            kwargs[f.name] = tuple(int(v) for v in raw.split(",") if v)
        elif isinstance(default, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        elif isinstance(default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return cls(**kwargs)
