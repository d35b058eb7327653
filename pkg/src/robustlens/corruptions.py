"""Severity-indexed corruptions, perturbation sequences, Cutout masking,
background composition and the synthetic shapes dataset.

Every generator is a pure function of its inputs and seed. Images are
(C, H, W) arrays in [-1, 1]; outputs are clamped back into that range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

from . import tensor as T
from .data import LabeledDataset
from .validation import check_image, check_images

CORRUPTIONS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "contrast",
    "brightness",
    "pixelate",
)

# Per-severity parameters in [-1, 1] pixel units. Noise sigmas and
# brightness shifts are the usual [0, 1]-range tables doubled; blur sizes
# are scaled down to 32-pixel images.
SEVERITY_PARAMS: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.16, 0.24, 0.36, 0.52, 0.76),
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),
    "defocus_blur": (1.0, 1.5, 2.0, 2.5, 3.0),
    "motion_blur": (3.0, 5.0, 7.0, 9.0, 11.0),
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),
    "brightness": (0.2, 0.4, 0.6, 0.8, 1.0),
    "pixelate": (0.75, 0.5, 0.375, 0.25, 0.1875),
}

SEQUENCES = ("gaussian_noise_seq", "brightness_seq", "translate_seq", "rotate_seq", "scale_seq")
NOISE_SEQUENCES = frozenset({"gaussian_noise_seq"})

# per-frame increments: noise sigma, brightness shift, pixels, degrees, scale
SEQUENCE_STEPS = {
    "gaussian_noise_seq": 0.02,
    "brightness_seq": 0.05,
    "translate_seq": 1.0,
    "rotate_seq": 3.0,
    "scale_seq": 0.03,
}


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption kind at one severity.

    ``param`` overrides the severity table (e.g. ``brightness`` with shift 0).
    """

    kind: str
    severity: int = 1
    seed: int = 0
    param: float | None = None

    def __post_init__(self):
        if self.kind not in SEVERITY_PARAMS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTIONS}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def value(self) -> float:
        return float(self.param) if self.param is not None else SEVERITY_PARAMS[self.kind][int(self.severity) - 1]


def distortion_strength(spec: CorruptionSpec) -> float:
    """Scalar that grows with how strongly ``spec`` distorts an image."""
    v = spec.value
    if spec.kind == "shot_noise":
        return 1.0 / v
    if spec.kind in ("contrast", "pixelate"):
        return 1.0 - v
    return v


def _rng(seed, *salt) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(s) for s in salt]]))


def _filter(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(image, ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw)), mode="edge")
    win = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    return np.tensordot(win, kernel, axes=([3, 4], [0, 1]))


def disk_kernel(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (xx**2 + yy**2 <= radius**2).astype(np.float64)
    return k / k.sum()


def motion_kernel(length: float, angle: float) -> np.ndarray:
    n = int(length)
    half = n // 2
    k = np.zeros((2 * half + 1, 2 * half + 1))
    for t in np.linspace(-(n - 1) / 2, (n - 1) / 2, n):
        x = half + t * math.cos(angle)
        y = half + t * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yi, xi = min(y0 + dy, 2 * half), min(x0 + dx, 2 * half)
                k[yi, xi] += wy * wx
    return k / k.sum()


def _pixelate(image: np.ndarray, factor: float) -> np.ndarray:
    _, h, w = image.shape
    out = np.empty_like(image)
    mh, mw = max(1, round(h * factor)), max(1, round(w * factor))
    rows = (np.arange(h) * mh) // h
    cols = (np.arange(w) * mw) // w
    for bi in range(mh):
        rsel = rows == bi
        for bj in range(mw):
            csel = cols == bj
            block = image[:, rsel][:, :, csel]
            out[:, rsel[:, None] & csel[None, :]] = block.mean(axis=(1, 2))[:, None]
    return out


def corrupt(image, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption to a (C, H, W) image; deterministic in (image, spec)."""
    x = check_image(image)
    v = spec.value
    rng = _rng(spec.seed, CORRUPTIONS.index(spec.kind), spec.severity)
    kind = spec.kind
    if kind == "gaussian_noise":
        out = x + rng.normal(0.0, v, x.shape)
    elif kind == "shot_noise":
        unit = (x + 1.0) / 2.0
        out = 2.0 * rng.poisson(unit * v) / v - 1.0
    elif kind == "impulse_noise":
        u = rng.random(x.shape)
        out = x.copy()
        out[u < v / 2] = -1.0
        out[(u >= v / 2) & (u < v)] = 1.0
    elif kind == "defocus_blur":
        out = _filter(x, disk_kernel(v))
    elif kind == "motion_blur":
        out = _filter(x, motion_kernel(v, rng.uniform(-math.pi / 4, math.pi / 4)))
    elif kind == "contrast":
        mu = x.mean(axis=(1, 2), keepdims=True)
        out = (x - mu) * v + mu
    elif kind == "brightness":
        out = x + v
    elif kind == "pixelate":
        out = _pixelate(x, v)
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise ValueError(kind)
    return np.clip(out, -1.0, 1.0)


# ---------------------------------------------------------------------------
# affine helpers and perturbation sequences


def translation_matrix(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]])


def rotation_matrix(degrees: float, h: int, w: int) -> np.ndarray:
    """Rotation about the image centre (pixel-centre coordinates)."""
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    return np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])


def scale_matrix(factor: float, h: int, w: int) -> np.ndarray:
    cx, cy = (w - 1) / 2, (h - 1) / 2
    return np.array([[factor, 0.0, cx * (1 - factor)], [0.0, factor, cy * (1 - factor)]])


@dataclass(frozen=True)
class PerturbationSequence:
    kind: str
    length: int = 10
    seed: int = 0
    step: float | None = None

    def __post_init__(self):
        if self.kind not in SEQUENCE_STEPS:
            raise ValueError(f"unknown perturbation sequence {self.kind!r}; expected one of {SEQUENCES}")
        if self.length < 2:
            raise ValueError(f"sequence length must be >= 2, got {self.length}")

    @property
    def increment(self) -> float:
        return SEQUENCE_STEPS[self.kind] if self.step is None else float(self.step)

    @property
    def is_noise(self) -> bool:
        return self.kind in NOISE_SEQUENCES


def perturb_sequence(image, spec: PerturbationSequence) -> list[np.ndarray]:
    """Frames ``0..length-1``; frame 0 is the input, frame k applies k increments."""
    x = check_image(image)
    _, h, w = x.shape
    step = spec.increment
    rng = _rng(spec.seed, SEQUENCES.index(spec.kind))
    frames = [x.copy()]
    for k in range(1, spec.length):
        if spec.kind == "gaussian_noise_seq":
            frame = x + rng.normal(0.0, 1.0, x.shape) * (k * step)
        elif spec.kind == "brightness_seq":
            frame = x + k * step
        else:
            if spec.kind == "translate_seq":
                m = translation_matrix(k * step, 0.0)
            elif spec.kind == "rotate_seq":
                m = rotation_matrix(k * step, h, w)
            else:
                m = scale_matrix(1.0 + k * step, h, w)
            with T.no_grad():
                frame = T.affine_sample(x, m).data
        frames.append(np.clip(frame, -1.0, 1.0))
    return frames


def sequence_parameters(spec: PerturbationSequence) -> list[float]:
    """Per-frame perturbation magnitude (noise sigma, shift, pixels, degrees or scale)."""
    base = 1.0 if spec.kind == "scale_seq" else 0.0
    return [base + k * spec.increment for k in range(spec.length)]


# ---------------------------------------------------------------------------
# masking


def cutout_side(masking_factor: float, h: int, w: int) -> int:
    return int(round(math.sqrt(masking_factor * h * w)))


def cutout(image, masking_factor: float, seed: int) -> np.ndarray:
    """Zero one random square of area ``round(factor * H * W)`` fully inside the image."""
    if not 0.0 <= masking_factor < 1.0:
        raise ValueError(f"masking factor must lie in [0, 1), got {masking_factor}")
    x = check_image(image)
    _, h, w = x.shape
    side = cutout_side(masking_factor, h, w)
    if side > min(h, w):
        raise ValueError(f"cutout side {side} exceeds image side {min(h, w)}")
    if side == 0:
        return x.copy()
    rng = _rng(seed, 7919)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = x.copy()
    out[:, top : top + side, left : left + side] = 0.0
    return out


# ---------------------------------------------------------------------------
# background composition

VARIANTS = ("original", "mixed_same", "mixed_rand", "only_fg")


@dataclass(frozen=True)
class BackgroundPool:
    images: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: LabeledDataset) -> BackgroundPool:
        if dataset.backgrounds is None:
            raise ValueError("dataset carries no background renders")
        return cls(dataset.backgrounds, dataset.labels)


@dataclass(frozen=True)
class CompositeSpec:
    variant: str
    pool: BackgroundPool | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown composite variant {self.variant!r}")
        if self.variant in ("mixed_same", "mixed_rand") and self.pool is None:
            raise ValueError(f"{self.variant} needs a background pool")


def compose_background(foreground, fg_mask, spec: CompositeSpec, label: int | None = None) -> np.ndarray:
    """``mask * foreground + (1 - mask) * background`` for the requested variant."""
    x = check_image(foreground)
    mask = np.asarray(fg_mask, dtype=np.float64)
    if mask.shape != x.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match image {x.shape[1:]}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    if not mask.any():
        raise ValueError("foreground mask is empty")
    if spec.variant == "original":
        return x.copy()
    if spec.variant == "only_fg":
        background = np.zeros_like(x)
    else:
        pool = spec.pool
        class_rng = _rng(spec.seed, 1)
        index_rng = _rng(spec.seed, 2)
        if spec.variant == "mixed_same":
            if label is None:
                raise ValueError("mixed_same needs the foreground's label")
            target = int(label)
        else:
            classes = np.unique(pool.labels)
            target = int(classes[class_rng.integers(len(classes))])
        candidates = np.flatnonzero(pool.labels == target)
        if candidates.size == 0:
            raise ValueError(f"background pool has no class {target}")
        background = pool.images[candidates[index_rng.integers(candidates.size)]]
    return mask * x + (1.0 - mask) * background


# ---------------------------------------------------------------------------
# synthetic shapes dataset

SHAPES = ("disk", "triangle", "cross", "ring", "square", "diamond")
TEXTURES = ("solid", "stripes", "checker")
_AREA_COEF = {
    "disk": math.pi,
    "square": 4.0,
    "triangle": 2.0,
    "cross": 20.0 / 9.0,
    "ring": 0.75 * math.pi,
    "diamond": 2.0,
}
_PALETTE = np.array(
    [
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.2, 0.4, 0.9],
        [0.9, 0.8, 0.2],
        [0.8, 0.3, 0.8],
        [0.2, 0.8, 0.8],
        [0.9, 0.5, 0.1],
        [0.6, 0.6, 0.6],
    ]
)
MASK_AREA_RANGE = (0.10, 0.60)


def class_layout(classes: int) -> list[tuple[str, str]]:
    """(shape, texture) per class label."""
    n_tex = 2 if classes <= 2 * len(SHAPES) else 3
    if classes > n_tex * len(SHAPES):
        raise ValueError(f"at most {len(SHAPES) * len(TEXTURES)} classes are supported")
    return [(SHAPES[k // n_tex], TEXTURES[k % n_tex]) for k in range(classes)]


def _shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        m = dx**2 + dy**2 <= r**2
    elif shape == "square":
        m = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    elif shape == "triangle":
        m = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    elif shape == "cross":
        arm = r / 3
        m = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    elif shape == "ring":
        d2 = dx**2 + dy**2
        m = (d2 <= r**2) & (d2 >= (r / 2) ** 2)
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= r
    else:
        raise ValueError(shape)
    return m.astype(np.float64)


def _texture(texture: str, color: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dark = color - 1.1
    if texture == "solid":
        pattern = np.ones((size, size), dtype=bool)
    elif texture == "stripes":
        orient = rng.integers(3)
        coord = (yy, xx, xx + yy)[orient]
        pattern = (coord // 2) % 2 == 0
    else:
        pattern = ((yy // 2) + (xx // 2)) % 2 == 0
    return np.where(pattern[None], color[:, None, None], dark[:, None, None])


def _background(label: int, size: int, rng: np.random.Generator, bg_correlation: float) -> np.ndarray:
    if rng.random() < bg_correlation:
        tint = _PALETTE[label % len(_PALETTE)]
    else:
        tint = _PALETTE[rng.integers(len(_PALETTE))]
    base = -0.55 + 0.35 * tint
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((3, size, size))
    for _ in range(3):
        fy, fx = rng.integers(1, 4, 2)
        phase = rng.uniform(0, 2 * math.pi, 3)
        field += np.cos(2 * math.pi * (fy * yy + fx * xx)[None] + phase[:, None, None])
    return base[:, None, None] + 0.08 * field + rng.normal(0.0, 0.04, (3, size, size))


def render_sample(label: int, layout, size: int, rng: np.random.Generator, bg_correlation: float = 0.5):
    """Render one (image, mask, background) triple for ``label``."""
    shape, texture = layout[label]
    background = _background(label, size, rng, bg_correlation)
    lo, hi = MASK_AREA_RANGE
    for _ in range(50):
        area = rng.uniform(0.20, 0.40)
        r = math.sqrt(area * size * size / _AREA_COEF[shape])
        margin = r + 0.5
        if 2 * margin > size - 1:
            continue
        cx = rng.uniform(margin, size - 1 - margin)
        cy = rng.uniform(margin, size - 1 - margin)
        mask = _shape_mask(shape, cx, cy, r, size)
        if lo <= mask.mean() <= hi:
            break
    else:  # pragma: no cover - the area window is wide enough at any size >= 8
        raise RuntimeError("could not place foreground within the area bounds")
    color = rng.uniform(0.35, 1.0, 3)
    color[rng.integers(3)] = 1.0
    fg = _texture(texture, color, size, rng)
    image = np.clip(mask * fg + (1 - mask) * background, -1.0, 1.0)
    return image, mask, np.clip(background, -1.0, 1.0)


def synth_dataset(
    classes: int = 8,
    samples_per_class: int = 100,
    image_size: int = 32,
    seed: int = 0,
    bg_correlation: float = 0.5,
) -> LabeledDataset:
    """Class-balanced shapes-on-texture dataset with exact foreground masks.

    Class ``k`` is a (shape, texture) combination; samples are interleaved by
    class so every prefix is near-balanced.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    layout = class_layout(classes)
    n = classes * samples_per_class
    streams = np.random.SeedSequence(int(seed)).spawn(n)
    images = np.empty((n, 3, image_size, image_size))
    masks = np.empty((n, image_size, image_size))
    bgs = np.empty_like(images)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % classes
        images[i], masks[i], bgs[i] = render_sample(label, layout, image_size, np.random.default_rng(streams[i]), bg_correlation)
        labels[i] = label
    names = tuple(f"synth_{i:05d}" for i in range(n))
    return LabeledDataset(images, labels, masks, bgs, names)


# ---------------------------------------------------------------------------
# estimator-style wrappers


class ImageCorruptor(TransformerMixin, BaseEstimator):
    """Apply one corruption at one severity to a batch of images.

    Each image gets its own noise stream derived from ``random_state`` and
    its position in the batch.
    """

    def __init__(self, kind: str = "gaussian_noise", severity: int = 1, random_state: int = 0):
        self.kind = kind
        self.severity = severity
        self.random_state = random_state

    def fit(self, X, y=None):
        CorruptionSpec(self.kind, self.severity)
        check_images(X)
        return self

    def transform(self, X):
        X = check_images(X)
        return np.stack(
            [corrupt(x, CorruptionSpec(self.kind, self.severity, seed=self.random_state * 1_000_003 + i)) for i, x in enumerate(X)]
        )


class Cutout(TransformerMixin, BaseEstimator):
    """Random-square masking of a batch of images."""

    def __init__(self, masking_factor: float = 0.1, random_state: int = 0):
        self.masking_factor = masking_factor
        self.random_state = random_state

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X):
        X = check_images(X)
        return np.stack([cutout(x, self.masking_factor, self.random_state * 1_000_003 + i) for i, x in enumerate(X)])
