"""Dataset ingestion and byte-stable artifact writing."""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from ..corruptions import synth_dataset
from ..data import LabeledDataset
from .config import ConfigError, DatasetSource

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


class DatasetError(ValueError):
    """Unreadable or inconsistent dataset directory."""


def _decode(path: Path) -> np.ndarray:
    """8-bit gray or RGB pixels as (C, H, W) floats in [-1, 1]."""
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise DatasetError(f"{path.name}: unsupported format (PNG, PPM and PGM only)")
    try:
        with Image.open(path) as img:
            fmt = img.format
            if fmt not in ("PNG", "PPM"):
                raise DatasetError(f"{path.name}: decoded as {fmt}, expected PNG/PPM/PGM")
            if fmt == "PNG" and img.info.get("interlace"):
                raise DatasetError(f"{path.name}: interlaced PNG is not supported")
            if img.mode not in ("L", "RGB"):
                raise DatasetError(f"{path.name}: mode {img.mode} unsupported (8-bit gray or RGB only)")
            pixels = np.asarray(img, dtype=np.float64)
    except OSError as exc:
        raise DatasetError(f"{path.name}: unreadable image ({exc})") from None
    if pixels.ndim == 2:
        pixels = pixels[None]
    else:
        pixels = pixels.transpose(2, 0, 1)
    return pixels / 127.5 - 1.0


def _read_labels(directory: Path) -> list[tuple[str, int, str | None]]:
    path = directory / "labels.csv"
    if not path.is_file():
        raise DatasetError(f"{directory} has no labels.csv")
    rows = []
    with path.open(newline="") as fh:
        for n, row in enumerate(csv.reader(fh)):
            row = [c.strip() for c in row]
            if not row or not row[0] or row[0].startswith("#"):
                continue
            if n == 0 and row[0].lower() == "filename":
                continue
            if len(row) < 2:
                raise DatasetError(f"labels.csv line {n + 1}: expected filename,label[,mask_filename]")
            try:
                label = int(row[1])
            except ValueError:
                raise DatasetError(f"labels.csv line {n + 1}: label {row[1]!r} is not an integer") from None
            if label < 0:
                raise DatasetError(f"labels.csv line {n + 1}: negative label {label}")
            rows.append((row[0], label, row[2] if len(row) > 2 and row[2] else None))
    return sorted(rows)


def load_directory(directory, num_classes: int | None = None, channels: int | None = None, require_masks: bool = False) -> LabeledDataset:
    """Images listed in ``labels.csv``, ordered by filename.

    8-bit value ``p`` maps to ``p / 127.5 - 1``. Gray images are replicated
    when ``channels=3`` is requested.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    rows = _read_labels(directory)
    if not rows:
        raise DatasetError(f"{directory}: empty dataset")
    images, labels, masks, names = [], [], [], []
    for name, label, mask_name in rows:
        if num_classes is not None and label >= num_classes:
            raise DatasetError(f"{name}: label {label} out of range for {num_classes} classes")
        img = _decode(directory / name)
        if channels == 3 and img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        if images and img.shape != images[0].shape:
            raise DatasetError(f"{name}: shape {img.shape} differs from {images[0].shape}")
        images.append(img)
        labels.append(label)
        names.append(name)
        if mask_name is not None:
            m = _decode(directory / mask_name)
            if m.shape[0] != 1 or m.shape[1:] != img.shape[1:]:
                raise DatasetError(f"{mask_name}: mask must be a gray image of the same size")
            masks.append((m[0] > -1.0).astype(np.float64))
    if masks and len(masks) != len(images):
        raise DatasetError("masks are given for some images but not all")
    if require_masks and not masks:
        raise DatasetError(f"{directory}: this experiment needs foreground masks (third labels.csv column)")
    return LabeledDataset(np.stack(images), np.array(labels), np.stack(masks) if masks else None, None, tuple(names))


def load_dataset(source: DatasetSource | str | Path, num_classes: int | None = None, channels: int | None = None, require_masks: bool = False) -> LabeledDataset:
    """Directory or synthetic source, optionally subsampled uniformly without replacement."""
    if isinstance(source, (str, Path)):
        source = DatasetSource(str(source))
    if source.synthetic:
        ds = synth_dataset(source.classes, source.samples_per_class, source.image_size, source.seed, source.bg_correlation)
        if num_classes is not None and source.classes > num_classes:
            raise DatasetError(f"synthetic dataset has {source.classes} classes but the model has {num_classes}")
    else:
        ds = load_directory(source.path, num_classes, channels, require_masks)
    if require_masks and ds.masks is None:
        raise DatasetError("this experiment needs foreground masks")
    if source.sample is not None:
        if source.sample < 1:
            raise ConfigError("dataset.sample must be >= 1")
        if source.sample < len(ds):
            ds = ds.sample(source.sample, source.sample_seed)
    return ds


def save_directory(dataset: LabeledDataset, directory) -> Path:
    """Write PNGs (plus mask PNGs when known) and labels.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        name = dataset.names[i] if dataset.names else f"img_{i:05d}"
        stem = Path(name).stem
        pixels = np.round((np.clip(dataset.images[i], -1, 1) + 1) * 127.5).astype(np.uint8)
        img = Image.fromarray(pixels.transpose(1, 2, 0) if pixels.shape[0] == 3 else pixels[0])
        img.save(directory / f"{stem}.png")
        row = f"{stem}.png,{int(dataset.labels[i])}"
        if dataset.masks is not None:
            Image.fromarray((dataset.masks[i] > 0.5).astype(np.uint8) * 255).save(directory / f"{stem}_mask.png")
            row += f",{stem}_mask.png"
        lines.append(row)
    (directory / "labels.csv").write_text("filename,label,mask_filename\n" + "\n".join(lines) + "\n")
    return directory


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(path, header, rows) -> Path:
    """CSV with floats written via repr so values round-trip exactly."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
