"""Fourier-basis sensitivity, orthonormal DCT energy spectra and
frequency-domain image splits.

Transforms are dense matrix products (O(N^2) per row or column), which is
ample at 32x32 and keeps the module free of FFT dependencies.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledDataset

# ---------------------------------------------------------------------------
# transforms


@functools.lru_cache(maxsize=32)
def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    m = np.exp(-2j * np.pi * np.outer(k, k) / n)
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=32)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``X = C x``."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    m.setflags(write=False)
    return m


def dft2(x) -> np.ndarray:
    """Unnormalised 2-D DFT over the last two axes."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    return dft_matrix(h) @ x @ dft_matrix(w).T


def idft2(spectrum) -> np.ndarray:
    s = np.asarray(spectrum)
    h, w = s.shape[-2:]
    return np.conj(dft_matrix(h)) @ s @ np.conj(dft_matrix(w)).T / (h * w)


def dct2(x) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    return dct_matrix(h) @ x @ dct_matrix(w).T


def idct2(coeffs) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    h, w = c.shape[-2:]
    return dct_matrix(h).T @ c @ dct_matrix(w)


def centered_frequencies(n: int) -> np.ndarray:
    """Signed frequency of each DFT index: 0, 1, ..., -2, -1."""
    k = np.arange(n)
    return np.where(k < (n + 1) // 2, k, k - n)


def center_shift(grid) -> np.ndarray:
    """Move the zero frequency to the middle of the grid (display convention)."""
    g = np.asarray(grid)
    return np.roll(g, (g.shape[-2] // 2, g.shape[-1] // 2), axis=(-2, -1))


# ---------------------------------------------------------------------------
# Fourier basis


@dataclass(frozen=True)
class FourierBasis:
    i: int
    j: int
    matrix: np.ndarray


def fourier_basis(i: int, j: int, h: int, w: int) -> FourierBasis:
    """Real unit-Frobenius-norm image whose DFT is supported on (i, j) and (-i, -j)."""
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"frequency index ({i}, {j}) outside {h}x{w}")
    spectrum = np.zeros((h, w), dtype=complex)
    spectrum[i, j] = 1.0
    spectrum[(-i) % h, (-j) % w] = 1.0
    u = idft2(spectrum).real
    u = u / np.linalg.norm(u)
    u.setflags(write=False)
    return FourierBasis(i, j, u)


def canonical_index(i: int, j: int, h: int, w: int) -> tuple[int, int]:
    """Representative of the conjugate pair {(i, j), (-i, -j)}."""
    return min((i, j), ((-i) % h, (-j) % w))


# ---------------------------------------------------------------------------
# heatmaps


@dataclass
class HeatmapGrid:
    """Scalar statistic per 2-D index, stored in natural DFT order.

    ``center_shift`` records that displays should move the zero frequency
    to the centre.
    """

    values: np.ndarray
    label: str = "error_rate"
    center_shift: bool = True

    def display(self) -> np.ndarray:
        return center_shift(self.values) if self.center_shift else np.asarray(self.values)


def _sign_pattern(seed: int, i: int, j: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), i, j]))
    return rng.choice([-1.0, 1.0], size=channels)


def fourier_sensitivity(
    model,
    dataset: LabeledDataset,
    epsilon: float = 0.1,
    seed: int = 0,
    workers: int = 1,
    batch_size: int = 256,
) -> HeatmapGrid:
    """Top-1 error rate of ``model`` under each Fourier-basis perturbation.

    Image ``x`` becomes ``clip(x + r * epsilon * U_ij)`` with ``r`` a random
    sign per channel drawn from ``(seed, i, j)``. Only one index of each
    conjugate pair is evaluated; its partner gets the mirrored value.
    """
    if len(dataset) == 0:
        raise ValueError("fourier_sensitivity needs a non-empty dataset")
    predict = _predictor(model, batch_size)
    n, c, h, w = dataset.images.shape
    reps = sorted({canonical_index(i, j, h, w) for i in range(h) for j in range(w)})

    def error_at(index):
        i, j = index
        u = fourier_basis(i, j, h, w).matrix
        signs = _sign_pattern(seed, i, j, c)
        pert = epsilon * signs[:, None, None] * u[None]
        x = np.clip(dataset.images + pert[None], -1.0, 1.0)
        return float(np.mean(predict(x) != dataset.labels))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            errors = list(pool.map(error_at, reps))
    else:
        errors = [error_at(r) for r in reps]
    grid = np.zeros((h, w))
    for (i, j), e in zip(reps, errors):
        grid[i, j] = e
        grid[(-i) % h, (-j) % w] = e
    return HeatmapGrid(grid, "error_rate", center_shift=True)


def _predictor(model, batch_size: int):
    ckpt = getattr(model, "checkpoint_", model)
    if hasattr(ckpt, "predict_logits"):
        return lambda x: np.argmax(ckpt.predict_logits(x, batch_size), axis=1)
    if callable(model):
        return lambda x: np.asarray(model(x))
    raise TypeError(f"cannot evaluate object of type {type(model).__name__}")


def nearest_rank_percentile(values, p: float) -> float:
    if not 0 <= p <= 100:
        raise ValueError(f"percentile {p} outside [0, 100]")
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty grid")
    rank = max(1, math.ceil(p / 100 * v.size))
    return float(v[rank - 1])


def heatmap_percentiles(grid, ps=(10, 25, 50, 90, 95)) -> list[float]:
    """Nearest-rank percentiles over all grid entries."""
    values = grid.values if isinstance(grid, HeatmapGrid) else grid
    for p in ps:
        if not 0 <= p <= 100:
            raise ValueError(f"percentile {p} outside [0, 100]")
    return [nearest_rank_percentile(values, p) for p in ps]


# ---------------------------------------------------------------------------
# DCT energy spectrum


@dataclass
class EnergySpectrum:
    """Mean squared orthonormal DCT coefficients of a set of perturbations.

    ``energy`` is averaged over samples and channels, so its total equals
    ``mean_squared_norm``: the per-channel squared l2 norm averaged the same way.
    """

    energy: np.ndarray
    high_frequency_fraction: float
    centroid_radius: float
    mean_squared_norm: float
    count: int

    def grid(self) -> HeatmapGrid:
        return HeatmapGrid(self.energy, "dct_energy", center_shift=False)


def frequency_radius(h: int, w: int) -> np.ndarray:
    u = np.arange(h)[:, None]
    v = np.arange(w)[None, :]
    return np.sqrt(u * u + v * v)


def high_frequency_region(h: int, w: int) -> np.ndarray:
    return frequency_radius(h, w) > min(h, w) / 4


def perturbation_energy_spectrum(perturbations) -> EnergySpectrum:
    deltas = [np.asarray(d, dtype=np.float64) for d in perturbations]
    if not deltas:
        raise ValueError("need at least one perturbation")
    shape = deltas[0].shape
    if any(d.shape != shape for d in deltas):
        raise ValueError("perturbations must share one shape")
    stack = np.stack(deltas)
    if stack.ndim == 3:
        stack = stack[:, None]
    h, w = stack.shape[-2:]
    coeffs = dct2(stack)
    energy = (coeffs**2).mean(axis=(0, 1))
    total = float(energy.sum())
    mean_sq = float((stack**2).sum(axis=(2, 3)).mean())
    if total > 0:
        hf = float(energy[high_frequency_region(h, w)].sum() / total)
        centroid = float((energy * frequency_radius(h, w)).sum() / total)
    else:
        hf = centroid = 0.0
    return EnergySpectrum(energy, hf, centroid, mean_sq, len(deltas))


# ---------------------------------------------------------------------------
# frequency split


@dataclass
class FrequencySplit:
    low: np.ndarray
    high: np.ndarray
    log_magnitude: HeatmapGrid


def frequency_split(image, radius: float) -> FrequencySplit:
    """Ideal low/high split of an image in the DFT domain.

    A frequency counts as low when ``max(|u|, |v|) <= radius`` for signed
    frequencies ``u, v`` (a centred square), so ``radius >= N/2`` keeps
    everything and ``radius = 0`` keeps only the mean.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    x = np.asarray(image, dtype=np.float64)
    h, w = x.shape[-2:]
    spectrum = dft2(x)
    fu = np.abs(centered_frequencies(h))[:, None]
    fv = np.abs(centered_frequencies(w))[None, :]
    mask = (np.maximum(fu, fv) <= radius).astype(np.float64)
    low = idft2(spectrum * mask).real
    high = idft2(spectrum * (1.0 - mask)).real
    mag = np.log1p(np.abs(spectrum))
    if mag.ndim == 3:
        mag = mag.mean(axis=0)
    return FrequencySplit(low, high, HeatmapGrid(mag, "log_magnitude", center_shift=True))


# ---------------------------------------------------------------------------
# export


def write_grid_csv(grid: HeatmapGrid, path) -> Path:
    """Row-major CSV; the first line is the statistic label."""
    path = Path(path)
    rows = [grid.label] + [",".join(repr(float(v)) for v in row) for row in np.asarray(grid.values)]
    path.write_text("\n".join(rows) + "\n")
    return path


def read_grid_csv(path) -> HeatmapGrid:
    lines = Path(path).read_text().splitlines()
    values = np.array([[float(v) for v in line.split(",")] for line in lines[1:] if line])
    return HeatmapGrid(values, lines[0])


def to_pgm_bytes(values) -> bytes:
    """8-bit binary PGM, min-max scaled (constant grids map to 0)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros(v.shape) if hi == lo else (v - lo) / (hi - lo) * 255.0
    pixels = np.round(scaled).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_grid_pgm(grid: HeatmapGrid, path) -> Path:
    path = Path(path)
    path.write_bytes(to_pgm_bytes(grid.display()))
    return path
