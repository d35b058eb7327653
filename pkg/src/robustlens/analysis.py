"""Robustness metrics (accuracy, mCE, mFR, mT5D, AUPR, BG-gap) and
attribution maps (attention rollout, attention distance, Grad-CAM).

Ranking ties are broken toward the lowest class index everywhere.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import average_precision_score

from . import tensor as T
from .data import LabeledDataset
from .models.checkpoint import ModelCheckpoint
from .models.cnn import cnn_features, cnn_head
from .models.config import ViTConfig
from .models.vit import block, block_tail, classify, embed
from .spectral import to_pgm_bytes

# ---------------------------------------------------------------------------
# records and reports


@dataclass(frozen=True)
class PredictionRecord:
    logits: np.ndarray
    confidences: np.ndarray
    topk: np.ndarray
    label: int

    @property
    def top1(self) -> int:
        return int(self.topk[0])

    @property
    def correct(self) -> bool:
        return self.top1 == self.label


def rank_classes(logits) -> np.ndarray:
    """Class indices by descending logit; ties go to the lower index."""
    return np.argsort(-np.asarray(logits), axis=-1, kind="stable")


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def checkpoint_of(model) -> ModelCheckpoint:
    ckpt = getattr(model, "checkpoint_", model)
    if not isinstance(ckpt, ModelCheckpoint):
        raise TypeError(f"expected a model checkpoint or fitted estimator, got {type(model).__name__}")
    return ckpt


def evaluate(model, dataset: LabeledDataset, k: int = 5, batch_size: int = 256) -> list[PredictionRecord]:
    """One record per image, in dataset order."""
    if len(dataset) == 0:
        return []
    ckpt = checkpoint_of(model)
    ckpt.check_input(dataset.images.shape)
    logits = ckpt.predict_logits(dataset.images, batch_size)
    conf = softmax(logits)
    ranks = rank_classes(logits)[:, :k]
    return [PredictionRecord(logits[i], conf[i], ranks[i], int(dataset.labels[i])) for i in range(len(dataset))]


def top1_predictions(model, images, batch_size: int = 256) -> np.ndarray:
    logits = checkpoint_of(model).predict_logits(images, batch_size)
    return rank_classes(logits)[..., 0]


def accuracy_of(records: Sequence[PredictionRecord]) -> float:
    if not records:
        return float("nan")
    return float(np.mean([r.correct for r in records]))


@dataclass
class MetricReport:
    """Headline value plus the breakdown rows it summarises."""

    name: str
    value: float
    breakdown: list[dict] = field(default_factory=list)
    baseline: str | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "baseline": self.baseline, "breakdown": self.breakdown}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(self.breakdown[0]) if self.breakdown else []
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self.breakdown:
            writer.writerow([_fmt(row[c]) for c in cols])
        return buf.getvalue()

    def write(self, directory, stem: str | None = None) -> tuple[Path, Path]:
        directory = Path(directory)
        stem = stem or self.name
        j = directory / f"{stem}.json"
        c = directory / f"{stem}.csv"
        j.write_text(self.to_json() + "\n")
        c.write_text(self.to_csv())
        return j, c


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# corruption metrics


def _error_table(errors: Mapping[str, Sequence[float]]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float64).reshape(-1) for k, v in errors.items()}


def mce(model_errors: Mapping[str, Sequence[float]], baseline_errors: Mapping[str, Sequence[float]], baseline: str = "baseline") -> MetricReport:
    """Mean corruption error, normalised per corruption by a baseline model.

    Tables map corruption name to top-1 error per severity.
    """
    m, b = _error_table(model_errors), _error_table(baseline_errors)
    if set(m) != set(b) or any(m[k].shape != b[k].shape for k in m):
        raise ValueError("model and baseline error tables must cover the same (corruption, severity) cells")
    if not m:
        raise ValueError("empty error table")
    rows = []
    for kind in sorted(m):
        denom = float(b[kind].sum())
        if denom <= 0:
            raise ZeroDivisionError(f"baseline errors for {kind!r} sum to 0; normalisation undefined")
        ce = float(m[kind].sum()) / denom
        rows.append({"corruption": kind, "model_error_sum": float(m[kind].sum()), "baseline_error_sum": denom, "ce": 100.0 * ce})
    value = float(np.mean([r["ce"] for r in rows]))
    return MetricReport("mCE", value, rows, baseline)


def corruption_errors(model, dataset: LabeledDataset, kinds, severities=(1, 2, 3, 4, 5), seed: int = 0) -> dict[str, list[float]]:
    """Top-1 error per (corruption, severity) on ``dataset``."""
    from .corruptions import CorruptionSpec, corrupt

    table: dict[str, list[float]] = {}
    for kind in kinds:
        row = []
        for s in severities:
            x = np.stack([corrupt(img, CorruptionSpec(kind, s, seed=seed * 1_000_003 + i)) for i, img in enumerate(dataset.images)])
            row.append(float(np.mean(top1_predictions(model, x) != dataset.labels)))
        table[kind] = row
    return table


def _check_sequences(sequences) -> list[np.ndarray]:
    seqs = [np.asarray(s) for s in sequences]
    if not seqs:
        raise ValueError("no sequences given")
    for s in seqs:
        if s.shape[0] < 2:
            raise ValueError("each prediction sequence needs at least 2 frames")
    return seqs


def flip_indicators(sequence, noise: bool) -> np.ndarray:
    """Flip indicator for frames 2..n, against frame 1 (noise) or the previous frame."""
    s = np.asarray(sequence)
    if s.shape[0] < 2:
        raise ValueError("each prediction sequence needs at least 2 frames")
    ref = s[:1] if noise else s[:-1]
    return (s[1:] != ref).astype(np.float64)


def flip_rate(prediction_sequences, noise_flag: bool = False, baseline_rate: float | None = None, baseline: str | None = None) -> MetricReport:
    """Flip rate over top-1 prediction sequences, in percent.

    With ``baseline_rate`` (a baseline flip probability) the value becomes
    ``100 * FR / baseline_rate``.
    """
    seqs = _check_sequences(prediction_sequences)
    flips = [flip_indicators(s, noise_flag) for s in seqs]
    fr = float(np.concatenate(flips).mean())
    rows = [{"sequence": i, "flip_rate": float(f.mean()), "pairs": int(f.size)} for i, f in enumerate(flips)]
    if baseline_rate is not None:
        if baseline_rate <= 0:
            raise ZeroDivisionError("baseline flip rate is 0; normalisation undefined")
        return MetricReport("FR", 100.0 * fr / baseline_rate, rows, baseline)
    return MetricReport("FR", 100.0 * fr, rows, baseline)


def mean_flip_rate(by_kind: Mapping[str, Sequence], noise_kinds=(), baseline_by_kind: Mapping[str, Sequence] | None = None, baseline: str | None = None) -> MetricReport:
    """mFR over perturbation kinds; optionally normalised per kind by a baseline."""
    rows = []
    for kind in sorted(by_kind):
        noise = kind in noise_kinds
        fr = flip_rate(by_kind[kind], noise).value / 100.0
        row = {"perturbation": kind, "flip_rate": 100.0 * fr}
        if baseline_by_kind is not None:
            base = flip_rate(baseline_by_kind[kind], noise).value / 100.0
            if base <= 0:
                raise ZeroDivisionError(f"baseline flip rate for {kind!r} is 0; normalisation undefined")
            row["baseline_flip_rate"] = 100.0 * base
            row["normalized"] = 100.0 * fr / base
        rows.append(row)
    key = "normalized" if baseline_by_kind is not None else "flip_rate"
    return MetricReport("mFR", float(np.mean([r[key] for r in rows])), rows, baseline)


TOP5_CAP = 6


def top5_pair_distance(earlier, later) -> int:
    """sum_i |i - rank'(c_i)| over the earlier top-5, absent classes ranked 6."""
    a, b = list(earlier), list(later)
    if len(a) < 5 or len(b) < 5:
        raise ValueError("top-5 distance needs at least 5 ranked classes")
    a, b = a[:5], b[:5]
    pos = {c: r + 1 for r, c in enumerate(b)}
    return int(sum(abs(i + 1 - pos.get(c, TOP5_CAP)) for i, c in enumerate(a)))


def top5_distance(prediction_sequences, baseline_mean: float | None = None, baseline: str | None = None) -> MetricReport:
    """Mean top-5 distance over consecutive frame pairs, scaled by 100.

    Each sequence is an (n_frames, >=5) array of ranked class indices.
    """
    seqs = _check_sequences(prediction_sequences)
    rows = []
    dists = []
    for i, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[1] < 5:
            raise ValueError("top-5 distance needs at least 5 ranked classes per frame")
        d = [top5_pair_distance(s[j - 1], s[j]) for j in range(1, s.shape[0])]
        dists.extend(d)
        rows.append({"sequence": i, "mean_distance": float(np.mean(d)), "pairs": len(d)})
    mean = float(np.mean(dists))
    if baseline_mean is not None:
        if baseline_mean <= 0:
            raise ZeroDivisionError("baseline top-5 distance is 0; normalisation undefined")
        return MetricReport("T5D", 100.0 * mean / baseline_mean, rows, baseline)
    return MetricReport("T5D", 100.0 * mean, rows, baseline)


# ---------------------------------------------------------------------------
# out-of-distribution and background metrics


def anomaly_scores(records: Sequence[PredictionRecord]) -> np.ndarray:
    """1 - max softmax confidence: low confidence reads as anomalous."""
    return np.array([1.0 - float(r.confidences.max()) for r in records])


def aupr(scores, is_anomaly) -> float:
    """Area under the precision-recall curve, anomalies as positives.

    Step interpolation over descending distinct thresholds (tied scores
    enter together).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(is_anomaly).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise ValueError("AUPR needs at least one anomaly and one in-distribution sample")
    return float(average_precision_score(y, s))


def bg_gap_from_accuracies(acc_mixed_same: float, acc_mixed_rand: float) -> float:
    return float(acc_mixed_same) - float(acc_mixed_rand)


def bg_gap(model, composed_datasets: Mapping[str, LabeledDataset]) -> MetricReport:
    """Accuracy (%) per background variant and the mixed_same - mixed_rand gap."""
    for need in ("mixed_same", "mixed_rand"):
        if need not in composed_datasets:
            raise ValueError(f"bg_gap needs a {need!r} dataset")
    sizes = {len(d) for d in composed_datasets.values()}
    if len(sizes) != 1:
        raise ValueError(f"composed datasets differ in size: {sorted(sizes)}")
    rows = []
    acc = {}
    for variant in ("original", "mixed_same", "mixed_rand", "only_fg"):
        if variant not in composed_datasets:
            continue
        ds = composed_datasets[variant]
        correct = top1_predictions(model, ds.images) == ds.labels
        acc[variant] = 100.0 * float(correct.mean())
        rows.append({"variant": variant, "accuracy": acc[variant], "correct": int(correct.sum()), "count": len(ds)})
    gap = bg_gap_from_accuracies(acc["mixed_same"], acc["mixed_rand"])
    return MetricReport("BG-Gap", gap, rows)


# ---------------------------------------------------------------------------
# saliency


@dataclass
class SaliencyMap:
    """Non-negative map scaled so its maximum is 1 (or identically 0)."""

    values: np.ndarray
    method: str
    degenerate: bool = False

    def to_pgm(self) -> bytes:
        return to_pgm_bytes(np.clip(self.values, 0.0, 1.0))

    def write_pgm(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_pgm())
        return path


def max_normalize(m) -> tuple[np.ndarray, bool]:
    m = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
    top = float(m.max()) if m.size else 0.0
    if top <= 0:
        return np.zeros_like(m), True
    return m / top, False


def _single_attention(trace_or_attention) -> np.ndarray:
    att = getattr(trace_or_attention, "attention", trace_or_attention)
    if att is None:
        raise ValueError("forward trace carries no attention; rerun with record_attention=True")
    att = np.asarray(att, dtype=np.float64)
    if att.ndim != 4:
        raise ValueError(f"expected (layers, heads, T, T) attention for one image, got {att.shape}")
    if att.shape[0] == 0:
        raise ValueError("attention trace has no layers")
    return att


def rollout_matrix(attention) -> np.ndarray:
    """R = A_L ... A_1 with A_l = rownorm(0.5 * mean_heads + 0.5 * I)."""
    att = _single_attention(attention)
    t = att.shape[-1]
    r = np.eye(t)
    for layer in att:
        a = 0.5 * layer.mean(axis=0) + 0.5 * np.eye(t)
        a = a / a.sum(axis=-1, keepdims=True)
        r = a @ r
    return r


def attention_rollout(trace) -> SaliencyMap:
    """Class-token row of the rollout matrix over patch tokens, on the patch grid."""
    r = rollout_matrix(trace)
    patches = r[0, 1:]
    g = math.isqrt(patches.size)
    if g * g != patches.size:
        raise ValueError(f"{patches.size} patch tokens do not form a square grid")
    values, degenerate = max_normalize(patches.reshape(g, g))
    return SaliencyMap(values, "rollout", degenerate)


def patch_centers(grid: int, patch_size: float) -> np.ndarray:
    r, c = np.divmod(np.arange(grid * grid), grid)
    return np.stack([(r + 0.5) * patch_size, (c + 0.5) * patch_size], axis=1)


def attention_distance(trace, patch_size: float) -> np.ndarray:
    """Mean attended distance in pixels per (layer, head), class token excluded.

    Batched attention (layers, N, heads, T, T) is averaged over images.
    """
    att = getattr(trace, "attention", trace)
    if att is None:
        raise ValueError("forward trace carries no attention; rerun with record_attention=True")
    att = np.asarray(att, dtype=np.float64)
    if att.ndim == 5:
        return np.mean([attention_distance(att[:, i], patch_size) for i in range(att.shape[1])], axis=0)
    att = _single_attention(att)
    n_patch = att.shape[-1] - 1
    g = math.isqrt(n_patch)
    if g * g != n_patch:
        raise ValueError(f"{n_patch} patch tokens do not form a square grid")
    if n_patch == 1:
        warnings.warn("single-patch model: attention distance is vacuously 0", RuntimeWarning, stacklevel=2)
        return np.zeros(att.shape[:2])
    centers = patch_centers(g, patch_size)
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    a = att[..., 1:, 1:]
    denom = a.sum(axis=-1, keepdims=True)
    a = np.divide(a, denom, out=np.zeros_like(a), where=denom > 0)
    return (a * dist).sum(axis=-1).mean(axis=-1)


def upsample_bilinear(m, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2-D map with edge clamping."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    oh, ow = size

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis(h, oh)
    c0, c1, fc = axis(w, ow)
    rows = m[r0] * (1 - fr)[:, None] + m[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def gradcam_from_activations(activations, gradients, size: tuple[int, int], method: str) -> SaliencyMap:
    """ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean gradient, upsampled and max-normalised."""
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3:
        raise ValueError("activations and gradients must share a (K, h, w) shape")
    if not np.any(g):
        warnings.warn("Grad-CAM gradients are identically zero", RuntimeWarning, stacklevel=3)
        return SaliencyMap(np.zeros(size), method, True)
    alpha = g.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, a, axes=1), 0.0)
    values, degenerate = max_normalize(upsample_bilinear(cam, size))
    return SaliencyMap(values, method, degenerate)


def _cnn_cam_inputs(ckpt, x, target):
    with T.no_grad():
        feats = cnn_features(ckpt.params, ckpt.config, T.Tensor(x[None])).data
    leaf = T.Tensor(feats, requires_grad=True)
    T.backward(cnn_head(ckpt.params, leaf)[0, target])
    return feats[0], leaf.grad[0]


def _vit_cam_inputs(ckpt, x, target):
    cfg: ViTConfig = ckpt.config
    if cfg.depth < 1:
        raise ValueError("ViT Grad-CAM needs at least one transformer block")
    last = cfg.depth - 1
    p = f"blocks.{last}."
    with T.no_grad():
        z = embed(ckpt.params, cfg, T.Tensor(x[None]))
        for layer in range(last):
            z, _ = block(z, ckpt.params, cfg, layer)
        h = T.layernorm(z, ckpt.params[p + "ln1.gain"], ckpt.params[p + "ln1.bias"], cfg.ln_eps)
    leaf = T.Tensor(h.data, requires_grad=True)
    out, _ = block_tail(T.Tensor(z.data), leaf, ckpt.params, cfg, last)
    T.backward(classify(ckpt.params, cfg, out)[0, target])
    g = cfg.grid_size

    def grid(tokens):
        return tokens[0, 1:].reshape(g, g, -1).transpose(2, 0, 1)

    return grid(h.data), grid(leaf.grad)


def gradcam(model, image, target_class: int) -> SaliencyMap:
    """Grad-CAM for ``target_class``, upsampled to the image size.

    CNN: last residual block output. ViT: patch tokens entering the last
    block's attention (its LN1 output).
    """
    ckpt = checkpoint_of(model)
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"gradcam takes one (C, H, W) image, got {x.shape}")
    ckpt.check_input(x.shape)
    if not 0 <= int(target_class) < ckpt.config.num_classes:
        raise ValueError(f"target class {target_class} out of range for {ckpt.config.num_classes} classes")
    if ckpt.kind == "vit":
        acts, grads = _vit_cam_inputs(ckpt, x, int(target_class))
        method = "gradcam_vit"
    else:
        acts, grads = _cnn_cam_inputs(ckpt, x, int(target_class))
        method = "gradcam_cnn"
    return gradcam_from_activations(acts, grads, x.shape[1:], method)


def foreground_mass(saliency: SaliencyMap, mask) -> float:
    """Share of saliency mass inside the foreground mask (0 for an empty map)."""
    m = np.asarray(mask, dtype=np.float64)
    total = float(saliency.values.sum())
    return float((saliency.values * m).sum() / total) if total > 0 else 0.0
