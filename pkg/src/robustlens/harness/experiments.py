"""Experiment orchestration: one function per experiment kind.

Every kind writes plot-ready CSV/PGM files plus ``metrics.json`` into the
output directory; :func:`run` adds ``manifest.json`` with sha256 digests.
All randomness derives from the configured seed and the image index, so
output bytes do not depend on the worker count.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from .. import analysis as A
from ..attacks import AttackSpec, deepfool_batch, pgd_batch
from ..corruptions import (
    CORRUPTIONS,
    NOISE_SEQUENCES,
    SEQUENCES,
    BackgroundPool,
    CompositeSpec,
    CorruptionSpec,
    PerturbationSequence,
    compose_background,
    corrupt,
    cutout,
    perturb_sequence,
)
from ..data import LabeledDataset
from ..models import ModelCheckpoint, count_params_flops, vit_forward
from ..spectral import (
    fourier_sensitivity,
    heatmap_percentiles,
    perturbation_energy_spectrum,
    write_grid_csv,
    write_grid_pgm,
)
from .config import ConfigError, ExperimentConfig
from .io import load_dataset, sha256_file, write_csv

PERCENTILES = (10, 25, 50, 90, 95)
ATTACK_CHUNK = 16

logger = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    """A module error raised inside a named experiment stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunManifest:
    config: dict
    version: str
    duration_seconds: float
    dataset_digest: str
    models: dict
    files: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "version": self.version,
            "duration_seconds": self.duration_seconds,
            "dataset_digest": self.dataset_digest,
            "models": self.models,
            "files": self.files,
        }


class _Context:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.metrics: dict[str, dict] = {}
        self.models: dict[str, ModelCheckpoint] = {}
        for name, path in cfg.models.items():
            self.models[name] = _load_checkpoint(path, f"models.{name}")
        self.baseline: tuple[str, ModelCheckpoint] | None = None
        if cfg.baseline is not None:
            self.baseline = (Path(cfg.baseline).stem, _load_checkpoint(cfg.baseline, "models.baseline"))
        first = next(iter(self.models.values())).config
        for name, ckpt in self.models.items():
            c = ckpt.config
            if (c.channels, c.image_size) != (first.channels, first.image_size):
                raise ConfigError(f"model {name} expects a different input size from the others")
        self.num_classes = min(c.config.num_classes for c in self.models.values())
        self.input_shape = (first.channels, first.image_size, first.image_size)

    def metric(self, model: str, name: str, value: float, higher_is_better: bool | None) -> None:
        self.metrics[f"{model}/{name}"] = {"value": float(value), "higher_is_better": higher_is_better}

    def pmap(self, fn, items):
        items = list(items)
        if self.cfg.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    def chunks(self, n: int) -> list[np.ndarray]:
        # fixed-size blocks: BLAS results can depend on the batch shape, so the
        # split must not follow the worker count
        return [np.arange(i, min(i + ATTACK_CHUNK, n)) for i in range(0, n, ATTACK_CHUNK)]

    def image_seed(self, i: int) -> int:
        return self.cfg.seed * 1_000_003 + int(i)


def _load_checkpoint(path, what: str) -> ModelCheckpoint:
    try:
        return ModelCheckpoint.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{what}: cannot load checkpoint {path}: {exc}") from None


def _accuracy(ckpt: ModelCheckpoint, images, labels) -> float:
    return float(np.mean(A.top1_predictions(ckpt, images) == labels))


def _correct_subset(ctx, ckpt, ds: LabeledDataset, count: int) -> LabeledDataset:
    """First ``count`` images the model classifies correctly, in dataset order."""
    ok = np.flatnonzero(A.top1_predictions(ckpt, ds.images) == ds.labels)
    return ds.subset(ok[:count])


# ---------------------------------------------------------------------------
# kinds


def _masking(ctx: _Context, ds: LabeledDataset) -> None:
    factors = ctx.cfg.list_param("factors", float)
    if not factors:
        raise ConfigError("masking needs at least one factor")
    table = {}
    for f in factors:
        masked = np.stack(ctx.pmap(lambda i: cutout(ds.images[i], f, ctx.image_seed(i)), range(len(ds))))
        for name, ckpt in ctx.models.items():
            acc = 100.0 * _accuracy(ckpt, masked, ds.labels)
            table[f, name] = acc
            ctx.metric(name, f"masking_accuracy@{f}", acc, True)
    names = list(ctx.models)
    write_csv(ctx.out / "masking.csv", ["masking_factor"] + names, [[float(f)] + [table[f, n] for n in names] for f in factors])


def _fourier(ctx: _Context, ds: LabeledDataset) -> None:
    eps = ctx.cfg.float_param("epsilon")
    rows = []
    for name, ckpt in ctx.models.items():
        grid = fourier_sensitivity(ckpt, ds, epsilon=eps, seed=ctx.cfg.seed, workers=ctx.cfg.workers)
        write_grid_csv(grid, ctx.out / f"fourier_{name}.csv")
        write_grid_pgm(grid, ctx.out / f"fourier_{name}.pgm")
        ps = heatmap_percentiles(grid, PERCENTILES)
        rows.append([name] + ps)
        for p, v in zip(PERCENTILES, ps):
            ctx.metric(name, f"fourier_error_P{p}", v, False)
    write_csv(ctx.out / "fourier_percentiles.csv", ["model"] + [f"P{p}" for p in PERCENTILES], rows)


def _dct_spectrum(ctx: _Context, ds: LabeledDataset) -> None:
    count = ctx.cfg.int_param("count")
    kw = dict(
        max_iters=ctx.cfg.int_param("max_iters"),
        overshoot=ctx.cfg.float_param("overshoot"),
        candidates=ctx.cfg.int_param("candidates"),
    )
    rows = []
    for name, ckpt in ctx.models.items():
        sub = _correct_subset(ctx, ckpt, ds, count)
        if len(sub) == 0:
            raise ValueError(f"model {name} classifies no image correctly; nothing to attack")
        parts = ctx.pmap(lambda idx: deepfool_batch(ckpt, sub.images[idx], sub.labels[idx], **kw), ctx.chunks(len(sub)))
        results = [r for part in parts for r in part]
        spectrum = perturbation_energy_spectrum([r.perturbation for r in results])
        grid = spectrum.grid()
        write_grid_csv(grid, ctx.out / f"dct_{name}.csv")
        write_grid_pgm(grid, ctx.out / f"dct_{name}.pgm")
        success = float(np.mean([r.success for r in results]))
        rows.append(
            [
                name,
                spectrum.count,
                success,
                spectrum.high_frequency_fraction,
                spectrum.centroid_radius,
                spectrum.mean_squared_norm,
                float(spectrum.energy.sum()),
            ]
        )
        ctx.metric(name, "deepfool_success_rate", success, None)
        ctx.metric(name, "dct_high_frequency_fraction", spectrum.high_frequency_fraction, None)
        ctx.metric(name, "mean_squared_perturbation_norm", spectrum.mean_squared_norm, True)
    write_csv(
        ctx.out / "dct_summary.csv",
        ["model", "count", "success_rate", "high_frequency_fraction", "centroid_radius", "mean_squared_norm", "energy_total"],
        rows,
    )


def _loss_landscape(ctx: _Context, ds: LabeledDataset) -> None:
    step_size = ctx.cfg.param("step_size").strip()
    spec = AttackSpec(
        ctx.cfg.param("attack"),
        epsilon=ctx.cfg.float_param("epsilon"),
        steps=ctx.cfg.int_param("steps"),
        step_size=float(step_size) if step_size else None,
        learning_rate=ctx.cfg.float_param("learning_rate"),
    )
    if spec.kind not in ("pgd_sign", "pgd_adam", "fgsm"):
        raise ConfigError("loss_landscape attack must be pgd_sign, pgd_adam or fgsm")
    count = ctx.cfg.int_param("count")
    for name, ckpt in ctx.models.items():
        sub = _correct_subset(ctx, ckpt, ds, count)
        if len(sub) == 0:
            raise ValueError(f"model {name} classifies no image correctly; nothing to attack")
        parts = ctx.pmap(lambda idx: pgd_batch(ckpt, sub.images[idx], sub.labels[idx], spec), ctx.chunks(len(sub)))
        results = [r for part in parts for r in part]
        traces = np.stack([r.loss_trace for r in results])
        write_csv(
            ctx.out / f"loss_{name}.csv",
            ["step", "mean_loss", "std_loss"],
            [[s, float(traces[:, s].mean()), float(traces[:, s].std())] for s in range(traces.shape[1])],
        )
        write_csv(
            ctx.out / f"loss_traces_{name}.csv",
            ["image"] + [f"step_{s}" for s in range(traces.shape[1])],
            [[sub.names[i] if sub.names else i] + [float(v) for v in traces[i]] for i in range(len(results))],
        )
        linf = max(float(np.abs(r.perturbation).max()) for r in results)
        ctx.metric(name, "final_mean_loss", float(traces[:, -1].mean()), False)
        ctx.metric(name, "loss_increase_rate", float(np.mean(traces[:, -1] >= traces[:, 0])), None)
        ctx.metric(name, "max_linf", linf, None)
        ctx.metric(name, "attack_success_rate", float(np.mean([r.success for r in results])), False)


def _baseline(ctx: _Context) -> tuple[str, ModelCheckpoint]:
    if ctx.baseline is not None:
        return ctx.baseline
    for name, ckpt in ctx.models.items():
        if ckpt.kind == "cnn":
            return name, ckpt
    raise ConfigError("this experiment needs a baseline: set models.baseline or include a CNN model")


def _corruption_suite(ctx: _Context, ds: LabeledDataset) -> None:
    kinds = list(CORRUPTIONS) if ctx.cfg.param("corruptions").strip() == "all" else ctx.cfg.list_param("corruptions")
    for k in kinds:
        if k not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {k!r}")
    severities = ctx.cfg.list_param("severities", int)
    corrupted = {}
    for k in kinds:
        for s in severities:
            CorruptionSpec(k, s)
            corrupted[k, s] = np.stack(ctx.pmap(lambda i: corrupt(ds.images[i], CorruptionSpec(k, s, seed=ctx.image_seed(i))), range(len(ds))))

    def errors(ckpt):
        return {k: [1.0 - _accuracy(ckpt, corrupted[k, s], ds.labels) for s in severities] for k in kinds}

    base_name, base = _baseline(ctx)
    base_err = errors(base)
    for name, ckpt in ctx.models.items():
        err = base_err if ckpt is base else errors(ckpt)
        rows = [[k] + [100.0 * (1 - e) for e in err[k]] + [100.0 * (1 - float(np.mean(err[k])))] for k in kinds]
        write_csv(ctx.out / f"corruption_{name}.csv", ["corruption"] + [f"severity_{s}" for s in severities] + ["mean"], rows)
        report = A.mce(err, base_err, baseline=base_name)
        report.write(ctx.out, f"mce_{name}")
        clean = 100.0 * _accuracy(ckpt, ds.images, ds.labels)
        ctx.metric(name, "clean_accuracy", clean, True)
        ctx.metric(name, "mCE", report.value, False)


def _perturbation_suite(ctx: _Context, ds: LabeledDataset) -> None:
    kinds = list(SEQUENCES) if ctx.cfg.param("sequences").strip() == "all" else ctx.cfg.list_param("sequences")
    for k in kinds:
        if k not in SEQUENCES:
            raise ConfigError(f"unknown perturbation sequence {k!r}")
    length = ctx.cfg.int_param("length")
    count = min(ctx.cfg.int_param("count"), len(ds))
    if ctx.num_classes < 5:
        raise ConfigError("top-5 distance needs models with at least 5 classes")
    frames = {}
    for k in kinds:
        seqs = ctx.pmap(lambda i: np.stack(perturb_sequence(ds.images[i], PerturbationSequence(k, length, ctx.image_seed(i)))), range(count))
        frames[k] = np.stack(seqs)

    def rankings(ckpt):
        out = {}
        for k in kinds:
            f = frames[k]
            logits = ckpt.predict_logits(f.reshape((-1,) + f.shape[2:])).reshape(f.shape[:2] + (-1,))
            out[k] = A.rank_classes(logits)[..., :5]
        return out

    try:
        base_name, base = _baseline(ctx)
    except ConfigError:
        base_name, base = None, None
    base_rank = rankings(base) if base is not None else None
    for name, ckpt in ctx.models.items():
        ranks = base_rank if ckpt is base else rankings(ckpt)
        rows = []
        for k in kinds:
            noise = k in NOISE_SEQUENCES
            row = {
                "perturbation": k,
                "flip_rate": A.flip_rate(list(ranks[k][..., 0]), noise).value,
                "top5_distance": A.top5_distance(list(ranks[k])).value,
                "normalized_flip_rate": "",
                "normalized_top5_distance": "",
            }
            if base_rank is not None:
                fr_b = A.flip_rate(list(base_rank[k][..., 0]), noise).value
                t5_b = A.top5_distance(list(base_rank[k])).value
                # normalisation is optional and undefined against a perfectly stable baseline
                if fr_b > 0:
                    row["normalized_flip_rate"] = 100.0 * row["flip_rate"] / fr_b
                if t5_b > 0:
                    row["normalized_top5_distance"] = 100.0 * row["top5_distance"] / t5_b
            rows.append(row)
        write_csv(ctx.out / f"perturbation_{name}.csv", list(rows[0]), [list(r.values()) for r in rows])
        for metric, stem, raw, norm in (("mFR", "mfr", "flip_rate", "normalized_flip_rate"), ("mT5D", "mt5d", "top5_distance", "normalized_top5_distance")):
            normalized = all(r[norm] != "" for r in rows)
            breakdown = [{"perturbation": r["perturbation"], "value": r[raw], "normalized": r[norm]} for r in rows]
            report = A.MetricReport(metric, float(np.mean([r[raw] for r in rows])), breakdown, base_name if normalized else None)
            report.write(ctx.out, f"{stem}_{name}")
            ctx.metric(name, metric, report.value, False)
            if normalized:
                ctx.metric(name, f"{metric}_normalized", float(np.mean([r[norm] for r in rows])), False)
        if base_rank is not None and not all(r["normalized_flip_rate"] != "" and r["normalized_top5_distance"] != "" for r in rows):
            logger.warning("baseline %s is perfectly stable on some sequences; %s reported unnormalised", base_name, name)


def _background(ctx: _Context, ds: LabeledDataset) -> None:
    if ds.masks is None or ds.backgrounds is None:
        raise ConfigError("background experiment needs a synthetic dataset (masks and background renders)")
    pool = BackgroundPool.from_dataset(ds)
    composed = {}
    for variant in ("original", "mixed_same", "mixed_rand", "only_fg"):
        imgs = ctx.pmap(
            lambda i: compose_background(ds.images[i], ds.masks[i], CompositeSpec(variant, pool, ctx.image_seed(i)), int(ds.labels[i])),
            range(len(ds)),
        )
        composed[variant] = ds.with_images(np.stack(imgs))
    rows = []
    for name, ckpt in ctx.models.items():
        report = A.bg_gap(ckpt, composed)
        report.write(ctx.out, f"bg_gap_{name}")
        acc = {r["variant"]: r["accuracy"] for r in report.breakdown}
        rows.append([name, acc["original"], acc["mixed_same"], acc["mixed_rand"], acc["only_fg"], report.value])
        ctx.metric(name, "bg_gap", report.value, False)
        ctx.metric(name, "mixed_rand_accuracy", acc["mixed_rand"], True)
    write_csv(ctx.out / "background.csv", ["model", "original", "mixed_same", "mixed_rand", "only_fg", "bg_gap"], rows)


def _attribution(ctx: _Context, ds: LabeledDataset) -> None:
    count = min(ctx.cfg.int_param("count"), len(ds))
    sal_dir = ctx.out / "saliency"
    sal_dir.mkdir(exist_ok=True)
    for name, ckpt in ctx.models.items():
        maps = ctx.pmap(lambda i: A.gradcam(ckpt, ds.images[i], int(ds.labels[i])), range(count))
        rows = []
        for i, m in enumerate(maps):
            m.write_pgm(sal_dir / f"{name}_{i:04d}_gradcam.pgm")
            if ds.masks is not None:
                mass = A.foreground_mass(m, ds.masks[i])
                area = float(ds.masks[i].mean())
                rows.append([i, mass, area, int(mass > area)])
        if rows:
            write_csv(ctx.out / f"gradcam_foreground_{name}.csv", ["image", "foreground_mass", "foreground_area", "exceeds_area"], rows)
            ctx.metric(name, "gradcam_foreground_hit_rate", float(np.mean([r[3] for r in rows])), True)
        if ckpt.kind == "vit":
            trace = vit_forward(ckpt, ds.images[:count], record_attention=True)
            for i in range(count):
                A.attention_rollout(trace.attention[:, i]).write_pgm(sal_dir / f"{name}_{i:04d}_rollout.pgm")
            dist = A.attention_distance(trace.attention, ckpt.config.patch_size)
            write_csv(
                ctx.out / f"attention_distance_{name}.csv",
                ["layer", "head", "distance"],
                [[l, h, float(dist[l, h])] for l in range(dist.shape[0]) for h in range(dist.shape[1])],
            )
            for l in range(dist.shape[0]):
                ctx.metric(name, f"attention_distance_layer{l}", float(dist[l].mean()), None)


KIND_RUNNERS = {
    "masking": _masking,
    "fourier": _fourier,
    "dct_spectrum": _dct_spectrum,
    "loss_landscape": _loss_landscape,
    "corruption_suite": _corruption_suite,
    "perturbation_suite": _perturbation_suite,
    "background": _background,
    "attribution": _attribution,
}


def run(cfg: ExperimentConfig) -> RunManifest:
    """Run one experiment; write its artifacts, ``metrics.json`` and ``manifest.json``."""
    start = time.perf_counter()
    ctx = _Context(cfg)
    ctx.out.mkdir(parents=True, exist_ok=True)
    try:
        ds = load_dataset(cfg.dataset, num_classes=ctx.num_classes, channels=ctx.input_shape[0], require_masks=cfg.kind == "background")
    except ConfigError:
        raise
    except (OSError, ValueError) as exc:
        raise ExperimentError("dataset", exc) from exc
    if ds.images.shape[1:] != ctx.input_shape:
        raise ConfigError(f"dataset images {ds.images.shape[1:]} do not match model input {ctx.input_shape}")
    try:
        KIND_RUNNERS[cfg.kind](ctx, ds)
    except ConfigError:
        raise
    except Exception as exc:
        raise ExperimentError(cfg.kind, exc) from exc
    (ctx.out / "metrics.json").write_text(json.dumps(ctx.metrics, indent=2, sort_keys=True) + "\n")
    models = {}
    for name, ckpt in ctx.models.items():
        params, flops = count_params_flops(ckpt.config)
        models[name] = {"path": cfg.models[name], "sha256": sha256_file(cfg.models[name]), "kind": ckpt.kind, "params": params, "flops": flops}
    files = {
        p.relative_to(ctx.out).as_posix(): sha256_file(p)
        for p in sorted(ctx.out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = RunManifest(cfg.snapshot(), __version__, round(time.perf_counter() - start, 3), ds.digest(), models, files)
    (ctx.out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest
