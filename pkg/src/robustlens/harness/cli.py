"""``robustlens`` command line: train, run, compare, synth, inspect.

Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .. import __version__
from ..models import CNNConfig, ModelCheckpoint, ViTConfig, count_params_flops, train
from ..models.training import default_optimizer
from .compare import compare, write_comparison
from .config import EXPERIMENT_KINDS, PARAM_DEFAULTS, ConfigError, DatasetSource, load_experiment, load_training
from .experiments import run
from .io import load_dataset, save_directory

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("robustlens")

_PARAM_HELP = "\n".join(
    f"  {kind}: " + (", ".join(f"{k}={v or '(unset)'}" for k, v in PARAM_DEFAULTS[kind].items()) or "(none)") for kind in EXPERIMENT_KINDS
)

EPILOG = f"""\
experiment config (INI):
  [experiment]  kind, seed (mandatory), out, workers
  [models]      <name> = checkpoint path (one or more); baseline = path (optional)
  [dataset]     source = synthetic | <directory with labels.csv>
                classes, samples_per_class, image_size, seed, bg_correlation (synthetic)
                sample, sample_seed (optional uniform subsample)
  [params]      kind-specific keys with defaults:
{_PARAM_HELP}

training config (INI):
  [train]       model = vit | cnn, seed, epochs, out, optimizer, lr, batch_size,
                momentum, weight_decay, schedule, warmup_steps, grad_clip
  [model]       architecture fields (ViT: image_size, patch_size, hidden_dim, heads,
                depth, mlp_dim, head_type, dropout_rate; CNN: widths, blocks_per_stage,
                groups, kernel_size); num_classes and channels follow the dataset
  [dataset]     training data, as above; [eval] optional held-out data

environment: ROBUSTLENS_WORKERS is used when --workers is not given.
exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustlens", description=__doc__.splitlines()[0], epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a toy model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="checkpoint path (overrides train.out)")

    p = sub.add_parser("run", help="run one experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (overrides experiment.out)")

    p = sub.add_parser("compare", help="compare two runs (manifest files or run directories)")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="write comparison.csv here")

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--samples-per-class", type=int, default=125)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--config", help="take [dataset] settings from this file instead")

    p = sub.add_parser("inspect", help="summarise a checkpoint")
    p.add_argument("checkpoint")
    return parser


def _workers(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get("ROBUSTLENS_WORKERS")
    if env is None or not env.strip():
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"ROBUSTLENS_WORKERS must be an integer, got {env!r}") from None


def _cast_fields(cls, values: dict, fixed: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(fixed)
    for key, raw in values.items():
        if key not in fields or key in fixed or key == "kind":
            raise ConfigError(f"unknown or fixed model field {key!r}")
        default = getattr(cls(), key)
        try:
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(v) for v in raw.split(","))
            elif isinstance(default, bool):
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw.strip()
        except ValueError:
            raise ConfigError(f"model.{key}: bad value {raw!r}") from None
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid model config: {exc}") from None


def _optimizer(model: str, values: dict):
    spec = default_optimizer(model)
    mapping = {"optimizer": "kind", "lr": "lr", "batch_size": "batch_size", "momentum": "momentum", "weight_decay": "weight_decay", "schedule": "schedule", "warmup_steps": "warmup_steps", "grad_clip": "grad_clip"}
    changes = {}
    for key, raw in values.items():
        field = mapping[key]
        try:
            if field in ("kind", "schedule"):
                changes[field] = raw
            elif field in ("batch_size", "warmup_steps"):
                changes[field] = int(raw)
            elif field == "grad_clip":
                changes[field] = None if raw.lower() in ("", "none") else float(raw)
            else:
                changes[field] = float(raw)
        except ValueError:
            raise ConfigError(f"train.{key}: bad value {raw!r}") from None
    try:
        return dataclasses.replace(spec, **changes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = load_training(args.config, seed=args.seed, out=args.out)
    data = load_dataset(cfg.dataset)
    eval_data = load_dataset(cfg.eval_dataset) if cfg.eval_dataset is not None else None
    num_classes = int(data.labels.max()) + 1
    if cfg.dataset.synthetic:
        num_classes = cfg.dataset.classes
    fixed = {"num_classes": num_classes, "channels": data.images.shape[1], "image_size": data.images.shape[2]}
    model_cfg = _cast_fields(ViTConfig if cfg.model == "vit" else CNNConfig, cfg.architecture, fixed)
    ckpt = train(model_cfg, data, _optimizer(cfg.model, cfg.optimizer), cfg.epochs, cfg.seed, eval_data)
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    print(f"saved {out} clean_accuracy={ckpt.metadata.get('clean_accuracy', float('nan')):.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_experiment(args.config, seed=args.seed, out=args.out, workers=_workers(args.workers))
    manifest = run(cfg)
    print(f"{cfg.kind}: wrote {len(manifest.files)} files to {cfg.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = compare(args.a, args.b)
    width = max([len(r.metric) for r in rows] + [6])
    print(f"{'metric':<{width}}  {'A':>14}  {'B':>14}  {'delta':>14}")
    for r in rows:
        print(f"{r.metric:<{width}}  {r.a:>14.6g}  {r.b:>14.6g}  {r.delta:>14.6g}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_comparison(rows, Path(args.out) / "comparison.csv")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.config:
        from .config import _read, parse_dataset

        parser = _read(args.config)
        source = parse_dataset(parser["dataset"] if parser.has_section("dataset") else {}, Path(args.config).resolve().parent)
        if not source.synthetic:
            raise ConfigError("synth needs dataset.source = synthetic")
    else:
        source = DatasetSource(None, args.classes, args.samples_per_class, args.image_size, args.seed)
    ds = load_dataset(source)
    save_directory(ds, args.out)
    print(f"wrote {len(ds)} images to {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    ckpt = ModelCheckpoint.load(path)
    params, flops = count_params_flops(ckpt.config)
    summary = {
        "kind": ckpt.kind,
        "config": dataclasses.asdict(ckpt.config),
        "params": params,
        "flops": flops,
        "tensors": len(ckpt.params),
        "metadata": dict(ckpt.metadata),
    }
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "run": cmd_run, "compare": cmd_compare, "synth": cmd_synth, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime and numeric failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
