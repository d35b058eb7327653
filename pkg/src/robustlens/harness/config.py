"""INI experiment and training configuration.

Example experiment file::

    [experiment]
    kind = masking
    seed = 0
    out = results/masking

    [models]
    vit = ckpt/vit.ckpt
    cnn = ckpt/cnn.ckpt
    baseline = ckpt/cnn.ckpt     ; optional, used by normalised metrics

    [dataset]
    source = synthetic           ; or a directory with labels.csv
    classes = 8
    samples_per_class = 125
    image_size = 32
    seed = 2
    sample = 1000                ; optional uniform subsample

    [params]
    factors = 0, 0.05, 0.1, 0.2, 0.5
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

EXPERIMENT_KINDS = (
    "corruption_suite",
    "perturbation_suite",
    "masking",
    "fourier",
    "dct_spectrum",
    "loss_landscape",
    "attribution",
    "background",
)

# documented kind-specific keys and their defaults
PARAM_DEFAULTS: dict[str, dict[str, str]] = {
    "corruption_suite": {"corruptions": "all", "severities": "1,2,3,4,5"},
    "perturbation_suite": {"sequences": "all", "length": "10", "count": "100"},
    "masking": {"factors": "0,0.05,0.1,0.2,0.5"},
    "fourier": {"epsilon": "0.1"},
    "dct_spectrum": {"count": "100", "max_iters": "50", "overshoot": "0.02", "candidates": "10"},
    "loss_landscape": {"count": "100", "epsilon": "0.002", "steps": "20", "attack": "pgd_sign", "step_size": "", "learning_rate": "0.001"},
    "attribution": {"count": "8"},
    "background": {},
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 1)."""


@dataclass(frozen=True)
class DatasetSource:
    """A directory of image files or a synthetic dataset spec."""

    path: str | None = None
    classes: int = 8
    samples_per_class: int = 125
    image_size: int = 32
    seed: int = 0
    bg_correlation: float = 0.5
    sample: int | None = None
    sample_seed: int = 0

    @property
    def synthetic(self) -> bool:
        return self.path is None

    def describe(self) -> dict:
        if self.synthetic:
            d = {
                "source": "synthetic",
                "classes": self.classes,
                "samples_per_class": self.samples_per_class,
                "image_size": self.image_size,
                "seed": self.seed,
                "bg_correlation": self.bg_correlation,
            }
        else:
            d = {"source": self.path}
        if self.sample is not None:
            d.update(sample=self.sample, sample_seed=self.sample_seed)
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    models: dict[str, str]
    dataset: DatasetSource
    seed: int
    out: str
    baseline: str | None = None
    params: dict[str, str] = field(default_factory=dict)
    workers: int = 1

    def param(self, key: str) -> str:
        return self.params.get(key, PARAM_DEFAULTS[self.kind].get(key, ""))

    def int_param(self, key: str) -> int:
        return _as_int(self.param(key), f"params.{key}")

    def float_param(self, key: str) -> float:
        return _as_float(self.param(key), f"params.{key}")

    def list_param(self, key: str, cast=str) -> list:
        raw = self.param(key)
        items = [s.strip() for s in raw.split(",") if s.strip()]
        try:
            return [cast(s) for s in items]
        except ValueError as exc:
            raise ConfigError(f"params.{key}: {exc}") from None

    def snapshot(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "models": dict(self.models),
            "baseline": self.baseline,
            "dataset": self.dataset.describe(),
            "params": {k: self.param(k) for k in sorted(set(PARAM_DEFAULTS[self.kind]) | set(self.params))},
        }


@dataclass(frozen=True)
class TrainConfig:
    model: str
    dataset: DatasetSource
    seed: int
    out: str
    epochs: int
    optimizer: dict[str, str]
    architecture: dict[str, str]
    eval_dataset: DatasetSource | None = None


def _as_int(value, what: str) -> int:
    try:
        return int(str(value).strip())
    except ValueError:
        raise ConfigError(f"{what} must be an integer, got {value!r}") from None


def _as_float(value, what: str) -> float:
    try:
        return float(str(value).strip())
    except ValueError:
        raise ConfigError(f"{what} must be a number, got {value!r}") from None


def _read(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parser


def _resolve(base: Path, value: str) -> str:
    p = Path(value).expanduser()
    return str(p if p.is_absolute() else (base / p))


def parse_dataset(section, base: Path, what: str = "dataset") -> DatasetSource:
    source = section.get("source", "synthetic").strip()
    sample = section.get("sample")
    common = {
        "sample": _as_int(sample, f"{what}.sample") if sample else None,
        "sample_seed": _as_int(section.get("sample_seed", "0"), f"{what}.sample_seed"),
    }
    if source == "synthetic":
        ds = DatasetSource(
            None,
            classes=_as_int(section.get("classes", "8"), f"{what}.classes"),
            samples_per_class=_as_int(section.get("samples_per_class", "125"), f"{what}.samples_per_class"),
            image_size=_as_int(section.get("image_size", "32"), f"{what}.image_size"),
            seed=_as_int(section.get("seed", "0"), f"{what}.seed"),
            bg_correlation=_as_float(section.get("bg_correlation", "0.5"), f"{what}.bg_correlation"),
            **common,
        )
        if ds.classes < 2 or ds.samples_per_class < 1:
            raise ConfigError(f"{what}: need classes >= 2 and samples_per_class >= 1")
        return ds
    path = _resolve(base, source)
    if not Path(path).is_dir():
        raise ConfigError(f"{what}.source {path} is not a directory")
    return DatasetSource(path, **common)


def load_experiment(path, seed: int | None = None, out: str | None = None, workers: int | None = None) -> ExperimentConfig:
    """Parse and validate an experiment file; CLI flags override file values."""
    parser = _read(path)
    base = Path(path).resolve().parent
    if not parser.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    exp = parser["experiment"]
    kind = exp.get("kind", "").strip()
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"experiment.kind must be one of {', '.join(EXPERIMENT_KINDS)}; got {kind!r}")
    if seed is None:
        if "seed" not in exp:
            raise ConfigError("experiment.seed is mandatory")
        seed = _as_int(exp["seed"], "experiment.seed")
    out = out or exp.get("out")
    if not out:
        raise ConfigError("no output directory: set experiment.out or pass --out")
    if workers is None:
        workers = _as_int(exp.get("workers", "1"), "experiment.workers")
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    if not parser.has_section("models") or not any(k != "baseline" for k in parser["models"]):
        raise ConfigError("[models] must name at least one checkpoint")
    models = {}
    baseline = None
    for name, value in parser["models"].items():
        p = _resolve(base, value.strip())
        if not Path(p).is_file():
            raise ConfigError(f"models.{name}: checkpoint {p} does not exist")
        if name == "baseline":
            baseline = p
        else:
            models[name] = p
    dataset = parse_dataset(parser["dataset"] if parser.has_section("dataset") else {}, base)
    params = dict(parser["params"]) if parser.has_section("params") else {}
    unknown = set(params) - set(PARAM_DEFAULTS[kind])
    if unknown:
        raise ConfigError(f"unknown {kind} parameter(s): {', '.join(sorted(unknown))}")
    return ExperimentConfig(kind, models, dataset, int(seed), str(out), baseline, params, int(workers))


OPTIMIZER_KEYS = ("optimizer", "lr", "batch_size", "momentum", "weight_decay", "schedule", "warmup_steps", "grad_clip")


def load_training(path, seed: int | None = None, out: str | None = None) -> TrainConfig:
    """Parse a training file: [train] model/epochs/out/optimizer keys, [model] architecture keys, [dataset]."""
    parser = _read(path)
    base = Path(path).resolve().parent
    if not parser.has_section("train"):
        raise ConfigError("missing [train] section")
    sec = parser["train"]
    model = sec.get("model", "").strip()
    if model not in ("vit", "cnn"):
        raise ConfigError(f"train.model must be 'vit' or 'cnn', got {model!r}")
    if seed is None:
        if "seed" not in sec:
            raise ConfigError("train.seed is mandatory")
        seed = _as_int(sec["seed"], "train.seed")
    out = out or sec.get("out")
    if not out:
        raise ConfigError("no checkpoint path: set train.out or pass --out")
    epochs = _as_int(sec.get("epochs", "10"), "train.epochs")
    optimizer = {k: sec[k].strip() for k in OPTIMIZER_KEYS if k in sec}
    arch = dict(parser["model"]) if parser.has_section("model") else {}
    dataset = parse_dataset(parser["dataset"] if parser.has_section("dataset") else {}, base)
    eval_ds = parse_dataset(parser["eval"], base, "eval") if parser.has_section("eval") else None
    return TrainConfig(model, dataset, int(seed), str(out), epochs, optimizer, arch, eval_ds)
