"""Side-by-side comparison of two experiment runs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError
from .io import write_csv


@dataclass
class ComparisonRow:
    metric: str
    a: float
    b: float
    delta: float
    higher_is_better: bool | None


def _load(path) -> tuple[dict, dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    metrics_file = path.parent / "metrics.json"
    metrics = json.loads(metrics_file.read_text()) if metrics_file.is_file() else {}
    return manifest, metrics, path.parent


def _flatten(metrics: dict, single: bool) -> dict:
    if not single:
        return metrics
    return {key.split("/", 1)[1]: v for key, v in metrics.items()}


def delta(a: float, b: float, higher_is_better: bool | None) -> float:
    """Positive when run A is better; plain ``a - b`` when there is no preferred direction."""
    return b - a if higher_is_better is False else a - b


def compare(manifest_a, manifest_b) -> list[ComparisonRow]:
    """Per-metric deltas plus parameter and FLOP counts of each run's models.

    Runs with one model each are matched by metric name; otherwise by
    ``model/metric``.
    """
    ma, xa, _ = _load(manifest_a)
    mb, xb, _ = _load(manifest_b)
    if ma["config"]["kind"] != mb["config"]["kind"]:
        raise ValueError(f"experiment kinds differ: {ma['config']['kind']} vs {mb['config']['kind']}")
    if ma["dataset_digest"] != mb["dataset_digest"]:
        raise ValueError("runs used different datasets")
    single = len(ma["models"]) == 1 and len(mb["models"]) == 1
    fa, fb = _flatten(xa, single), _flatten(xb, single)
    rows = []
    if single:
        (na, ia), (nb, ib) = next(iter(ma["models"].items())), next(iter(mb["models"].items()))
        for key in ("params", "flops"):
            rows.append(ComparisonRow(key, float(ia[key]), float(ib[key]), float(ia[key] - ib[key]), None))
    else:
        for name in sorted(set(ma["models"]) & set(mb["models"])):
            for key in ("params", "flops"):
                va, vb = ma["models"][name][key], mb["models"][name][key]
                rows.append(ComparisonRow(f"{name}/{key}", float(va), float(vb), float(va - vb), None))
    for key in sorted(set(fa) & set(fb)):
        hib = fa[key].get("higher_is_better")
        a, b = float(fa[key]["value"]), float(fb[key]["value"])
        rows.append(ComparisonRow(key, a, b, delta(a, b, hib), hib))
    return rows


def write_comparison(rows: list[ComparisonRow], path) -> Path:
    return write_csv(
        path,
        ["metric", "a", "b", "delta", "higher_is_better"],
        [[r.metric, r.a, r.b, r.delta, "" if r.higher_is_better is None else str(r.higher_is_better).lower()] for r in rows],
    )
