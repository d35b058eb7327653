"""Acceptance criteria 1-9, one test per criterion.

Every test records a PASS/FAIL line (see ``acceptance_log``); the lines are
repeated in the pytest terminal summary. Criteria 5-9 share one pair of
trained toy models and one desk-scale run of all eight experiment kinds.
"""

import csv
import dataclasses
import json
import time

import numpy as np
import pytest

from robustlens import analysis as A
from robustlens.corruptions import synth_dataset
from robustlens.harness import DatasetSource, ExperimentConfig, run
from robustlens.harness.config import EXPERIMENT_KINDS
from robustlens.models import CNNConfig, ModelCheckpoint, ViTConfig, initial_checkpoint, train, vit_forward
from robustlens.models.training import default_optimizer
from robustlens.spectral import dct2, dft2, fourier_basis, idct2, read_grid_csv

from . import grad_cases
from .acceptance_log import report
from .gradcheck import check
from .oracles import aupr_oracle, flip_rate_oracle, mce_oracle, t5d_oracle, t5d_pair_oracle

pytestmark = pytest.mark.acceptance

TRAIN_BUDGET_S = 600.0
CLEAN_ACCURACY = 0.95
# training recipes: (samples per class, epochs); optimiser is default_optimizer(kind)
RECIPES = {"vit": (ViTConfig(), 150, 30), "cnn": (CNNConfig(), 100, 30)}
TEST_SOURCE = DatasetSource(classes=8, samples_per_class=40, image_size=32, seed=2)

# desk-scale experiment settings: (params, optional subsample of the test set)
DESK = {
    "corruption_suite": ({}, 160),
    "perturbation_suite": ({"length": "10", "count": "50"}, None),
    "masking": ({}, None),
    "fourier": ({"epsilon": "4.0"}, 32),
    "dct_spectrum": ({"count": "100"}, None),
    "loss_landscape": ({"count": "100", "epsilon": "0.002", "steps": "20"}, None),
    "attribution": ({"count": "8"}, None),
    "background": ({}, None),
}
# plot-ready artifacts each kind must produce (per-model files use {m})
ARTIFACTS = {
    "corruption_suite": ["corruption_{m}.csv", "mce_{m}.csv", "mce_{m}.json"],
    "perturbation_suite": ["perturbation_{m}.csv", "mfr_{m}.csv", "mt5d_{m}.csv"],
    "masking": ["masking.csv"],
    "fourier": ["fourier_{m}.csv", "fourier_{m}.pgm", "fourier_percentiles.csv"],
    "dct_spectrum": ["dct_{m}.csv", "dct_{m}.pgm", "dct_summary.csv"],
    "loss_landscape": ["loss_{m}.csv", "loss_traces_{m}.csv"],
    "attribution": ["gradcam_foreground_{m}.csv"],
    "background": ["background.csv", "bg_gap_{m}.csv"],
}


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_models")
    test = synth_dataset(TEST_SOURCE.classes, TEST_SOURCE.samples_per_class, TEST_SOURCE.image_size, TEST_SOURCE.seed)
    out = {}
    for name, (cfg, per_class, epochs) in RECIPES.items():
        data = synth_dataset(8, per_class, 32, seed=1)
        start = time.perf_counter()
        ckpt = train(cfg, data, default_optimizer(name), epochs, seed=0, eval_dataset=test)
        seconds = time.perf_counter() - start
        path = ckpt.save(root / f"{name}.ckpt")
        out[name] = {"ckpt": ckpt, "path": str(path), "seconds": seconds, "accuracy": ckpt.metadata["clean_accuracy"]}
    out["test"] = test
    return out


@pytest.fixture(scope="session")
def desk_runs(trained, tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_runs")
    models = {"vit": trained["vit"]["path"], "cnn": trained["cnn"]["path"]}
    runs = {}
    for kind in EXPERIMENT_KINDS:
        params, sample = DESK[kind]
        source = TEST_SOURCE if sample is None else dataclasses.replace(TEST_SOURCE, sample=sample)
        dirs = []
        for rerun, workers in enumerate((1, 2)):
            cfg = ExperimentConfig(kind, models, source, 0, str(root / kind / f"run{rerun}"), None, dict(params), workers)
            start = time.perf_counter()
            manifest = run(cfg)
            dirs.append((root / kind / f"run{rerun}", manifest, time.perf_counter() - start))
        runs[kind] = dirs
    return runs


def _metrics(run_dir):
    return json.loads((run_dir / "metrics.json").read_text())


# ------------------------------------------------------------------ criterion 1


def test_criterion_1_autodiff_gradient_checks():
    start = time.perf_counter()
    worst = {}
    for name, make in grad_cases.CASES.items():
        errs = []
        for seed in range(20):
            build, arrays = make(np.random.default_rng(seed))
            errs.append(check(build, arrays, step=1e-5))
        worst[name] = max(errs)
    seconds = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and seconds < 60.0
    detail = f"{len(worst)} ops x 20 instances, worst rel err {max(worst.values()):.2e}, {seconds:.1f}s"
    assert report(1, ok, detail + (f", failing {bad}" if bad else "")), detail


# ------------------------------------------------------------------ criterion 2


def test_criterion_2_attention_contract():
    cfg = ViTConfig(depth=4)
    rng = np.random.default_rng(0)
    worst_row, worst_rollout, passes = 0.0, 0.0, 0
    for init_seed in range(10):
        ckpt = initial_checkpoint(cfg, init_seed)
        images = rng.uniform(-1, 1, (10, 3, 32, 32))
        att = vit_forward(ckpt, images, record_attention=True).attention
        assert att.shape[0] == 4
        worst_row = max(worst_row, float(np.abs(att.sum(axis=-1) - 1).max()))
        for i in range(images.shape[0]):
            r = A.rollout_matrix(att[:, i])
            worst_rollout = max(worst_rollout, float(np.abs(r.sum(axis=-1) - 1).max()))
            passes += 1
    ok = passes == 100 and worst_row <= 1e-9 and worst_rollout <= 1e-9
    detail = f"{passes} forward passes, max |row sum - 1| attention {worst_row:.1e}, rollout {worst_rollout:.1e}"
    assert report(2, ok, detail), detail


# ------------------------------------------------------------------ criterion 3


def test_criterion_3_spectral_exactness(desk_runs):
    rng = np.random.default_rng(0)
    round_trip, parseval = 0.0, 0.0
    for _ in range(100):
        x = rng.uniform(-1, 1, (32, 32))
        c = dct2(x)
        round_trip = max(round_trip, float(np.abs(idct2(c) - x).max()))
        parseval = max(parseval, abs(float((c**2).sum() - (x**2).sum())) / float((x**2).sum()))
    basis_ok = True
    for i in range(32):
        for j in range(32):
            u = fourier_basis(i, j, 32, 32).matrix
            spec = np.abs(dft2(u))
            basis_ok &= abs(np.linalg.norm(u) - 1) < 1e-12 and int((spec > 1e-9 * spec.max()).sum()) <= 2
    symmetric = True
    run_dir = desk_runs["fourier"][0][0]
    for m in ("vit", "cnn"):
        v = read_grid_csv(run_dir / f"fourier_{m}.csv").values
        mirror = v[(-np.arange(32)) % 32][:, (-np.arange(32)) % 32]
        symmetric &= bool(np.array_equal(v, mirror))
    ok = round_trip < 1e-9 and parseval < 1e-9 and basis_ok and symmetric
    detail = f"round trip {round_trip:.1e}, Parseval {parseval:.1e}, 1024 bases ok={basis_ok}, heatmaps point-symmetric={symmetric}"
    assert report(3, ok, detail), detail


# ------------------------------------------------------------------ criterion 4


def _close(a, b):
    return abs(a - b) <= 1e-12 * max(1.0, abs(b))


def test_criterion_4_metric_oracles():
    failures = []
    # hand cases
    hand_model = {"c1": [0.2, 0.4], "c2": [0.1, 0.3]}
    hand_base = {"c1": [0.4, 0.4], "c2": [0.2, 0.2]}
    if not _close(A.mce(hand_model, hand_base).value, 87.5) or not _close(mce_oracle(hand_model, hand_base), 87.5):
        failures.append("mce hand")
    if not _close(A.mce(hand_base, hand_base).value, 100.0):
        failures.append("mce identity")
    half = {k: [v / 2 for v in vs] for k, vs in hand_base.items()}
    if not _close(A.mce(half, hand_base).value, 50.0):
        failures.append("mce half")
    for seqs, expected in (([[1, 1, 1, 1]], 0.0), ([[0, 1, 0, 1, 0]], 100.0), ([[0, 0, 1, 1, 0]], 50.0)):
        if not _close(A.flip_rate(seqs).value, expected) or not _close(flip_rate_oracle(seqs, False), expected):
            failures.append(f"flip_rate {seqs}")
    top = [0, 1, 2, 3, 4]
    for later, expected in ((top, 0), (top[::-1], 12), ([5, 6, 7, 8, 9], 15)):
        if A.top5_pair_distance(top, later) != expected or t5d_pair_oracle(top, later) != expected:
            failures.append(f"top5 {later}")
    if not _close(A.aupr([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]), 1.0):
        failures.append("aupr separating")
    if not _close(A.aupr([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]), 0.25) or not _close(aupr_oracle([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]), 0.25):
        failures.append("aupr last")
    # randomised instances: <= 20 samples, <= 6 classes
    rng = np.random.default_rng(42)
    for _ in range(50):
        kinds = [f"k{i}" for i in range(rng.integers(1, 6))]
        sev = int(rng.integers(1, 6))
        model = {k: list(rng.uniform(0, 1, sev)) for k in kinds}
        base = {k: list(rng.uniform(0.05, 1, sev)) for k in kinds}
        if not _close(A.mce(model, base).value, mce_oracle(model, base)):
            failures.append("mce random")
        seqs = [list(rng.integers(0, 6, rng.integers(2, 6))) for _ in range(rng.integers(1, 5))]
        noise = bool(rng.integers(2))
        if not _close(A.flip_rate(seqs, noise).value, flip_rate_oracle(seqs, noise)):
            failures.append("flip_rate random")
        rank_seqs = [np.stack([rng.permutation(6)[:5] for _ in range(rng.integers(2, 5))]) for _ in range(rng.integers(1, 5))]
        if not _close(A.top5_distance(rank_seqs).value, t5d_oracle([s.tolist() for s in rank_seqs])):
            failures.append("top5 random")
        n = int(rng.integers(2, 21))
        labels = [1, 0] + list(rng.integers(0, 2, n - 2))
        scores = list(np.round(rng.uniform(0, 1, n), 1))
        if not _close(A.aupr(scores, labels), aupr_oracle(scores, labels)):
            failures.append("aupr random")
    ok = not failures
    detail = "hand cases + 50 random instances each for mce, flip_rate, top5_distance, aupr" + (f"; mismatches: {sorted(set(failures))}" if failures else "")
    assert report(4, ok, detail), detail


# ------------------------------------------------------------------ criterion 5


def test_criterion_5_attack_contracts(desk_runs):
    parts = []
    ok = True
    loss_metrics = _metrics(desk_runs["loss_landscape"][0][0])
    dct_metrics = _metrics(desk_runs["dct_spectrum"][0][0])
    for m in ("vit", "cnn"):
        header, rows = _read_rows(desk_runs["loss_landscape"][0][0] / f"loss_traces_{m}.csv")
        attacked = len(rows)
        linf = loss_metrics[f"{m}/max_linf"]["value"]
        rate = loss_metrics[f"{m}/loss_increase_rate"]["value"]
        flips = dct_metrics[f"{m}/deepfool_success_rate"]["value"]
        _, summary = _read_rows(desk_runs["dct_spectrum"][0][0] / "dct_summary.csv")
        df_count = int(next(r for r in summary if r[0] == m)[1])
        good = attacked == 100 and df_count == 100 and linf <= 0.002 and rate >= 0.95 and flips >= 0.90
        ok &= good
        parts.append(f"{m}: {attacked} PGD imgs max|d|inf={linf:.4g}, loss up {100 * rate:.0f}%, DeepFool flips {100 * flips:.0f}% of {df_count}")
    detail = "; ".join(parts)
    assert report(5, ok, detail), detail


# ------------------------------------------------------------------ criterion 6


def test_criterion_6_desk_scale_end_to_end(trained, desk_runs):
    problems = []
    for m in ("vit", "cnn"):
        if trained[m]["accuracy"] < CLEAN_ACCURACY:
            problems.append(f"{m} clean accuracy {trained[m]['accuracy']:.3f}")
        if trained[m]["seconds"] > TRAIN_BUDGET_S:
            problems.append(f"{m} trained in {trained[m]['seconds']:.0f}s")
    for kind, ((a, man_a, _), (b, man_b, _)) in desk_runs.items():
        for pattern in ARTIFACTS[kind]:
            for m in ("vit", "cnn"):
                if not (a / pattern.format(m=m)).is_file():
                    problems.append(f"{kind}: missing {pattern.format(m=m)}")
        if man_a.files != man_b.files:
            problems.append(f"{kind}: rerun differs")
        for rel in man_a.files:
            if (a / rel).read_bytes() != (b / rel).read_bytes():
                problems.append(f"{kind}: {rel} not byte-identical")
    # table/figure shapes
    fourier = desk_runs["fourier"][0][0]
    if read_grid_csv(fourier / "fourier_vit.csv").values.shape != (32, 32):
        problems.append("fourier grid shape")
    header, rows = _read_rows(fourier / "fourier_percentiles.csv")
    if len(rows) != 2 or len(header) != 6:
        problems.append("fourier percentile table shape")
    header, rows = _read_rows(desk_runs["masking"][0][0] / "masking.csv")
    if len(rows) != 5 or header != ["masking_factor", "vit", "cnn"]:
        problems.append("masking table shape")
    header, rows = _read_rows(desk_runs["background"][0][0] / "background.csv")
    if len(rows) != 2 or len(header) != 6:
        problems.append("background table shape")
    header, rows = _read_rows(desk_runs["loss_landscape"][0][0] / "loss_vit.csv")
    if len(rows) != 21:
        problems.append("loss curve length")
    if read_grid_csv(desk_runs["dct_spectrum"][0][0] / "dct_cnn.csv").values.shape != (32, 32):
        problems.append("dct grid shape")
    header, rows = _read_rows(desk_runs["corruption_suite"][0][0] / "corruption_vit.csv")
    if len(rows) != 8:
        problems.append("corruption table shape")
    timing = ", ".join(f"{kind} {sum(t for _, _, t in runs):.0f}s" for kind, runs in desk_runs.items())
    detail = (
        f"vit acc {trained['vit']['accuracy']:.3f} in {trained['vit']['seconds']:.0f}s, "
        f"cnn acc {trained['cnn']['accuracy']:.3f} in {trained['cnn']['seconds']:.0f}s; "
        f"8 kinds x 2 runs byte-identical ({timing})"
    )
    ok = not problems
    assert report(6, ok, detail + (f"; problems: {problems}" if problems else "")), problems


# ------------------------------------------------------------------ criterion 7


def test_criterion_7_masking_sanity(trained, desk_runs):
    header, rows = _read_rows(desk_runs["masking"][0][0] / "masking.csv")
    test = trained["test"]
    ok = True
    parts = []
    factors = [float(r[0]) for r in rows]
    ok &= factors == [0.0, 0.05, 0.1, 0.2, 0.5]
    for col, m in enumerate(header[1:], start=1):
        acc = [float(r[col]) for r in rows]
        clean = 100.0 * float(np.mean(A.top1_predictions(trained[m]["ckpt"], test.images) == test.labels))
        exact = acc[0] == clean
        monotone = all(b <= a + 2.0 for a, b in zip(acc, acc[1:]))
        ok &= exact and monotone
        parts.append(f"{m}: factor0 {acc[0]:.2f} == clean {clean:.2f} ({exact}), curve " + "/".join(f"{v:.1f}" for v in acc))
    detail = "; ".join(parts)
    assert report(7, ok, detail), detail


# ------------------------------------------------------------------ criterion 8


def test_criterion_8_deepfool_spectrum(desk_runs):
    header, rows = _read_rows(desk_runs["dct_spectrum"][0][0] / "dct_summary.csv")
    col = {h: i for i, h in enumerate(header)}
    ok = len(rows) == 2
    parts = []
    for r in rows:
        energy, msn = float(r[col["energy_total"]]), float(r[col["mean_squared_norm"]])
        rel = abs(energy - msn) / msn
        count = int(r[col["count"]])
        ok &= rel <= 1e-9 and count == 100 and np.isfinite(float(r[col["high_frequency_fraction"]]))
        parts.append(f"{r[0]}: n={count}, Parseval rel {rel:.1e}, high-frequency fraction {float(r[col['high_frequency_fraction']]):.4f}")
    detail = "; ".join(parts)
    assert report(8, ok, detail), detail


# ------------------------------------------------------------------ criterion 9


def test_criterion_9_gradcam_localization(trained):
    ckpt: ModelCheckpoint = trained["cnn"]["ckpt"]
    test = trained["test"]
    pred = A.top1_predictions(ckpt, test.images)
    hits = []
    for i in np.flatnonzero(pred == test.labels):
        sal = A.gradcam(ckpt, test.images[i], int(test.labels[i]))
        hits.append(A.foreground_mass(sal, test.masks[i]) > float(test.masks[i].mean()))
    rate = float(np.mean(hits))
    ok = rate >= 0.70
    detail = f"cnn Grad-CAM mass exceeds foreground area on {100 * rate:.1f}% of {len(hits)} correct test images"
    assert report(9, ok, detail), detail
