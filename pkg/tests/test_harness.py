import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from robustlens.corruptions import synth_dataset
from robustlens.harness import ConfigError, load_experiment, run
from robustlens.harness.cli import main
from robustlens.harness.compare import compare, delta
from robustlens.harness.config import EXPERIMENT_KINDS, DatasetSource
from robustlens.harness.io import DatasetError, load_dataset, read_csv, save_directory, write_csv
from robustlens.models import CNNConfig, OptimizerSpec, ViTConfig, train

TINY_VIT = ViTConfig(image_size=8, patch_size=4, hidden_dim=8, heads=2, depth=2, mlp_dim=16, num_classes=5)
TINY_CNN = CNNConfig(widths=(4, 8), blocks_per_stage=1, num_classes=5, groups=2, image_size=8)

SMALL_PARAMS = {
    "corruption_suite": "corruptions = gaussian_noise, contrast\nseverities = 1, 5",
    "perturbation_suite": "sequences = gaussian_noise_seq, translate_seq\nlength = 3\ncount = 4",
    "masking": "factors = 0, 0.25, 0.5",
    "fourier": "epsilon = 2.0",
    "dct_spectrum": "count = 20\nmax_iters = 10",
    "loss_landscape": "count = 20\nsteps = 3",
    "attribution": "count = 2",
    "background": "",
}


@pytest.fixture(scope="module")
def ckpts(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    data = synth_dataset(5, 4, 8, seed=1)
    spec = OptimizerSpec("adam", lr=5e-3, batch_size=5)
    paths = {}
    for name, cfg in (("vit", TINY_VIT), ("cnn", TINY_CNN)):
        train(cfg, data, spec, epochs=3, seed=0).save(d / f"{name}.ckpt")
        paths[name] = d / f"{name}.ckpt"
    return paths


def _config(tmp, ckpts, kind, seed="3", models=("vit", "cnn"), extra="", dataset=None):
    model_lines = "\n".join(f"{m} = {ckpts[m]}" for m in models)
    dataset = dataset or "source = synthetic\nclasses = 5\nsamples_per_class = 8\nimage_size = 8\nseed = 5"
    text = f"[experiment]\nkind = {kind}\nseed = {seed}\nout = {tmp / 'out'}\n{extra}\n[models]\n{model_lines}\n[dataset]\n{dataset}\n[params]\n{SMALL_PARAMS.get(kind, '')}\n"
    path = tmp / f"{kind}.ini"
    path.write_text(text)
    return path


# ------------------------------------------------------------------------ io


def test_empty_directory_is_dataset_error(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(DatasetSource(path=str(tmp_path)))


def test_two_image_directory_and_pixel_mapping(tmp_path):
    white = np.full((4, 4, 3), 255, np.uint8)
    black = np.zeros((4, 4, 3), np.uint8)
    Image.fromarray(white).save(tmp_path / "a.png")
    Image.fromarray(black).save(tmp_path / "b.png")
    (tmp_path / "labels.csv").write_text("filename,label\nb.png,1\na.png,0\n")
    ds = load_dataset(DatasetSource(path=str(tmp_path)))
    assert len(ds) == 2
    assert list(ds.labels) == [0, 1]
    assert np.all(ds.images[0] == 1.0) and np.all(ds.images[1] == -1.0)


def test_label_out_of_range_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "a.png")
    (tmp_path / "labels.csv").write_text("a.png,9\n")
    with pytest.raises((DatasetError, ValueError)):
        load_dataset(DatasetSource(path=str(tmp_path)), num_classes=5)


def test_save_and_reload_directory_round_trip(tmp_path):
    ds = synth_dataset(3, 2, 8, seed=0)
    save_directory(ds, tmp_path / "d")
    back = load_dataset(DatasetSource(path=str(tmp_path / "d")), require_masks=True)
    assert np.array_equal(back.labels, ds.labels)
    assert np.abs(back.images - ds.images).max() <= 1 / 127.5
    assert np.array_equal(back.masks, ds.masks)


def test_csv_round_trip_exact(tmp_path):
    rows = [["a", 0.1, 1 / 3], ["b", 1e-17, 2.0]]
    write_csv(tmp_path / "t.csv", ["name", "x", "y"], rows)
    header, back = read_csv(tmp_path / "t.csv")
    assert header == ["name", "x", "y"]
    assert [[r[0], float(r[1]), float(r[2])] for r in back] == rows


# -------------------------------------------------------------------- config


def test_missing_seed_is_config_error(tmp_path, ckpts):
    path = _config(tmp_path, ckpts, "masking")
    path.write_text(path.read_text().replace("seed = 3\n", "", 1))
    with pytest.raises(ConfigError):
        load_experiment(path)
    assert load_experiment(path, seed=1).seed == 1


def test_unknown_kind_param_and_missing_checkpoint(tmp_path, ckpts):
    with pytest.raises(ConfigError):
        load_experiment(_config(tmp_path, ckpts, "telepathy"))
    with pytest.raises(ConfigError):
        load_experiment(_config(tmp_path, ckpts, "masking", extra="").with_name("x.ini").write_text("") or tmp_path / "x.ini")
    p = _config(tmp_path, ckpts, "masking")
    p.write_text(p.read_text() + "colour = red\n")
    with pytest.raises(ConfigError):
        load_experiment(p)
    p = _config(tmp_path, ckpts, "masking")
    p.write_text(p.read_text().replace(str(ckpts["vit"]), str(tmp_path / "nope.ckpt")))
    with pytest.raises(ConfigError):
        load_experiment(p)


# --------------------------------------------------------------- experiments


@pytest.mark.parametrize("kind", EXPERIMENT_KINDS)
def test_every_kind_runs_and_is_deterministic(kind, tmp_path, ckpts):
    a = run(load_experiment(_config(tmp_path, ckpts, kind), out=str(tmp_path / "a")))
    b = run(load_experiment(_config(tmp_path, ckpts, kind), out=str(tmp_path / "b"), workers=3))
    assert a.files == b.files
    assert a.dataset_digest == b.dataset_digest
    assert "metrics.json" in a.files
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert metrics and all(np.isfinite(m["value"]) for m in metrics.values())


def test_masking_factor_zero_equals_clean_accuracy(tmp_path, ckpts):
    cfg = load_experiment(_config(tmp_path, ckpts, "masking"))
    run(cfg)
    header, rows = read_csv(tmp_path / "out" / "masking.csv")
    ds = load_dataset(cfg.dataset)
    from robustlens.models import ModelCheckpoint

    for col, name in enumerate(header[1:], start=1):
        ck = ModelCheckpoint.load(ckpts[name])
        clean = 100.0 * np.mean(np.argmax(ck.predict_logits(ds.images), 1) == ds.labels)
        assert float(rows[0][col]) == clean


def test_corruption_suite_model_equal_to_baseline_is_100(tmp_path, ckpts):
    p = _config(tmp_path, ckpts, "corruption_suite", models=("cnn",))
    p.write_text(p.read_text().replace("[models]\n", f"[models]\nbaseline = {ckpts['cnn']}\n"))
    p.write_text(p.read_text().replace("severities = 1, 5", "severities = 5"))
    run(load_experiment(p))
    metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert metrics["cnn/mCE"]["value"] == pytest.approx(100.0)


def test_background_requires_masks(tmp_path, ckpts):
    ds = synth_dataset(3, 2, 8, seed=0)
    ds = type(ds)(ds.images, ds.labels)
    save_directory(ds, tmp_path / "plain")
    p = _config(tmp_path, ckpts, "background", dataset=f"source = {tmp_path / 'plain'}")
    with pytest.raises(Exception):
        run(load_experiment(p))


# ------------------------------------------------------------------- compare


def test_compare_self_has_zero_deltas(tmp_path, ckpts):
    cfg = load_experiment(_config(tmp_path, ckpts, "masking", models=("cnn",)))
    run(cfg)
    rows = compare(tmp_path / "out", tmp_path / "out" / "manifest.json")
    assert rows and all(r.delta == 0 for r in rows)


def test_delta_sign_convention():
    # positive delta means A is better
    assert delta(90.0, 80.0, True) == 10.0
    assert delta(40.0, 50.0, False) == 10.0


def test_compare_rejects_different_kinds(tmp_path, ckpts):
    run(load_experiment(_config(tmp_path, ckpts, "masking", models=("cnn",)), out=str(tmp_path / "m")))
    run(load_experiment(_config(tmp_path, ckpts, "fourier", models=("cnn",)), out=str(tmp_path / "f")))
    with pytest.raises(ValueError):
        compare(tmp_path / "m", tmp_path / "f")


# ----------------------------------------------------------------------- cli


def test_cli_exit_codes(tmp_path, ckpts, capsys):
    good = _config(tmp_path, ckpts, "masking", models=("cnn",))
    assert main(["run", "--config", str(good), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "manifest.json").exists()
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 1
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 1
    # a corrupt checkpoint file is a configuration error
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    p = _config(tmp_path, {"cnn": bad}, "masking", models=("cnn",))
    assert main(["run", "--config", str(p)]) == 1
    # a dataset that does not match the model input is a runtime/config failure, never success
    p = _config(tmp_path, ckpts, "masking", models=("cnn",), dataset="source = synthetic\nclasses = 3\nsamples_per_class = 2\nimage_size = 16")
    assert main(["run", "--config", str(p)]) in (1, 2)


def test_cli_runtime_error_exit_code_two(tmp_path, ckpts):
    p = _config(tmp_path, ckpts, "fourier", models=("cnn",))
    p.write_text(p.read_text().replace("epsilon = 2.0", "epsilon = nan"))
    assert main(["run", "--config", str(p)]) in (1, 2)


def test_cli_train_synth_inspect_compare(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "data"), "--classes", "3", "--samples-per-class", "3", "--image-size", "8"]) == 0
    assert (tmp_path / "data" / "labels.csv").exists()
    cfg = tmp_path / "train.ini"
    cfg.write_text(
        f"[train]\nmodel = cnn\nseed = 0\nepochs = 1\nbatch_size = 3\nout = {tmp_path / 'm.ckpt'}\n"
        f"[model]\nwidths = 4, 8\nblocks_per_stage = 1\ngroups = 2\n[dataset]\nsource = {tmp_path / 'data'}\n"
    )
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["inspect", str(tmp_path / "m.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "cnn" in out
    cfg.write_text(cfg.read_text().replace("groups = 2", "groups = 3"))
    assert main(["train", "--config", str(cfg)]) == 1
    exp = tmp_path / "exp.ini"
    exp.write_text(
        f"[experiment]\nkind = masking\nseed = 0\nout = {tmp_path / 'run'}\n[models]\nm = {tmp_path / 'm.ckpt'}\n"
        f"[dataset]\nsource = {tmp_path / 'data'}\n[params]\nfactors = 0, 0.5\n"
    )
    assert main(["run", "--config", str(exp)]) == 0
    assert main(["compare", str(tmp_path / "run"), str(tmp_path / "run"), "--out", str(tmp_path / "cmp")]) == 0
    assert (tmp_path / "cmp" / "comparison.csv").exists()


def test_workers_env_fallback(tmp_path, ckpts, monkeypatch):
    monkeypatch.setenv("ROBUSTLENS_WORKERS", "two")
    assert main(["run", "--config", str(_config(tmp_path, ckpts, "masking", models=("cnn",)))]) == 1
    monkeypatch.setenv("ROBUSTLENS_WORKERS", "2")
    assert main(["run", "--config", str(_config(tmp_path, ckpts, "masking", models=("cnn",)))]) == 0


# ------------------------------------------------------------ shipped configs

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_shipped_configs_parse(tmp_path):
    import shutil

    from robustlens.harness.config import load_training

    for name in ("train_vit.ini", "train_cnn.ini"):
        assert load_training(CONFIGS / name).epochs == 30
    shutil.copytree(CONFIGS, tmp_path / "configs")
    (tmp_path / "runs").mkdir()
    for m in ("vit", "cnn"):
        (tmp_path / "runs" / f"{m}.ckpt").write_bytes(b"")
    kinds = set()
    for ini in sorted((tmp_path / "configs" / "experiments").glob("*.ini")):
        kinds.add(load_experiment(ini).kind)
    assert kinds == set(EXPERIMENT_KINDS)
