import hashlib
import json

import numpy as np
import pytest

from compnet import cli, functional, pnm, render
from compnet.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, RunConfig, main
from compnet.models import NetworkConfig
from compnet.train import TrainConfig


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def small_config(tmp_path, variant="plain-unet", **net):
    net = {"width_scale": 0.125, "levels": 3, "dense_layers": [2, 2, 2], "growth_filters": 3, **net}
    cfg = RunConfig(network=NetworkConfig(variant, **net), train=TrainConfig(epochs=1, batch_size=2), n_per_fold=2)
    path = tmp_path / f"{variant}.json"
    path.write_text(cfg.dumps())
    return path


# ------------------------------------------------------------------- config

def test_run_config_round_trip():
    cfg = RunConfig(network=NetworkConfig("prob-compnet", width_scale=0.125, gate_levels=(True, False, True, True)),
                    n_per_fold=7, eval_mode="per_slice")
    assert RunConfig.loads(cfg.dumps()) == cfg


@pytest.mark.parametrize("text", [
    '{"epochs": 3}',
    '{"train": {"learning_rate": 0.001, "momentum": 0.9}}',
    '{"network": {"variant": "resnet"}}',
    '{"n_per_fold": 0}',
    '{"eval_rendering": "noisy"}',
    '[1, 2]',
    'not json',
])
def test_run_config_rejects_bad_documents(text):
    with pytest.raises(cli.ConfigError):
        RunConfig.loads(text)


def test_exit_codes(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "missing.json")]) == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text('{"surprise": 1}')
    assert main(["gen-data", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["train", "--variant", "resnet"]) == EXIT_CONFIG
    assert main(["gen-data", "--n", "0", "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert main(["eval", "--out", str(tmp_path)]) == EXIT_CONFIG  # no checkpoint given
    junk = tmp_path / "junk.cmpn"
    junk.write_bytes(b"nope")
    assert main(["eval", "--checkpoint", str(junk), "--n", "1"]) == EXIT_IO
    assert "error" in capsys.readouterr().err


def test_bad_thread_setting(monkeypatch):
    monkeypatch.setenv("COMPNET_THREADS", "zero")
    assert main(["gradcheck", "--n-params", "1"]) == EXIT_CONFIG
    monkeypatch.setenv("COMPNET_THREADS", "0")
    assert main(["gradcheck", "--n-params", "1"]) == EXIT_CONFIG


def test_thread_limit_is_applied(monkeypatch):
    from threadpoolctl import threadpool_info

    seen = {}

    def spy(cfg, args):
        seen["threads"] = [pool["num_threads"] for pool in threadpool_info()]
        return 0

    monkeypatch.setitem(cli.COMMANDS, "gradcheck", spy)
    monkeypatch.setenv("COMPNET_THREADS", "1")
    assert main(["gradcheck"]) == 0
    assert all(n == 1 for n in seen["threads"])


# ----------------------------------------------------------------- gen-data

def test_gen_data_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--n", "3", "--seed", "4", "--out", str(tmp_path / name)]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    assert main(["gen-data", "--n", "3", "--seed", "5", "--out", str(tmp_path / "c")]) == 0
    assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "c")
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "fold\trendering\tsamples"
    assert "1\tpathological\t3" in out


# ------------------------------------------------------- train / eval / predict

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    runs = {}
    for variant in ("plain-unet", "optimal-compnet"):
        cfg = small_config(root, variant)
        out = root / variant
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        runs[variant] = out
    return runs


def test_train_writes_artifacts(trained):
    out = trained["optimal-compnet"]
    assert {p.name for p in out.iterdir()} == {"checkpoint.cmpn", "loss.csv", "run_config.json", "loss.png"}
    assert json.loads((out / "run_config.json").read_text())["network"]["variant"] == "optimal-compnet"
    assert (out / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_eval_metrics_csv_is_deterministic(trained, tmp_path, capsys):
    ckpt = str(trained["optimal-compnet"] / "checkpoint.cmpn")
    for name in ("a", "b"):
        assert main(["eval", "--checkpoint", ckpt, "--n", "2", "--out", str(tmp_path / name)]) == 0
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b
    lines = a.decode().splitlines()
    assert len(lines) == 1 + 2 + 2  # header, two samples, mean, std
    assert capsys.readouterr().out.startswith("set\tn\tdice_mean")


def _write_input(path, depth):
    rng = np.random.default_rng(0)
    vol = (rng.random((depth, 16, 16)) * 255).astype(np.uint8)
    pnm.write_pgm(path, vol if depth > 1 else vol[0])
    return path


def test_predict_unet_writes_only_segmentation(trained, tmp_path):
    img = _write_input(tmp_path / "in.pgm", 1)
    out = tmp_path / "p"
    assert main(["predict", "--checkpoint", str(trained["plain-unet"] / "checkpoint.cmpn"),
                 "--input", str(img), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"seg.pgm", "outputs.png"}
    seg = pnm.read_pgm(out / "seg.pgm")
    assert seg.shape == (16, 16) and set(np.unique(seg)) <= {0, 255}


def test_predict_volume_keeps_depth(trained, tmp_path):
    img = _write_input(tmp_path / "vol.pgm", 4)
    out = tmp_path / "p"
    assert main(["predict", "--checkpoint", str(trained["optimal-compnet"] / "checkpoint.cmpn"),
                 "--input", str(img), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"seg.pgm", "comp.pgm", "recon.pgm", "outputs.png"}
    for name in ("seg.pgm", "comp.pgm", "recon.pgm"):
        assert pnm.read_pgm(out / name, stack=True).shape == (4, 16, 16)


def test_predict_rejects_incompatible_input(trained, tmp_path):
    pnm.write_pgm(tmp_path / "odd.pgm", np.zeros((10, 10), np.uint8))
    assert main(["predict", "--checkpoint", str(trained["plain-unet"] / "checkpoint.cmpn"),
                 "--input", str(tmp_path / "odd.pgm"), "--out", str(tmp_path)]) == EXIT_IO


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--n-params", "20"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "model[optimal-compnet] x20" in out


def test_gradcheck_catches_a_broken_backward(monkeypatch, capsys):
    real = functional._conv2d_backward

    def flipped(*args):
        dx, dw, db = real(*args)
        return (None if dx is None else -dx), dw, db

    monkeypatch.setattr(functional, "_conv2d_backward", flipped)
    assert main(["gradcheck", "--n-params", "20"]) == EXIT_NUMERICAL
    captured = capsys.readouterr()
    assert "FAIL" in captured.out and "gradcheck failed" in captured.err


# ------------------------------------------------------------------ overlay

def test_overlay_colors(tmp_path, capsys):
    image = np.full((4, 4), 100, np.uint8)
    truth = np.zeros((4, 4), np.uint8)
    pred = np.zeros((4, 4), np.uint8)
    truth[0, :2] = 255
    pred[0, 1:3] = 255
    for name, arr in (("i", image), ("t", truth), ("p", pred)):
        pnm.write_pgm(tmp_path / f"{name}.pgm", arr)
    out = tmp_path / "o.ppm"
    assert main(["overlay", "--image", str(tmp_path / "i.pgm"), "--true", str(tmp_path / "t.pgm"),
                 "--pred", str(tmp_path / "p.pgm"), "--output", str(out)]) == 0
    rgb = pnm.read_ppm(out)
    assert tuple(rgb[0, 0]) == render.RED
    assert tuple(rgb[0, 1]) == render.PURPLE
    assert tuple(rgb[0, 2]) == render.BLUE
    assert tuple(rgb[3, 3]) == (100, 100, 100)
    assert capsys.readouterr().out.splitlines()[1] == "16\t1\t1\t1"


def test_overlay_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        render.overlay_rgb(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 5)))


def test_figures_are_reproducible(tmp_path):
    from compnet.train import EpochStats

    history = [EpochStats(i + 1, -0.5 - 0.1 * i, -0.6, 0.1, 0.01) for i in range(3)]
    render.plot_loss_curve(tmp_path / "a.png", history, "loss")
    render.plot_loss_curve(tmp_path / "b.png", history, "loss")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
