import warnings

import numpy as np
import pytest

from aeseg.bayesinfer import read_raster
from aeseg.chipdata import ChipClass, EmbeddingChip, read_manifest
from aeseg.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from aeseg.images import read_pnm, render_pseudo_rgb
from aeseg.metrics import ROWS, parse_report

SYNTH = ["--chips", "40", "--height", "16", "--width", "16", "--edge-mix", "1", "--margin", "1", "--region", "30000"]


def _same_tree(a, b):
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    return True


def test_synth_gen_rerun_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(["synth-gen", *SYNTH, "--seed", "7", "--out", str(tmp_path / d)]) == EXIT_OK
    assert "synth-gen: wrote 40 chips" in capsys.readouterr().out
    assert _same_tree(tmp_path / "a", tmp_path / "b")
    assert len(list((tmp_path / "a" / "chips").glob("*.aechip"))) == 40


@pytest.mark.parametrize(
    "argv",
    [
        ["predict", "--passes", "0"],
        ["predict", "--passes", "-3"],
        ["train", "--epochs", "x"],
        ["split", "--ratios", "0.5,0.5"],
        ["frobnicate"],
        [],
    ],
)
def test_usage_errors(argv, capsys):
    assert run(argv) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_data_errors(tmp_path, capsys):
    assert run(["split", "--manifest", str(tmp_path / "missing.tsv")]) == EXIT_DATA
    (tmp_path / "bad.tsv").write_text("not a manifest\n")
    assert run(["train", "--manifest", str(tmp_path / "bad.tsv")]) == EXIT_DATA
    assert capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds, out = root / "ds", root / "run"
    assert run(["synth-gen", *SYNTH, "--seed", "3", "--out", str(ds)]) == EXIT_OK
    assert run(["split", "--manifest", str(ds / "manifest.tsv"), "--seed", "1", "--out", str(root / "split")]) == EXIT_OK
    man = str(root / "split" / "manifest.tsv")
    train = ["train", "--manifest", man, "--epochs", "2", "--batch-size", "8", "--base-width", "4", "--depth", "2"]
    assert run([*train, "--out", str(out)]) == EXIT_OK
    assert run(["eval", "--manifest", man, "--checkpoint", str(out / "checkpoint.aeunet"), "--out", str(out)]) == EXIT_OK
    pred = ["predict", "--manifest", man, "--checkpoint", str(out / "checkpoint.aeunet"), "--passes", "5"]
    assert run([*pred, "--out", str(out / "pred")]) == EXIT_OK
    assert run(["report", "--manifest", man, "--predictions", str(out / "pred"), "--out", str(out)]) == EXIT_OK
    return root, man, train, pred


def test_pipeline_outputs(pipeline):
    root, man, _, _ = pipeline
    out = root / "run"
    assert (out / "history.tsv").read_text().count("\n") == 3
    table = (out / "metrics_test.txt").read_text()
    for _, label in ROWS:
        assert label in table
    test_ids = [e.chip_id for e in read_manifest(man).subset("test").entries]
    assert test_ids
    for cid in test_ids:
        for suffix in (".mean.aeras", ".var.aeras", ".mean.pgm", ".var.pgm", ".rgb.ppm"):
            assert (out / "pred" / f"{cid}{suffix}").exists()
        var, valid = read_raster(out / "pred" / f"{cid}.var.aeras")
        assert np.all((var >= 0) & (var <= 0.25))
        assert read_pnm(out / "pred" / f"{cid}.var.pgm").shape == valid.shape
    rows = (out / "pred" / "uncertainty.tsv").read_text().splitlines()
    assert len(rows) == len(test_ids) + 1
    rep = parse_report((out / "report_test.txt").read_text())
    assert rep["n_chips"] == len(test_ids)
    assert 0 <= rep["edge_gt_interior_fraction"] <= 1


def test_pipeline_rerun_identical(pipeline, tmp_path):
    root, man, train, pred = pipeline
    assert run([*train, "--out", str(tmp_path)]) == EXIT_OK
    for name in ("checkpoint.aeunet", "history.tsv"):
        assert (tmp_path / name).read_bytes() == (root / "run" / name).read_bytes()
    assert run([*pred, "--out", str(tmp_path / "pred")]) == EXIT_OK
    assert _same_tree(root / "run" / "pred", tmp_path / "pred")


def test_predict_chip_selection(pipeline, tmp_path):
    root, man, _, pred = pipeline
    cid = read_manifest(man).entries[0].chip_id
    assert run([*pred, "--chip", cid, "--out", str(tmp_path)]) == EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir() if p.suffix == ".aeras") == [f"{cid}.mean.aeras", f"{cid}.var.aeras"]
    assert run([*pred, "--chip", "nope", "--out", str(tmp_path)]) == EXIT_DATA
    assert run([*pred, "--bands", "0,1,64", "--chip", cid, "--out", str(tmp_path)]) == EXIT_DATA


def test_numerical_failure_exit_code(pipeline, tmp_path, capsys):
    _, _, train, _ = pipeline
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        code = run([*train, "--lr", "1e12", "--out", str(tmp_path)])
    assert code == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


def _chip(bands):
    bands = np.asarray(bands, np.float32)
    return EmbeddingChip(bands, np.ones(bands.shape[1:], bool), "x", ChipClass.TOMATO)


def test_pseudo_rgb():
    assert np.all(render_pseudo_rgb(_chip(np.zeros((64, 3, 4)))) == 128)
    b = np.zeros((64, 1, 2))
    b[0] = -1
    b[1] = 1
    rgb = render_pseudo_rgb(_chip(b))
    assert rgb[0, 0].tolist() == [0, 255, 128]
    b = np.random.default_rng(0).uniform(-1, 1, (64, 5, 5))
    grey = render_pseudo_rgb(_chip(b), (5, 5, 5))
    assert np.array_equal(grey[..., 0], grey[..., 1]) and np.array_equal(grey[..., 1], grey[..., 2])
    with pytest.raises(ValueError, match="out of range"):
        render_pseudo_rgb(_chip(b), (0, 1, 64))
