import json
import os

import numpy as np
import pytest

from patch2img.cli import EXIT_CODES, main
from patch2img.imaging import load_samples
from patch2img.synthetic import write_vessel_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = write_vessel_dataset(root / "raw", n=6, size=(64, 64), seed=3, n_test=2)
    assert main(["prepare", manifest, "--out", str(root / "data")]) == 0
    assert main(["extract-patches", str(root / "data"), "--out", str(root / "patches"),
                 "--patch-size", "32", "--stride", "16"]) == 0
    assert main(["train", "--mode", "patch", "--family", "light", "--data", str(root / "patches"),
                 "--out", str(root / "fp"), "--max-epochs", "2", "--batch-size", "8"]) == 0
    return root, manifest


def _load(path):
    with open(path) as fh:
        return json.load(fh)


def test_prepare_cache_and_provenance(workdir, capsys):
    root, manifest = workdir
    assert main(["prepare", manifest, "--out", str(root / "data")]) == 0
    assert "cache hit" in capsys.readouterr().out
    prov = _load(root / "data" / "provenance.json")
    assert prov["preprocess"]["gamma"] == 1.7
    assert prov["preprocess"]["clahe_clip"] == 2.0 and prov["preprocess"]["clahe_tiles"] == [8, 8]
    assert prov["splits"] == {"train": 4, "test": 2}
    assert len(load_samples(root / "data", "test")) == 2


def test_prepare_override_misses_cache(workdir, tmp_path, capsys):
    _, manifest = workdir
    out = str(tmp_path / "d")
    main(["prepare", manifest, "--out", out])
    capsys.readouterr()
    assert main(["prepare", manifest, "--out", out, "--gamma", "1.2"]) == 0
    assert "cache hit" not in capsys.readouterr().out
    assert _load(os.path.join(out, "provenance.json"))["preprocess"]["gamma"] == 1.2


def test_prepare_corrupt_image(tmp_path, capsys):
    manifest = write_vessel_dataset(tmp_path / "raw", n=3, size=(32, 32))
    bad = tmp_path / "raw" / "syn001.png"
    bad.write_bytes(b"not a png")
    assert main(["prepare", manifest, "--out", str(tmp_path / "d")]) == EXIT_CODES["io"]
    err = capsys.readouterr().err
    assert err.startswith("error[io]:") and "syn001.png" in err


def test_prepare_bad_resize(workdir, tmp_path, capsys):
    _, manifest = workdir
    code = main(["prepare", manifest, "--out", str(tmp_path / "d"), "--resize", "30", "32"])
    assert code == EXIT_CODES["value"]
    assert "multiples of 4" in capsys.readouterr().err


def test_patch_db_layout(workdir):
    root, _ = workdir
    run = _load(root / "patches" / "run.json")
    assert run["phase"] == 1
    assert run["extra"]["train"]["count"] == 3 * 9 and run["extra"]["val"]["count"] == 9
    assert not set(run["extra"]["train"]["images_ids"]) & set(run["extra"]["val"]["images_ids"])


def test_patch_training_outputs(workdir):
    root, _ = workdir
    run = _load(root / "fp" / "model.ckpt.json")
    assert run["phase"] == 2 and run["regime"] == "patch"
    assert len(_load(root / "fp" / "history.json")["history"]) == 3
    assert (root / "fp" / "spec.yaml").exists()


def test_default_batch_sizes(workdir, tmp_path):
    root, _ = workdir
    main(["train", "--mode", "patch", "--family", "light", "--data", str(root / "patches"),
          "--out", str(tmp_path / "p"), "--max-epochs", "1"])
    assert _load(tmp_path / "p" / "model.ckpt.json")["config"]["batch_size"] == 32
    main(["train", "--mode", "image", "--family", "light", "--data", str(root / "data"),
          "--out", str(tmp_path / "i"), "--max-epochs", "1"])
    run = _load(tmp_path / "i" / "model.ckpt.json")
    assert run["config"]["batch_size"] == 1 and run["regime"] == "image-scratch"


def test_transfer_finetune_eval(workdir, capsys):
    root, _ = workdir
    assert main(["transfer", str(root / "fp" / "model.ckpt"), "--out", str(root / "fi" / "model.ckpt")]) == 0
    a = (root / "fp" / "model.ckpt").read_bytes()
    assert (root / "fi" / "model.ckpt").read_bytes() == a
    assert _load(root / "fi" / "model.ckpt.json")["phase"] == 3

    assert main(["train", "--mode", "image", "--data", str(root / "data"), "--out", str(root / "ft"),
                 "--init", str(root / "fi" / "model.ckpt"), "--max-epochs", "2", "--lr0", "2e-4"]) == 0
    out = capsys.readouterr().out
    assert "epoch    1" in out and "epoch    2" in out
    run = _load(root / "ft" / "model.ckpt.json")
    assert run["phase"] == 4 and run["parent_phase"] == 3 and run["config"]["lr0"] == 2e-4

    assert main(["eval", str(root / "ft" / "model.ckpt"), "--data", str(root / "data"),
                 "--out", str(root / "ev")]) == 0
    m = _load(root / "ev" / "metrics.json")
    for key in ("auc", "spec", "sens", "acc", "dice", "jaccard", "auprc"):
        assert key in m and len(m["per_image"][key]) == 2
    assert m["tp"] + m["tn"] + m["fp"] + m["fn"] == 2 * 64 * 64
    assert sorted(os.listdir(root / "ev" / "maps")) == [
        "syn004_bin.png", "syn004_prob.png", "syn005_bin.png", "syn005_prob.png"]


def test_finetune_needs_lineage(workdir, tmp_path, capsys):
    root, _ = workdir
    ckpt = tmp_path / "orphan.ckpt"
    ckpt.write_bytes((root / "fp" / "model.ckpt").read_bytes())
    code = main(["train", "--mode", "image", "--family", "light", "--data", str(root / "data"),
                 "--out", str(tmp_path / "o"), "--init", str(ckpt), "--max-epochs", "1"])
    assert code == EXIT_CODES["spec"]
    assert capsys.readouterr().err.startswith("error[spec]:")


def test_spec_mismatch(workdir, tmp_path, capsys):
    root, _ = workdir
    code = main(["eval", str(root / "fp" / "model.ckpt"), "--family", "mini-unet",
                 "--data", str(root / "data"), "--out", str(tmp_path / "e")])
    assert code == EXIT_CODES["spec"]
    assert "error[spec]" in capsys.readouterr().err


def test_eval_fov_without_masks(workdir, tmp_path, capsys):
    root, _ = workdir
    code = main(["eval", str(root / "fp" / "model.ckpt"), "--data", str(root / "data"),
                 "--out", str(tmp_path / "e"), "--fov"])
    assert code == EXIT_CODES["value"] and "FOV" in capsys.readouterr().err


def test_eval_empty_split(workdir, tmp_path, capsys):
    root, _ = workdir
    code = main(["eval", str(root / "fp" / "model.ckpt"), "--data", str(root / "data"),
                 "--out", str(tmp_path / "e"), "--split", "val"])
    assert code == EXIT_CODES["value"] and "empty" in capsys.readouterr().err


def test_resume_matches_uninterrupted(workdir, tmp_path):
    root, _ = workdir
    base = ["--threads", "1", "train", "--mode", "patch", "--family", "light",
            "--data", str(root / "patches"), "--max-epochs", "3", "--batch-size", "8"]
    assert main(base + ["--out", str(tmp_path / "full")]) == 0
    assert main(base + ["--out", str(tmp_path / "part"), "--epochs", "1"]) == 0
    assert len(_load(tmp_path / "part" / "history.json")["history"]) == 2
    assert main(base + ["--out", str(tmp_path / "part"), "--resume"]) == 0
    assert (tmp_path / "part" / "model.ckpt").read_bytes() == (tmp_path / "full" / "model.ckpt").read_bytes()
    assert _load(tmp_path / "part" / "history.json") == _load(tmp_path / "full" / "history.json")


def test_bench_single_image(workdir, tmp_path, capsys):
    root, _ = workdir
    out = tmp_path / "bench.json"
    assert main(["bench", "--family", "light", "--data", str(root / "data"), "-n", "1",
                 "--patch-size", "32", "--stride", "16", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "cpus=" in text
    table = _load(out)
    assert len(table["rows"]) == 1 and table["rows"][0]["patches_per_image"] == 9


def test_info(workdir, capsys):
    root, _ = workdir
    assert main(["info", "--checkpoint", str(root / "fp" / "model.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "8889 parameters" in out and "matches light" in out


def test_threads_env(workdir, monkeypatch, capsys):
    monkeypatch.setenv("PATCH2IMG_THREADS", "1")
    assert main(["info", "--family", "light"]) == 0


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == EXIT_CODES["usage"]
    with pytest.raises(SystemExit):
        main([])
    assert main(["train", "--mode", "image", "--data", "x", "--out", "y"]) == EXIT_CODES["usage"]
