import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from dasheng_mae import trainer
from dasheng_mae.checkpoint import load_checkpoint
from dasheng_mae.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from dasheng_mae.embedder import read_archive
from dasheng_mae.synth import write_corpus


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("clips")
    # five clips: 2 sweeps, 2 squares, 1 noise
    write_corpus(d, kinds=("sweep", "square", "noise"), per_kind=2, seconds=2.0, seed=4)
    lines = (d / "manifest.jsonl").read_text().splitlines()[:5]
    (d / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return d


def small_config(path, **kw):
    cfg = dict(preset="tiny", epochs=2, batch_size=2, batches_per_epoch=2, warmup_epochs=1, crop_seconds=2.0)
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return str(path)


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "eval-knn" in capsys.readouterr().out


def test_subcommand_help(capsys):
    assert main(["train", "--help"]) == EXIT_OK
    assert "--config" in capsys.readouterr().out


def test_missing_ckpt_is_usage_error(capsys):
    assert main(["embed", "--manifest", "m.jsonl", "--out", "e.bin"]) == EXIT_USAGE
    assert "--ckpt" in capsys.readouterr().err


def test_unknown_flag_rejected():
    assert main(["inspect-ckpt", "--ckpt", "x", "--bogus"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_eval_without_test_or_folds(tmp_path, capsys):
    assert main(["eval-knn", "--train", "a", "--train-labels", "b"]) == EXIT_USAGE


def test_bad_config_key_is_data_error(data, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"epochz": 3}')
    rc = main(["train", "--config", str(cfg), "--train", str(data / "manifest.jsonl"), "--out", str(tmp_path / "o")])
    assert rc == EXIT_DATA
    assert "epochz" in capsys.readouterr().err


def test_bad_checkpoint_is_data_error(tmp_path, capsys):
    p = tmp_path / "x.dshg"
    p.write_bytes(b"nope")
    assert main(["inspect-ckpt", "--ckpt", str(p)]) == EXIT_DATA
    assert "truncated" in capsys.readouterr().err


def test_numerical_abort_exit_code(data, tmp_path, monkeypatch):
    real = trainer.batch_features
    monkeypatch.setattr(trainer, "batch_features", lambda w: real(w) * np.nan)
    rc = main(["train", "--config", small_config(tmp_path / "c.json"), "--train", str(data / "manifest.jsonl"),
               "--out", str(tmp_path / "run")])
    assert rc == EXIT_NUMERICAL
    assert (tmp_path / "run" / "epoch_000.dshg").exists()


def test_end_to_end_smoke(data, tmp_path, capsys):
    t0 = time.perf_counter()
    cfg = small_config(tmp_path / "c.json")
    manifest, labels = str(data / "manifest.jsonl"), str(data / "labels.jsonl")
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--train", manifest, "--val", manifest, "--out", str(run)]) == EXIT_OK
    err = capsys.readouterr().err
    assert '"resolved_model"' in err  # resolved config is printed
    log = [json.loads(x) for x in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0, 1, 2]

    ckpt = str(run / "epoch_002.dshg")
    assert main(["embed", "--ckpt", ckpt, "--manifest", manifest, "--out", str(tmp_path / "e.bin")]) == EXIT_OK
    assert main(["embed", "--ckpt", ckpt, "--manifest", manifest, "--out", str(tmp_path / "p.bin"), "--pooled"]) == EXIT_OK
    recs = read_archive(tmp_path / "e.bin")
    assert len(recs) == 5 and all(r.values.shape == (50, 64) for r in recs)
    assert all(r.values.shape == (1, 64) for r in read_archive(tmp_path / "p.bin"))

    report = tmp_path / "knn.json"
    assert main(["eval-knn", "--train", str(tmp_path / "e.bin"), "--train-labels", labels,
                 "--test", str(tmp_path / "p.bin"), "--test-labels", labels, "--k", "3", "--out", str(report)]) == EXIT_OK
    rep = json.loads(report.read_text())
    assert rep["n"] == 5 and 0.0 <= rep["accuracy"] <= 1.0

    folds = tmp_path / "folds.json"
    assert main(["eval-knn", "--train", str(tmp_path / "e.bin"), "--train-labels", labels, "--folds", "2",
                 "--k", "1", "--out", str(folds)]) == EXIT_OK
    assert len(json.loads(folds.read_text())["folds"]) == 2

    probe = tmp_path / "probe.json"
    assert main(["eval-probe", "--train", str(tmp_path / "e.bin"), "--train-labels", labels,
                 "--test", str(tmp_path / "e.bin"), "--test-labels", labels, "--kind", "linear",
                 "--epochs", "5", "--out", str(probe)]) == EXIT_OK
    assert json.loads(probe.read_text())["params"]["kind"] == "linear"

    assert main(["inspect-ckpt", "--ckpt", ckpt]) == EXIT_OK
    assert "patch_embed.weight" in capsys.readouterr().err
    assert time.perf_counter() - t0 < 60


def test_outputs_byte_identical_on_rerun(data, tmp_path):
    cfg = small_config(tmp_path / "c.json", epochs=1)
    manifest = str(data / "manifest.jsonl")
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--train", manifest, "--out", str(tmp_path / name)]) == EXIT_OK
        assert main(["embed", "--ckpt", str(tmp_path / name / "epoch_001.dshg"), "--manifest", manifest,
                     "--out", str(tmp_path / f"{name}.bin")]) == EXIT_OK
    for f in ("epoch_000.dshg", "epoch_001.dshg", "train_log.jsonl", "steps.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert sorted(os.listdir(tmp_path / "a")) == ["epoch_000.dshg", "epoch_001.dshg", "steps.jsonl", "train_log.jsonl"]


def test_preset_flag_overrides_config(data, tmp_path, capsys):
    cfg = small_config(tmp_path / "c.json", epochs=0, model={"depth": 1, "embed_dim": 16, "mlp_dim": 16, "num_heads": 1,
                                                             "decoder": {"depth": 1, "embed_dim": 16, "mlp_dim": 16, "num_heads": 1}})
    assert main(["train", "--config", cfg, "--train", str(data / "manifest.jsonl"), "--out", str(tmp_path / "r")]) == EXIT_OK
    assert load_checkpoint(tmp_path / "r" / "epoch_000.dshg").metadata["model"]["embed_dim"] == 16
    assert main(["train", "--config", cfg, "--preset", "tiny", "--train", str(data / "manifest.jsonl"),
                 "--out", str(tmp_path / "s")]) == EXIT_OK
    assert load_checkpoint(tmp_path / "s" / "epoch_000.dshg").metadata["model"]["embed_dim"] == 64


def test_features_dump(data, tmp_path):
    out = tmp_path / "mel.dshg"
    assert main(["features", "--in", str(data / "sweep_0000.wav"), "--out", str(out)]) == EXIT_OK
    ck = load_checkpoint(out)
    assert ck.tensors["logmel"].shape == (201, 64)
    assert ck.metadata["n_frames"] == ck.metadata["expected_frames"] == 201


def test_console_script_and_threads_env(tmp_path):
    env = dict(os.environ, DASHENG_THREADS="1")
    r = subprocess.run([sys.executable, "-m", "dasheng_mae", "--help"], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and "inspect-ckpt" in r.stdout
    r = subprocess.run([sys.executable, "-m", "dasheng_mae", "embed"], capture_output=True, text=True, env=env)
    assert r.returncode == EXIT_USAGE and r.stdout == ""
