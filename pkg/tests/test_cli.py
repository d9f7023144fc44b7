import json

import numpy as np
import pytest

from consistency_ae.audio import Waveform, read_wav, write_wav
from consistency_ae.cli import CHECKPOINT_ENV, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from consistency_ae.config import load_config, toy_config
from consistency_ae.network import count_parameters

from conftest import write_toy_config, write_toy_corpus


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_toy_corpus(root / "data")
    config = write_toy_config(root / "toy.json", train={"checkpoint_every": 5})
    code = main(["train", "--config", str(config), "--data", str(root / "data"), "--out", str(root / "ckpt"), "--stop-at", "5"])
    assert code == EXIT_OK
    return root


def _wav(path, n, seed=0):
    cfg = toy_config()
    x = 0.2 * np.random.default_rng(seed).standard_normal(n)
    write_wav(path, Waveform(x, cfg.audio.sample_rate))
    return path


def test_init_config_roundtrip(tmp_path):
    out = tmp_path / "c.json"
    assert main(["init-config", str(out), "--profile", "toy"]) == EXIT_OK
    assert load_config(out) == toy_config()
    assert main(["init-config", str(out), "--profile", "toy"]) == EXIT_USAGE  # exists, no --force
    assert main(["init-config", str(out), "--profile", "full", "--force"]) == EXIT_OK


def test_malformed_config_names_the_key(tmp_path, capsys):
    bad = write_toy_config(tmp_path / "bad.json", optim={"learning_rate": 1.0})
    code = main(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE
    assert "optim.learning_rate" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["encode"]) == EXIT_USAGE
    assert main(["decode", "a", "b", "--steps", "many"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_inspect_reports_parameter_count(trained, capsys):
    assert main(["inspect", str(trained / "ckpt"), "--compact"]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["iteration"] == 5 and info["has_ema"]
    assert info["parameters"] == count_parameters(toy_config().model) == info["stored_parameters"]


def test_train_refuses_existing_run(trained):
    args = ["train", "--config", str(trained / "toy.json"), "--data", str(trained / "data"), "--out", str(trained / "ckpt")]
    assert main(args + ["--stop-at", "5"]) == EXIT_USAGE


def test_encode_decode_roundtrip(trained, tmp_path):
    per = toy_config().samples_per_latent
    src = _wav(tmp_path / "in.wav", 5 * per)
    ck = ["-c", str(trained / "ckpt")]
    assert main(["encode", str(src), str(tmp_path / "a.l2la")] + ck) == EXIT_OK
    assert main(["decode", str(tmp_path / "a.l2la"), str(tmp_path / "a.wav"), "--seed", "3"] + ck) == EXIT_OK
    assert main(["decode", str(tmp_path / "a.l2la"), str(tmp_path / "b.wav"), "--seed", "3"] + ck) == EXIT_OK
    out = read_wav(tmp_path / "a.wav")
    assert len(out) == 5 * per
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    # outputs are not overwritten without --force
    assert main(["encode", str(src), str(tmp_path / "a.l2la")] + ck) == EXIT_USAGE
    assert main(["encode", str(src), str(tmp_path / "a.l2la"), "--force"] + ck) == EXIT_OK


def test_decode_rejects_foreign_file(trained, tmp_path, capsys):
    bogus = tmp_path / "x.l2la"
    bogus.write_bytes(b"RIFF" + bytes(40))
    code = main(["decode", str(bogus), str(tmp_path / "x.wav"), "-c", str(trained / "ckpt")])
    assert code != EXIT_OK
    assert "magic" in capsys.readouterr().err
    assert not (tmp_path / "x.wav").exists()


def test_roundtrip_prints_scores(trained, tmp_path, capsys):
    src = _wav(tmp_path / "in.wav", toy_config().audio.chunk_len)
    assert main(["roundtrip", str(src), "-c", str(trained / "ckpt")]) == EXIT_OK
    line = json.loads(capsys.readouterr().out)
    assert set(line) >= {"si_sdr_db", "lsd_db", "config_hash"}


def test_eval_identical_dirs_is_clamped(tmp_path, capsys):
    ref = tmp_path / "ref"
    ref.mkdir()
    for i in range(3):
        _wav(ref / f"f{i}.wav", 2000, seed=i)
    report = tmp_path / "r.jsonl"
    assert main(["eval", str(ref), str(report), "--est-dir", str(ref)]) == EXIT_OK
    agg = json.loads(capsys.readouterr().out)
    assert agg["si_sdr_db"] == 100.0
    rows = [json.loads(line) for line in report.read_text().splitlines()]
    assert len(rows) >= 3


def test_missing_checkpoint_is_clear(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(CHECKPOINT_ENV, str(tmp_path / "nowhere"))
    src = _wav(tmp_path / "in.wav", 1000)
    assert main(["encode", str(src), str(tmp_path / "o.l2la")]) == EXIT_DATA
    assert "checkpoint" in capsys.readouterr().err.lower()


def test_checkpoint_dir_from_environment(trained, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(CHECKPOINT_ENV, str(trained / "ckpt"))
    assert main(["inspect", "--compact"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["iteration"] == 5


def test_unreadable_audio_names_the_file(trained, tmp_path, capsys):
    bad = tmp_path / "song.mp3"
    bad.write_bytes(b"ID3\x03" + bytes(60))
    assert main(["encode", str(bad), str(tmp_path / "o.l2la"), "-c", str(trained / "ckpt")]) == EXIT_DATA
    assert "song.mp3" in capsys.readouterr().err
