import json
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from consistency_ae.audio import Waveform, write_wav  # noqa: E402
from consistency_ae.checkpoint import latest_checkpoint  # noqa: E402
from consistency_ae.cli import main  # noqa: E402
from consistency_ae.config import toy_config  # noqa: E402
from consistency_ae.dataio import synthetic_clips  # noqa: E402
from consistency_ae.training import read_loss_log  # noqa: E402


def write_toy_corpus(directory: Path, n: int = 4, seed: int = 0) -> list[np.ndarray]:
    """Four one-chunk clips as float WAV files; returns the clips."""
    cfg = toy_config()
    clips = synthetic_clips(n, cfg.audio.chunk_len, cfg.audio.sample_rate, seed=seed)
    directory.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(clips):
        write_wav(directory / f"clip{i}.wav", Waveform(c, cfg.audio.sample_rate))
    return clips


def write_toy_config(path: Path, **overrides) -> Path:
    doc = {"profile": "toy", **overrides}
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The toy overfit run: 4 clips, toy profile, full schedule, via the CLI."""
    root = tmp_path_factory.mktemp("overfit")
    clips = write_toy_corpus(root / "data")
    config = write_toy_config(root / "toy.json")
    start = time.perf_counter()
    code = main(["train", "--config", str(config), "--data", str(root / "data"), "--out", str(root / "ckpt"), "--log-every", "500"])
    elapsed = time.perf_counter() - start
    assert code == 0
    return {
        "root": root,
        "data": root / "data",
        "config": config,
        "ckpt_dir": root / "ckpt",
        "checkpoint": latest_checkpoint(root / "ckpt"),
        "clips": clips,
        "log": read_loss_log(root / "ckpt" / "loss_log.csv"),
        "seconds": elapsed,
    }
