"""Train the small profile for a few hundred steps, then use it as a codec.

Takes about a minute on one CPU core.

    python demos/03_train_and_decode.py [iterations]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from consistency_ae.audio import Waveform
from consistency_ae.checkpoint import latest_checkpoint
from consistency_ae.codec import Codec, DecodeOptions, LatentSequence
from consistency_ae.config import toy_config
from consistency_ae.dataio import ArrayDataset, synthetic_clips
from consistency_ae.training import build_model, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = toy_config()
sr = cfg.audio.sample_rate
print(f"toy profile: {sr} Hz, hop {cfg.audio.hop}, {cfg.samples_per_latent} samples per latent, d_lat {cfg.model.d_lat}")

clips = synthetic_clips(4, cfg.audio.chunk_len, sr, seed=0)
data = ArrayDataset(clips, cfg.audio.chunk_len)
out = Path(tempfile.mkdtemp()) / "ckpt"


def progress(state, info):
    if state.k % 50 == 0:
        print(f"  iter {state.k:5d}  loss {info.loss:8.4f}  max sigma {info.sigma_hi.max():7.3f}  lr {info.lr:.2e}")


# checkpoints land every checkpoint_every steps and at the stop point
state = train(cfg, data, out, stop_at=iterations, callback=progress)
path = latest_checkpoint(out)
print("checkpoint:", path.name)

# the codec loads EMA weights by default
codec = Codec.from_checkpoint(path)
untrained = Codec(build_model(cfg), cfg)
w = Waveform(clips[0], sr)
lat = codec.encode_waveform(w)
print("latents:", lat.data.shape, "range", float(lat.data.min()), float(lat.data.max()))

for n in (1, 2, 4):
    opts = DecodeOptions(n_steps=n, seed=0)
    _, trained_scores = codec.roundtrip(w, opts)
    _, base_scores = untrained.roundtrip(w, opts)
    print(f"{n} step(s): LSD {trained_scores['lsd_db']:6.2f} dB (untrained {base_scores['lsd_db']:6.2f} dB)")

# latents serialize to a small binary file; the model hop is needed to read them back
blob = lat.to_bytes()
covered = lat.n_frames * cfg.samples_per_latent  # a partial trailing latent is not encoded
print(f"latent file: {len(blob)} bytes for {covered} samples ({covered * 2 / len(blob):.1f}x smaller than 16-bit PCM)")
again = LatentSequence.from_bytes(blob, cfg.audio.hop)
a = codec.decode_latents(again, DecodeOptions(2, seed=5)).samples
b = codec.decode_latents(again, DecodeOptions(2, seed=5)).samples
print("same seed, same audio:", np.array_equal(a, b))
