"""Waveform <-> latent codec built on a trained consistency autoencoder.

Latent file layout (little-endian, no padding)::

    magic              4 bytes  b"L2LA"
    version            u16      (1)
    d_lat              u16
    frames_per_latent  u16      STFT frames summarized by one latent vector
    sample_rate        u32
    n_frames           u64      number of latent vectors L
    data               L * d_lat float32, frame-major (all d_lat values of
                                 frame 0, then frame 1, ...)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import Waveform, model_output_to_waveform, resample, stft, amplitude_compress
from .config import RunConfig
from .metrics import evaluate_pair
from .network import ConsistencyAutoencoder
from .schedule import t_to_sigma

LATENT_MAGIC = b"L2LA"
LATENT_VERSION = 1
_HEADER = struct.Struct("<4sHHHIQ")


class LatentFormatError(ValueError):
    pass


@dataclass
class LatentSequence:
    data: np.ndarray  # [d_lat, L]
    hop: int
    frames_per_latent: int
    sample_rate: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"latents must be [d_lat, L], got {self.data.shape}")

    @property
    def d_lat(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def samples_per_latent(self) -> int:
        return self.hop * self.frames_per_latent

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(LATENT_MAGIC, LATENT_VERSION, self.d_lat, self.frames_per_latent, self.sample_rate, self.n_frames)
        return header + np.ascontiguousarray(self.data.T, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, hop: int) -> "LatentSequence":
        if len(raw) < _HEADER.size:
            raise LatentFormatError("latent file is truncated")
        magic, version, d_lat, fpl, sr, n = _HEADER.unpack_from(raw)
        if magic != LATENT_MAGIC:
            raise LatentFormatError(f"bad magic bytes {magic!r}")
        if version != LATENT_VERSION:
            raise LatentFormatError(f"unsupported latent format version {version}")
        expected = _HEADER.size + 4 * d_lat * n
        if len(raw) != expected:
            raise LatentFormatError(f"latent payload is {len(raw)} bytes, expected {expected}")
        data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, d_lat).T.copy()
        return cls(data, hop, fpl, sr)

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path, hop: int) -> "LatentSequence":
        return cls.from_bytes(Path(path).read_bytes(), hop)


@dataclass(frozen=True)
class DecodeOptions:
    n_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def sigma_schedule(n_steps: int, schedule) -> np.ndarray:
    """Decreasing noise levels at equispaced t in ``(0, 1]``, starting at sigma_max."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    t = 1.0 - np.arange(n_steps) / n_steps
    sigmas = np.atleast_1d(t_to_sigma(t, schedule))
    if np.any(np.diff(sigmas) >= 0) or sigmas[-1] < schedule.sigma_min:
        raise ValueError("invalid sigma schedule")
    return sigmas


class Codec:
    """Encode waveforms to latents and decode them back with consistency sampling."""

    def __init__(self, model: ConsistencyAutoencoder, cfg: RunConfig, allow_resample: bool = False, config_hash: str | None = None):
        self.model = model.eval()
        self.cfg = cfg
        self.allow_resample = allow_resample
        self.config_hash = config_hash or cfg.config_hash()
        self.dtype = next(model.parameters()).dtype

    @classmethod
    def from_checkpoint(cls, path, use_ema: bool = True, allow_resample: bool = False) -> "Codec":
        from .training import load_model

        model, cfg, meta = load_model(path, use_ema=use_ema)
        return cls(model, cfg, allow_resample, meta.get("config_hash"))

    @property
    def sample_rate(self) -> int:
        return self.cfg.audio.sample_rate

    @property
    def samples_per_latent(self) -> int:
        return self.cfg.samples_per_latent

    def _prepare(self, w: Waveform) -> np.ndarray:
        x = np.asarray(w.samples, dtype=np.float64)
        if w.sample_rate != self.sample_rate:
            if not self.allow_resample:
                raise ValueError(f"waveform is {w.sample_rate} Hz but the model expects {self.sample_rate} Hz")
            x = resample(x, w.sample_rate, self.sample_rate)
        if x.shape[0] < self.cfg.audio.chunk_len:
            x = np.pad(x, (0, self.cfg.audio.chunk_len - x.shape[0]))
        return x

    def _blocks(self, n_frames: int) -> list[tuple[int, int]]:
        block = self.cfg.model.time_frames
        return [(s, min(s + block, n_frames)) for s in range(0, n_frames, block)]

    @torch.no_grad()
    def encode_waveform(self, w: Waveform) -> LatentSequence:
        """One latent vector per ``hop * frames_per_latent`` samples; a trailing
        remainder shorter than that is dropped."""
        a, m = self.cfg.audio, self.cfg.model
        x = self._prepare(w)
        n_frames = (x.shape[0] // a.hop) // m.frames_per_latent * m.frames_per_latent
        spec = amplitude_compress(stft(x, a.stft_params, n_frames), a.transform).data
        spec = torch.from_numpy(spec).to(self.dtype)
        lats = [self.model.encode(spec[None, :, :, s:e])[0] for s, e in self._blocks(n_frames)]
        lat = torch.cat(lats, dim=-1).cpu().numpy()
        return LatentSequence(lat, a.hop, m.frames_per_latent, self.sample_rate)

    @torch.no_grad()
    def decode_spectrogram(self, lat: LatentSequence, opts: DecodeOptions = DecodeOptions()) -> np.ndarray:
        """Consistency sampling of the compressed spectrogram ``[2, F, L * frames_per_latent]``."""
        m = self.cfg.model
        if lat.n_frames == 0:
            raise ValueError("latent sequence is empty")
        if lat.d_lat != m.d_lat or lat.frames_per_latent != m.frames_per_latent:
            raise ValueError(f"latents [{lat.d_lat}, fpl={lat.frames_per_latent}] do not match the model")
        sigmas = sigma_schedule(opts.n_steps, self.cfg.schedule)
        sigma_min = self.cfg.schedule.sigma_min
        rng = np.random.default_rng(opts.seed)
        fpl = m.frames_per_latent
        z_all = rng.standard_normal((opts.n_steps, 2, m.freq_bins, lat.n_frames * fpl))
        latents = torch.from_numpy(lat.data).to(self.dtype)
        out = []
        for s, e in self._blocks(lat.n_frames * fpl):
            feats = self.model.decode_features(latents[None, :, s // fpl : e // fpl])
            z = torch.from_numpy(z_all[..., s:e]).to(self.dtype)
            x = self.model.consistency_fn(sigmas[0] * z[0:1], float(sigmas[0]), feats)
            for i in range(1, opts.n_steps):
                noise = float(np.sqrt(sigmas[i] ** 2 - sigma_min**2))
                x = self.model.consistency_fn(x + noise * z[i : i + 1], float(sigmas[i]), feats)
            out.append(x[0])
        return torch.cat(out, dim=-1).cpu().numpy()

    def decode_latents(self, lat: LatentSequence, opts: DecodeOptions = DecodeOptions()) -> Waveform:
        a = self.cfg.audio
        spec = self.decode_spectrogram(lat, opts)
        samples = model_output_to_waveform(spec, a.stft_params, a.transform, lat.n_frames * lat.samples_per_latent)
        samples = np.clip(np.nan_to_num(samples, nan=0.0), -1.0, 1.0).astype(np.float32)
        return Waveform(samples, lat.sample_rate)

    def reconstruct(self, samples: np.ndarray, opts: DecodeOptions | None = None) -> np.ndarray:
        w = Waveform(samples, self.sample_rate)
        return self.decode_latents(self.encode_waveform(w), opts or DecodeOptions()).samples

    def roundtrip(self, w: Waveform, opts: DecodeOptions = DecodeOptions()) -> tuple[Waveform, dict]:
        """Encode, decode, and score the result against the input."""
        est = self.decode_latents(self.encode_waveform(w), opts)
        ref = self._prepare(w)
        a = self.cfg.audio
        rec = evaluate_pair("roundtrip", ref, est.samples, n_fft=a.win, hop=a.hop)
        return est, {"si_sdr_db": rec.si_sdr_db, "lsd_db": rec.lsd_db, "n_steps": opts.n_steps}
