"""Waveform <-> compressed complex spectrogram conversion, plus WAV I/O.

Spectrograms are stored as real arrays with a trailing ``[2, F, T]`` layout
(real part, imaginary part).  ``F = win // 2``: the DC and Nyquist bins of a
real signal are both real-valued, so the Nyquist value is carried in the
imaginary part of the DC bin.  That keeps the frequency axis a power of two
without discarding any information, and ``istft(stft(x))`` is exact.

Framing is centered: the signal is zero-padded by ``(win - hop) / 2`` on the
left, and frame ``j`` covers samples ``[j*hop - pad, j*hop - pad + win)``.  A
signal of ``N`` samples yields ``ceil(N / hop)`` frames, one per hop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class STFTParams:
    hop: int = 512
    win: int = 2048

    def __post_init__(self):
        if self.hop <= 0 or self.win <= 0:
            raise ValueError(f"hop and win must be positive, got {self.hop}, {self.win}")
        if self.win % 2 or (self.win - self.hop) % 2:
            raise ValueError("win and win - hop must be even")

    @property
    def n_freq(self) -> int:
        return self.win // 2

    @property
    def pad(self) -> int:
        return (self.win - self.hop) // 2

    def window(self) -> np.ndarray:
        return get_window("hann", self.win, fftbins=True)


@dataclass(frozen=True)
class AmplitudeTransform:
    """Magnitude compression ``c -> beta * |c|**alpha * exp(i*angle(c))``."""

    alpha: float = 0.65
    beta: float = 0.35

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"waveform must be a non-empty 1-D array, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    data: np.ndarray
    params: STFTParams = field(default_factory=STFTParams)
    compressed: bool = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_frames(self) -> int:
        return self.data.shape[-1]

    def to_complex(self) -> np.ndarray:
        return self.data[..., 0, :, :] + 1j * self.data[..., 1, :, :]


def _pack(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-3)


def stft(samples, params: STFTParams = STFTParams(), n_frames: int | None = None) -> ComplexSpectrogram:
    """Complex STFT of ``samples`` (time on the last axis).

    Args:
        samples: array ``[..., N]`` or a :class:`Waveform`.
        params: hop and window length.
        n_frames: if given, the frame axis is cropped or zero-padded to this
            many frames.  The model consumes fixed-size blocks (e.g. 64
            frames out of the 67 a 34,304-sample chunk produces).

    Returns:
        Uncompressed spectrogram with data of shape ``[..., 2, win/2, T]``.
    """
    x = samples.samples if isinstance(samples, Waveform) else np.asarray(samples)
    n = x.shape[-1]
    if n < params.win:
        raise ValueError(f"input of {n} samples is shorter than the window ({params.win})")
    t = -(-n // params.hop)
    right = (t - 1) * params.hop + params.win - n - params.pad
    pad_width = [(0, 0)] * (x.ndim - 1) + [(params.pad, right)]
    xp = np.pad(x, pad_width)
    frames = np.lib.stride_tricks.sliding_window_view(xp, params.win, axis=-1)[..., :: params.hop, :]
    spec = np.fft.rfft(frames * params.window(), axis=-1)  # [..., T, win/2 + 1]
    spec = np.swapaxes(spec, -1, -2)
    folded = spec[..., :-1, :].copy()
    folded[..., 0, :] = spec[..., 0, :].real + 1j * spec[..., -1, :].real
    data = _pack(folded)
    if n_frames is not None:
        data = fit_frames(data, n_frames)
    return ComplexSpectrogram(data, params, compressed=False)


def fit_frames(data: np.ndarray, n_frames: int) -> np.ndarray:
    t = data.shape[-1]
    if t >= n_frames:
        return data[..., :n_frames]
    pad_width = [(0, 0)] * (data.ndim - 1) + [(0, n_frames - t)]
    return np.pad(data, pad_width)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft`.

    Returns ``[..., length]`` samples; ``length`` defaults to ``T * hop``.
    """
    if spec.compressed:
        raise ValueError("spectrogram is amplitude-compressed; expand it before inversion")
    p = spec.params
    z = spec.to_complex()
    full = np.zeros(z.shape[:-2] + (p.n_freq + 1, z.shape[-1]), dtype=complex)
    full[..., 1:-1, :] = z[..., 1:, :]
    full[..., 0, :] = z[..., 0, :].real
    full[..., -1, :] = z[..., 0, :].imag
    t = z.shape[-1]
    w = p.window()
    frames = np.fft.irfft(np.swapaxes(full, -1, -2), n=p.win, axis=-1) * w  # [..., T, win]

    total = (t - 1) * p.hop + p.win
    out = np.zeros(frames.shape[:-2] + (total,), dtype=frames.dtype)
    wsum = np.zeros(total)
    for j in range(t):
        sl = slice(j * p.hop, j * p.hop + p.win)
        out[..., sl] += frames[..., j, :]
        wsum[sl] += w**2
    if length is None:
        length = t * p.hop
    out = out[..., p.pad : p.pad + length]
    wsum = wsum[p.pad : p.pad + length]
    if out.shape[-1] < length:
        raise ValueError(f"{t} frames cannot cover {length} samples")
    return out / np.maximum(wsum, 1e-8)


def compress_complex(c: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    mag = np.abs(c)
    # zero magnitude stays zero; elsewhere scale by beta * |c|**(alpha - 1)
    gain = np.zeros_like(mag)
    nz = mag > 0
    gain[nz] = beta * mag[nz] ** (alpha - 1.0)
    return c * gain


def expand_complex(c: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    mag = np.abs(c)
    gain = np.zeros_like(mag)
    nz = mag > 0
    gain[nz] = (mag[nz] / beta) ** (1.0 / alpha) / mag[nz]
    return c * gain


def amplitude_compress(spec: ComplexSpectrogram, transform: AmplitudeTransform = AmplitudeTransform()) -> ComplexSpectrogram:
    if spec.compressed:
        raise ValueError("spectrogram is already compressed")
    z = compress_complex(spec.to_complex(), transform.alpha, transform.beta)
    return replace(spec, data=_pack(z).astype(spec.data.dtype, copy=False), compressed=True)


def amplitude_expand(spec: ComplexSpectrogram, transform: AmplitudeTransform = AmplitudeTransform()) -> ComplexSpectrogram:
    if not spec.compressed:
        raise ValueError("spectrogram is not compressed")
    z = expand_complex(spec.to_complex(), transform.alpha, transform.beta)
    return replace(spec, data=_pack(z).astype(spec.data.dtype, copy=False), compressed=False)


def waveform_to_model_input(samples, params: STFTParams, transform: AmplitudeTransform, n_frames: int | None = None) -> np.ndarray:
    """STFT followed by amplitude compression; returns the raw ``[..., 2, F, T]`` array."""
    return amplitude_compress(stft(samples, params, n_frames), transform).data


def model_output_to_waveform(data: np.ndarray, params: STFTParams, transform: AmplitudeTransform, length: int | None = None) -> np.ndarray:
    spec = ComplexSpectrogram(np.asarray(data, dtype=np.float64), params, compressed=True)
    return istft(amplitude_expand(spec, transform), length)


# --- WAV files -------------------------------------------------------------

_INT_SCALE = {np.dtype("int16"): 32768.0, np.dtype("int32"): 2147483648.0}


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    if data.dtype in _INT_SCALE:
        return data.astype(np.float32) / _INT_SCALE[data.dtype]
    return data.astype(np.float32)


def downmix(data: np.ndarray) -> np.ndarray:
    return data.mean(axis=1) if data.ndim == 2 else data


def wav_info(path) -> tuple[int, int]:
    """Return ``(sample_rate, n_samples)`` without decoding the payload."""
    sr, data = wavfile.read(path, mmap=True)
    return int(sr), int(data.shape[0])


def read_wav_window(path, start: int, length: int) -> tuple[np.ndarray, int]:
    """Read ``length`` mono samples starting at ``start`` via a memory map."""
    sr, data = wavfile.read(path, mmap=True)
    window = np.array(data[start : start + length])
    return downmix(_to_float(window)), int(sr)


def resample(samples: np.ndarray, orig_sr: int, target_sr: int) -> np.ndarray:
    if orig_sr == target_sr:
        return samples
    ratio = Fraction(target_sr, orig_sr)
    return resample_poly(samples, ratio.numerator, ratio.denominator).astype(samples.dtype, copy=False)


def read_wav(path, sample_rate: int | None = None, allow_resample: bool = False) -> Waveform:
    """Read a WAV file as mono float32.

    Raises ``ValueError`` when ``sample_rate`` is given, differs from the
    file's rate, and ``allow_resample`` is false.
    """
    try:
        sr, data = wavfile.read(path)
    except ValueError as exc:
        raise ValueError(f"{path}: not a readable WAV file ({exc})") from exc
    samples = downmix(_to_float(data))
    if sample_rate is not None and sr != sample_rate:
        if not allow_resample:
            raise ValueError(f"{path}: sample rate {sr} Hz does not match the configured {sample_rate} Hz")
        logger.info("resampling %s from %d to %d Hz", path, sr, sample_rate)
        samples = resample(samples, sr, sample_rate)
        sr = sample_rate
    return Waveform(samples, sr)


def write_wav(path, waveform: Waveform, dtype: str = "float32") -> None:
    """Write ``waveform`` atomically as 32-bit float or 16-bit PCM."""
    path = Path(path)
    x = np.asarray(waveform.samples, dtype=np.float64)
    if dtype == "int16":
        data = np.round(np.clip(x, -1.0, 1.0 - 1.0 / 32768.0) * 32768.0).astype(np.int16)
    elif dtype == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unsupported WAV sample type {dtype!r}")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        wavfile.write(fh, waveform.sample_rate, data)
    tmp.replace(path)
