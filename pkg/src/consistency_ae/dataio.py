"""Audio dataset scanning and chunk sampling.

Files are never preloaded: the scan only reads WAV headers, and each sampled
chunk is read through a memory map.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import read_wav_window, resample, wav_info

logger = logging.getLogger(__name__)

AUDIO_SUFFIXES = (".wav", ".wave")
INDEX_VERSION = 1


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    sources: tuple[tuple[str, float], ...]
    chunk_len: int
    sample_rate: int
    seed: int = 0
    resample: bool = False
    duration_weighted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple((str(p), float(w)) for p, w in self.sources))
        if not self.sources:
            raise DataError("at least one data source is required")
        if any(w <= 0 for _, w in self.sources):
            raise DataError("source weights must be positive")


@dataclass(frozen=True)
class FileEntry:
    path: str
    native_rate: int
    native_len: int

    def length_at(self, rate: int) -> int:
        return self.native_len * rate // self.native_rate


@dataclass
class FileIndex:
    spec: DatasetSpec
    sources: list[list[FileEntry]] = field(default_factory=list)

    def __len__(self):
        return sum(len(s) for s in self.sources)

    def to_dict(self) -> dict:
        return {
            "version": INDEX_VERSION,
            "sources": [[[e.path, e.native_rate, e.native_len] for e in src] for src in self.sources],
        }

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return sample_batch(self, self.spec, rng, batch_size)


def _list_audio(directory: Path) -> list[Path]:
    return sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in AUDIO_SUFFIXES)


def _content_key(spec: DatasetSpec, files: list[list[Path]]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([spec.chunk_len, spec.sample_rate, spec.resample]).encode())
    for src in files:
        h.update(b"|")
        for p in src:
            st = p.stat()
            h.update(f"{p}:{st.st_size}:{st.st_mtime_ns};".encode())
    return h.hexdigest()[:20]


def scan(spec: DatasetSpec, cache_dir=None) -> FileIndex:
    """Index every usable audio file under each source directory.

    Files shorter than one chunk (at the model rate) are skipped with a
    warning.  A file at a different sample rate is an error unless
    ``spec.resample`` is set.  With ``cache_dir`` the index is persisted as
    ``index_<hash>.json`` keyed by the file listing, sizes and mtimes.
    """
    files = []
    for directory, _ in spec.sources:
        d = Path(directory)
        if not d.is_dir():
            raise DataError(f"data directory not found: {d}")
        files.append(_list_audio(d))

    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"index_{_content_key(spec, files)}.json"
        if cache_path.is_file():
            doc = json.loads(cache_path.read_text())
            if doc.get("version") == INDEX_VERSION:
                return FileIndex(spec, [[FileEntry(*e) for e in src] for src in doc["sources"]])

    index = FileIndex(spec)
    for (directory, _), paths in zip(spec.sources, files):
        entries = []
        for p in paths:
            try:
                rate, n = wav_info(p)
            except (ValueError, OSError) as exc:
                logger.warning("skipping unreadable file %s: %s", p, exc)
                continue
            if rate != spec.sample_rate and not spec.resample:
                raise DataError(f"{p}: sample rate {rate} Hz differs from the configured {spec.sample_rate} Hz (enable resampling to convert)")
            entry = FileEntry(str(p), rate, n)
            if entry.length_at(spec.sample_rate) < spec.chunk_len:
                logger.warning("skipping %s: shorter than one chunk (%d samples)", p, spec.chunk_len)
                continue
            entries.append(entry)
        if not entries:
            raise DataError(f"no usable audio files in {directory}")
        index.sources.append(entries)

    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(index.to_dict()))
        tmp.replace(cache_path)
    return index


def _read_chunk(entry: FileEntry, start: int, spec: DatasetSpec) -> np.ndarray:
    if entry.native_rate == spec.sample_rate:
        chunk, _ = read_wav_window(entry.path, start, spec.chunk_len)
        return chunk
    # read the matching native window plus a margin for the resampling filter
    ratio = entry.native_rate / spec.sample_rate
    margin = 64
    native_start = int(start * ratio)
    lo = max(native_start - margin, 0)
    window, _ = read_wav_window(entry.path, lo, int(np.ceil(spec.chunk_len * ratio)) + 2 * margin)
    out = resample(window, entry.native_rate, spec.sample_rate)
    offset = int(round((native_start - lo) / ratio))
    chunk = out[offset : offset + spec.chunk_len]
    return np.pad(chunk, (0, spec.chunk_len - chunk.shape[0]))


def sample_batch(index: FileIndex, spec: DatasetSpec, rng: np.random.Generator, batch_size: int) -> np.ndarray:
    """Draw ``batch_size`` chunks: source by weight, file within it, then a uniform offset."""
    weights = np.array([w for _, w in spec.sources])
    probs = weights / weights.sum()
    out = np.empty((batch_size, spec.chunk_len), dtype=np.float32)
    for b in range(batch_size):
        src = index.sources[rng.choice(len(probs), p=probs)]
        if spec.duration_weighted:
            lengths = np.array([e.length_at(spec.sample_rate) for e in src], dtype=np.float64)
            entry = src[rng.choice(len(src), p=lengths / lengths.sum())]
        else:
            entry = src[rng.integers(len(src))]
        start = int(rng.integers(entry.length_at(spec.sample_rate) - spec.chunk_len + 1))
        out[b] = _read_chunk(entry, start, spec)
    return out


class ArrayDataset:
    """In-memory clips with the same ``sample_batch`` interface as :class:`FileIndex`."""

    def __init__(self, clips, chunk_len: int):
        self.clips = [np.asarray(c, dtype=np.float32) for c in clips]
        self.chunk_len = chunk_len
        if not self.clips:
            raise DataError("dataset is empty")
        short = [i for i, c in enumerate(self.clips) if c.shape[0] < chunk_len]
        if short:
            raise DataError(f"clips {short} are shorter than one chunk ({chunk_len} samples)")

    def __len__(self):
        return len(self.clips)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        out = np.empty((batch_size, self.chunk_len), dtype=np.float32)
        for b in range(batch_size):
            clip = self.clips[rng.integers(len(self.clips))]
            start = int(rng.integers(clip.shape[0] - self.chunk_len + 1))
            out[b] = clip[start : start + self.chunk_len]
        return out


def synthetic_clips(n: int, length: int, sample_rate: int, seed: int = 0) -> list[np.ndarray]:
    """Decaying harmonic tones with a little noise, peak amplitude 0.5.

    Stand-in "music" for smoke tests and demos when no corpus is at hand.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length) / sample_rate
    clips = []
    for _ in range(n):
        f0 = rng.uniform(0.02, 0.08) * sample_rate
        x = np.zeros(length)
        for h in range(1, 5):
            if h * f0 < 0.45 * sample_rate:
                x += rng.uniform(0.3, 1.0) / h * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
        x *= np.exp(-t * rng.uniform(1.0, 4.0) * sample_rate / length)
        x += 0.02 * rng.standard_normal(length)
        clips.append((0.5 * x / np.max(np.abs(x))).astype(np.float32))
    return clips
