"""Reconstruction metrics and directory-level evaluation reports."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import read_wav

logger = logging.getLogger(__name__)

SI_SDR_CLAMP = 100.0
LSD_FLOOR_DB = -80.0


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, clamped to +/-100.

    The reference is projected onto the estimate's direction:
    ``a = <est, ref> / ||ref||^2`` and ``SI-SDR = 10 log10(||a ref||^2 / ||a ref - est||^2)``.
    """
    s = np.asarray(reference, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.shape[0]} vs {e.shape[0]}")
    energy = s @ s
    if energy == 0:
        raise ValueError("reference signal is all zeros")
    target = (e @ s) / energy * s
    residual = target - e
    num, den = target @ target, residual @ residual
    if num == 0:
        # silent or orthogonal estimate
        return -SI_SDR_CLAMP
    if den == 0:
        return SI_SDR_CLAMP
    return float(np.clip(10.0 * np.log10(num / den), -SI_SDR_CLAMP, SI_SDR_CLAMP))


def _log_magnitude(x, n_fft, hop):
    # psd scaling with fs=1 divides by sqrt(sum(w**2)), so unit-variance noise sits near 0 dB
    _, _, z = signal.stft(x, fs=1.0, window="hann", nperseg=n_fft, noverlap=n_fft - hop, scaling="psd")
    mag = np.abs(z)
    return 20.0 * np.log10(np.maximum(mag, 10.0 ** (LSD_FLOOR_DB / 20.0)))


def log_spectral_distance(reference, estimate, n_fft: int = 2048, hop: int = 512) -> float:
    """Per-frame RMS of log-magnitude differences (dB), averaged over frames."""
    s = np.asarray(reference, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.shape[0]} vs {e.shape[0]}")
    n_fft = min(n_fft, s.shape[0])
    hop = min(hop, n_fft)
    diff = _log_magnitude(s, n_fft, hop) - _log_magnitude(e, n_fft, hop)
    return float(np.mean(np.sqrt(np.mean(diff**2, axis=0))))


@dataclass
class FileRecord:
    name: str
    si_sdr_db: float | None = None
    lsd_db: float | None = None
    error: str | None = None
    # filled in by external tools; these need pretrained networks
    fad: float | None = None
    fad_clap: float | None = None
    visqol: float | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class EvalReport:
    records: list[FileRecord] = field(default_factory=list)
    config_hash: str | None = None
    unmatched: list[str] = field(default_factory=list)

    @property
    def valid(self) -> list[FileRecord]:
        return [r for r in self.records if r.ok]

    @property
    def mean_si_sdr(self) -> float | None:
        v = self.valid
        return float(np.mean([r.si_sdr_db for r in v])) if v else None

    @property
    def mean_lsd(self) -> float | None:
        v = self.valid
        return float(np.mean([r.lsd_db for r in v])) if v else None

    def aggregate(self) -> dict:
        return {
            "aggregate": True,
            "n_files": len(self.records),
            "n_failed": len(self.records) - len(self.valid),
            "n_unmatched": len(self.unmatched),
            "si_sdr_db": self.mean_si_sdr,
            "lsd_db": self.mean_lsd,
            "fad": None,
            "fad_clap": None,
            "visqol": None,
            "config_hash": self.config_hash,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r)) for r in self.records]
        lines.append(json.dumps(self.aggregate()))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_jsonl())
        tmp.replace(path)


def _audio_files(directory: Path) -> dict[str, Path]:
    return {str(p.relative_to(directory)): p for p in sorted(directory.rglob("*.wav"))}


def evaluate_pair(name: str, reference: np.ndarray, estimate: np.ndarray, n_fft=2048, hop=512) -> FileRecord:
    n = min(reference.shape[0], estimate.shape[0])
    reference, estimate = reference[:n], estimate[:n]
    return FileRecord(name, si_sdr(reference, estimate), log_spectral_distance(reference, estimate, n_fft, hop))


def evaluate_directory(ref_dir, est_dir=None, codec=None, opts=None, n_fft: int = 2048, hop: int = 512) -> EvalReport:
    """Score every reference file against an estimate.

    Estimates come from a file of the same relative name under ``est_dir``,
    or, when ``codec`` is given, from a codec round trip.  Files that fail
    to load or score are kept in the report with ``error`` set; references
    without a matching estimate are listed in ``unmatched``.
    """
    if (est_dir is None) == (codec is None):
        raise ValueError("pass exactly one of est_dir or codec")
    ref_dir = Path(ref_dir)
    refs = _audio_files(ref_dir)
    report = EvalReport(config_hash=getattr(codec, "config_hash", None))
    ests = _audio_files(Path(est_dir)) if est_dir is not None else {}
    for name in sorted(refs):
        if est_dir is not None and name not in ests:
            logger.warning("no estimate for %s; skipping", name)
            report.unmatched.append(name)
            continue
        try:
            if codec is not None:
                ref = read_wav(refs[name], codec.sample_rate, allow_resample=codec.allow_resample).samples
                est = codec.reconstruct(ref, opts)
            else:
                ref = read_wav(refs[name]).samples
                est = read_wav(ests[name]).samples
            report.records.append(evaluate_pair(name, ref, est, n_fft, hop))
        except Exception as exc:  # noqa: BLE001 - one bad file must not sink the report
            logger.warning("evaluation failed for %s: %s", name, exc)
            report.records.append(FileRecord(name, error=f"{type(exc).__name__}: {exc}"))
    if est_dir is not None:
        for name in sorted(set(ests) - set(refs)):
            report.unmatched.append(name)
    return report
