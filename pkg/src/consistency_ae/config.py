"""Declarative run configuration.

A run config is a JSON document with the sections ``audio``, ``model``,
``schedule``, ``optim``, ``train``, ``data`` and ``codec``.  Every key is
optional; missing keys take the defaults of the selected ``profile``
(``"full"`` or ``"toy"``).  Unknown keys are rejected.

Example::

    {"profile": "toy", "optim": {"lr0": 0.0005}, "train": {"batch_size": 8}}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .audio import AmplitudeTransform, STFTParams
from .network import TOY_MODEL, ModelConfig
from .schedule import ScheduleConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 44_100
    hop: int = 512
    win: int = 2048
    alpha: float = 0.65
    beta: float = 0.35
    chunk_len: int = 34_304

    def __post_init__(self):
        if self.sample_rate <= 0 or self.chunk_len <= 0:
            raise ValueError("sample_rate and chunk_len must be positive")
        if self.chunk_len < self.win:
            raise ValueError("chunk_len must be at least one window")

    @property
    def stft_params(self) -> STFTParams:
        return STFTParams(hop=self.hop, win=self.win)

    @property
    def transform(self) -> AmplitudeTransform:
        return AmplitudeTransform(alpha=self.alpha, beta=self.beta)

    @property
    def chunk_frames(self) -> int:
        return -(-self.chunk_len // self.hop)


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 1e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_momentum: float = 0.9999
    grad_clip: float | None = None

    def __post_init__(self):
        if not 0 < self.lr_final <= self.lr0:
            raise ValueError("need 0 < lr_final <= lr0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    checkpoint_every: int = 10_000
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")


@dataclass(frozen=True)
class DataConfig:
    resample: bool = False
    duration_weighted: bool = False
    # per-source sampling weights, matched to the data directories in order;
    # empty means equal weights
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))
        if any(w <= 0 for w in self.weights):
            raise ValueError("source weights must be positive")


@dataclass(frozen=True)
class CodecConfig:
    n_steps: int = 1
    seed: int = 0
    use_ema: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


_SECTIONS = {
    "audio": AudioConfig,
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "optim": OptimizerConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "codec": CodecConfig,
}


@dataclass(frozen=True)
class RunConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)

    def __post_init__(self):
        if self.audio.win // 2 != self.model.freq_bins:
            raise ConfigError(f"model.freq_bins ({self.model.freq_bins}) must equal audio.win / 2 ({self.audio.win // 2})")
        if self.audio.chunk_frames < self.model.time_frames:
            raise ConfigError(
                f"audio.chunk_len gives {self.audio.chunk_frames} frames, fewer than model.time_frames ({self.model.time_frames})"
            )

    @property
    def total_iters(self) -> int:
        return self.schedule.total_iters

    @property
    def samples_per_latent(self) -> int:
        return self.audio.hop * self.model.frames_per_latent

    def to_dict(self) -> dict:
        return {name: _plain(asdict(getattr(self, name))) for name in _SECTIONS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "RunConfig":
        """Return a copy with whole sections or ``section={key: value}`` overrides."""
        updated = {}
        for name, value in sections.items():
            if isinstance(value, dict):
                value = dataclasses.replace(getattr(self, name), **value)
            updated[name] = value
        return dataclasses.replace(self, **updated)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def full_config() -> RunConfig:
    return RunConfig()


def toy_config() -> RunConfig:
    """Seconds-per-hundred-steps profile used by the tests and demos."""
    return RunConfig(
        audio=AudioConfig(sample_rate=8000, hop=32, win=128, chunk_len=608),
        model=TOY_MODEL,
        schedule=ScheduleConfig(total_iters=2000),
        optim=OptimizerConfig(lr0=3e-3, lr_final=3e-5, ema_momentum=0.99),
        train=TrainConfig(batch_size=4, checkpoint_every=500),
    )


PROFILES = {"full": full_config, "toy": toy_config}


def _build_section(name: str, cls, base, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    profile = doc.pop("profile", "full")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    doc.pop("config_hash", None)
    base = PROFILES[profile]()
    for key in doc:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key {key}")
    sections = {name: _build_section(name, cls, getattr(base, name), doc.get(name, {})) for name, cls in _SECTIONS.items()}
    try:
        return RunConfig(**sections)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(doc)
