"""Consistency autoencoder for audio: spectrogram codec with single-step decoding."""

from .audio import STFTParams, AmplitudeTransform, Waveform, ComplexSpectrogram, istft, read_wav, stft, write_wav
from .codec import Codec, DecodeOptions, LatentSequence
from .config import RunConfig, load_config, full_config, toy_config
from .metrics import log_spectral_distance, si_sdr
from .network import ConsistencyAutoencoder, ModelConfig, count_parameters
from .schedule import ScheduleConfig

__version__ = "0.1.0"
