"""Walk through the complex spectrogram representation the model works on.

    python demos/01_spectrogram_representation.py
"""

import numpy as np

from consistency_ae.audio import AmplitudeTransform, STFTParams, amplitude_compress, amplitude_expand, istft, stft
from consistency_ae.dataio import synthetic_clips
from consistency_ae.metrics import si_sdr

params = STFTParams()  # 44.1 kHz framing: hop 512, window 2048
print(f"hop {params.hop}, window {params.win}, stored bins {params.n_freq}")

# one training chunk is 34304 samples, which gives 67 frames; the model keeps 64
x = synthetic_clips(1, 34_304, 44_100, seed=0)[0].astype(np.float64)
spec = stft(x, params)
print("spectrogram (re/im, freq, time):", spec.shape)

# 1025 one-sided bins do not divide by 16, so the Nyquist bin rides in the
# (otherwise always zero) imaginary part of the DC bin
dc = spec.data[:, 0, :]
print("imag part of DC row now carries Nyquist; max |value| =", float(np.abs(dc[1]).max()))

# the inverse is least-squares overlap-add, so reconstruction is near perfect
back = istft(spec, len(x))
print(f"STFT round trip SI-SDR: {si_sdr(x, back):.1f} dB")

# amplitude compression |c|^0.65 with a 0.35 prefactor flattens the dynamic range
tr = AmplitudeTransform()
comp = amplitude_compress(spec, tr)
mag = np.hypot(*spec.data)
cmag = np.hypot(*comp.data)
print(f"raw magnitude spread  {mag.max() / np.median(mag):10.1f}x over median")
print(f"compressed spread     {cmag.max() / np.median(cmag):10.1f}x over median")
print(f"compressed std {comp.data.std():.3f} (the default schedule assumes 0.5, typical of music)")

restored = amplitude_expand(comp, tr)
print("compress/expand max abs error:", float(np.abs(restored.data - spec.data).max()))

# a frame count can be forced; extra frames are cropped, missing ones zero-padded
short = stft(x, params, n_frames=64)
print("fixed to 64 frames:", short.shape)
