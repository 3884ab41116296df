# %% [markdown]
# One STFT frame per patch: 40-sample Hann windows, hop 20, zero-padded to
# 508 points for 255 bins.

# %%
import numpy as np

from cupid.spectrogram import N_FFT, SpectrogramConfig, stft_magnitude
from cupid.synthetic import SynthConfig, generate

w = generate(SynthConfig(sdnn_ms=60, n_windows=1, seed=3))[0]
frames = stft_magnitude(w.samples, SpectrogramConfig())
print("frames", frames.shape)

# %% frames over QRS complexes carry far more energy than frames between beats
energy = (frames ** 2).sum(axis=1)
print("loudest frames", np.argsort(energy)[-5:])
print("bin spacing (Hz)", 100 / N_FFT)

# %% alternative scales for the key signal
for scale in ("mag", "power", "log"):
    print(scale, stft_magnitude(w.samples, SpectrogramConfig(scale=scale)).max())
