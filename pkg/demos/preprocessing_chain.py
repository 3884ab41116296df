# %% [markdown]
# Resample a 360 Hz recording to 100 Hz, remove baseline wander, normalise,
# and cut labelled 10 s windows.

# %%
import numpy as np

from cupid import preprocessing as pp
from cupid.synthetic import beat_times, render

rng = np.random.default_rng(1)
beats = beat_times(rng, 60.0, 0.8, 0.05)
ecg_100 = render(beats, 6000)
# pretend it came from a 360 Hz device with baseline drift and a different gain
t360 = np.arange(int(60 * 360)) / 360
raw = 3.0 * np.interp(t360, np.arange(6000) / 100, ecg_100) + 0.8 * np.sin(2 * np.pi * 0.1 * t360)

# %%
labels = np.zeros(len(raw), dtype=int)
labels[len(raw) // 2:] = 1
windows = pp.preprocess_record(raw, 360, patient_id="demo", labels=labels)
print(len(windows), "windows of", windows[0].samples.shape[0], "samples")
print("labels", [w.label for w in windows])
print("SDNN per window (ms)", [round(w.sdnn_ms, 1) for w in windows])

# %% the high-pass keeps 10 Hz content and removes DC
print("analytic |H(10 Hz)|^2:", pp.butterworth_highpass_gain(10.0) ** 2)
