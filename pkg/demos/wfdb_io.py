# %% [markdown]
# Write a two-channel record in format 212, read it back, and attach rhythm
# annotations.

# %%
import numpy as np

from cupid import wfdb

fs, n = 250, 2500
t = np.arange(n) / fs
signals = [np.round(np.sin(2 * np.pi * 1.2 * t) * 200) / 200, np.round(np.cos(2 * np.pi * 0.3 * t) * 200) / 200]
specs = [wfdb.SignalSpec("demo.dat", 212, 200.0, 0, description=name) for name in ("ECG", "RESP")]
header = wfdb.WfdbHeader("demo", 2, fs, n, specs)

# %%
hea, dat = wfdb.write_record(wfdb.RawRecord(header, signals), 212)
print(hea.decode())
back = wfdb.read_record(hea, dat)
print("exact round trip:", all(np.array_equal(a, b) for a, b in zip(signals, back.signals)))
print("bytes per frame of two samples:", len(dat) / n)

# %% rhythm annotations become labelled intervals
anns = [wfdb.Annotation(0, wfdb.RHYTHM, "(N"), wfdb.Annotation(1200, wfdb.RHYTHM, "(AFIB")]
parsed = wfdb.read_annotations(wfdb.write_annotations(anns))
print(wfdb.rhythm_intervals(parsed, n))
