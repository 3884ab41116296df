"""Signal conditioning and windowing for single-lead ECG.

The chain is fixed: resample to 100 Hz, zero-phase 5th-order Butterworth
high-pass at 0.5 Hz, per-recording standardisation, then cutting into
non-overlapping 10 s windows that pass a simple quality gate.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

TARGET_HZ = 100.0
WINDOW_SECONDS = 10.0
WINDOW_SAMPLES = int(TARGET_HZ * WINDOW_SECONDS)
HIGHPASS_ORDER = 5
HIGHPASS_CUTOFF_HZ = 0.5
MIN_PEAK_TO_PEAK = 0.1

# Rhythm strings from MIT-style '+' annotations. Unknown strings get new ids.
RHYTHM_CLASSES = {"(N": 0, "(AFIB": 1, "(B": 2}
NORMAL_CLASS = 0

DATASET_MAGIC = b"CPW1"


class ConfigError(ValueError):
    pass


class FlatLineError(ValueError):
    """Recording has zero variance and cannot be normalised."""


@dataclass
class EcgWindow:
    samples: np.ndarray
    patient_id: str = ""
    record_id: str = ""
    label: int | None = None
    sdnn_ms: float | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)


# -- conditioning -----------------------------------------------------------

def resample(x: np.ndarray, fs_in: float, fs_out: float = TARGET_HZ) -> np.ndarray:
    """Resample by linear interpolation; low-pass first when downsampling.

    Output length is ``floor(len(x) * fs_out / fs_in)``.
    """
    if not fs_in > 0:
        raise ConfigError(f"sampling frequency must be positive, got {fs_in}")
    x = np.asarray(x, dtype=np.float64)
    n_out = int(math.floor(len(x) * fs_out / fs_in + 1e-9))
    if fs_in == fs_out:
        return x[:n_out].copy()
    if fs_in > fs_out and len(x) > 30:
        sos = sps.butter(8, 0.45 * fs_out, btype="lowpass", fs=fs_in, output="sos")
        x = sps.sosfiltfilt(sos, x)
    t = np.arange(n_out) * (fs_in / fs_out)
    return np.interp(t, np.arange(len(x)), x)


def highpass_sos(fs: float = TARGET_HZ, order: int = HIGHPASS_ORDER,
                 cutoff: float = HIGHPASS_CUTOFF_HZ) -> np.ndarray:
    return sps.butter(order, cutoff, btype="highpass", fs=fs, output="sos")


def highpass(x: np.ndarray, fs: float = TARGET_HZ) -> np.ndarray:
    """Zero-phase (forward-backward) Butterworth high-pass, 5th order, 0.5 Hz."""
    return sps.sosfiltfilt(highpass_sos(fs), np.asarray(x, dtype=np.float64))


def butterworth_highpass_gain(f: np.ndarray, cutoff: float = HIGHPASS_CUTOFF_HZ,
                              order: int = HIGHPASS_ORDER) -> np.ndarray:
    """Analytic single-pass magnitude response ``|H(f)|`` of the analog prototype."""
    f = np.asarray(f, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return 1.0 / np.sqrt(1.0 + (cutoff / f) ** (2 * order))


def normalize_recording(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if not sd > 0:
        raise FlatLineError("recording has zero variance")
    return (x - x.mean()) / sd


# -- labels -------------------------------------------------------------------

def labels_from_intervals(intervals: Iterable[tuple[int, int, str]], n_samples: int,
                          classes: dict[str, int] | None = None) -> tuple[np.ndarray, dict[str, int]]:
    """Per-sample class ids (-1 where no rhythm is annotated).

    Unrecognised rhythm strings are assigned fresh ids and returned in the mapping.
    """
    classes = dict(RHYTHM_CLASSES if classes is None else classes)
    out = np.full(n_samples, -1, dtype=np.int64)
    for start, stop, label in intervals:
        if label not in classes:
            classes[label] = max(classes.values(), default=-1) + 1
        out[max(start, 0):min(stop, n_samples)] = classes[label]
    return out, classes


def majority_label(labels: np.ndarray) -> int | None:
    """Most frequent class id; ties go to the arrhythmic (non-normal) class."""
    labels = labels[labels >= 0]
    if labels.size == 0:
        return None
    ids, counts = np.unique(labels, return_counts=True)
    top = ids[counts == counts.max()]
    abnormal = top[top != NORMAL_CLASS]
    return int(abnormal[0] if abnormal.size else top[0])


def resample_labels(labels: np.ndarray, fs_in: float, fs_out: float = TARGET_HZ) -> np.ndarray:
    n_out = int(math.floor(len(labels) * fs_out / fs_in + 1e-9))
    idx = np.minimum(np.round(np.arange(n_out) * fs_in / fs_out).astype(np.int64), len(labels) - 1)
    return labels[idx]


# -- windowing --------------------------------------------------------------

def passes_quality_gate(w: np.ndarray, min_ptp: float = MIN_PEAK_TO_PEAK) -> bool:
    """Stand-in quality check: finite values and a peak-to-peak amplitude of at least ``min_ptp``."""
    return bool(np.all(np.isfinite(w)) and np.ptp(w) >= min_ptp)


def window(x: np.ndarray, labels: np.ndarray | None = None, *, patient_id: str = "",
           record_id: str = "", length: int = WINDOW_SAMPLES, fs: float = TARGET_HZ,
           min_ptp: float = MIN_PEAK_TO_PEAK, with_sdnn: bool = True) -> list[EcgWindow]:
    x = np.asarray(x, dtype=np.float64)
    out = []
    for k in range(len(x) // length):
        seg = x[k * length:(k + 1) * length]
        if not passes_quality_gate(seg, min_ptp):
            continue
        label = None
        if labels is not None:
            label = majority_label(np.asarray(labels[k * length:(k + 1) * length]))
        sdnn = compute_sdnn(seg, fs) if with_sdnn else None
        out.append(EcgWindow(seg.copy(), patient_id, record_id, label, sdnn))
    return out


def preprocess_record(x: np.ndarray, fs: float, *, patient_id: str = "", record_id: str = "",
                      labels: np.ndarray | None = None) -> list[EcgWindow]:
    """Full conditioning chain for one recording."""
    y = resample(x, fs)
    if labels is not None:
        labels = resample_labels(np.asarray(labels), fs)
    y = highpass(y)
    y = normalize_recording(y)
    return window(y, labels, patient_id=patient_id, record_id=record_id)


# -- R peaks and SDNN ---------------------------------------------------------

def detect_r_peaks(x: np.ndarray, fs: float = TARGET_HZ, threshold: float = 0.3,
                   refractory_s: float = 0.25) -> np.ndarray:
    """R-peak times in samples (sub-sample precision).

    Samples whose absolute first difference exceeds ``threshold`` times the
    largest one mark QRS slopes. Each run of such samples is widened by 50 ms,
    the R peak is the signal maximum inside it, refined by a parabola through
    the three surrounding samples. Peaks closer than the refractory period
    keep the taller one.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < 3 or not np.all(np.isfinite(x)):
        return np.zeros(0)
    slope = np.abs(np.gradient(x))
    top = slope.max()
    if top <= 1e-9:
        return np.zeros(0)
    above = slope > threshold * top
    edges = np.flatnonzero(np.diff(np.concatenate([[0], above.astype(np.int8), [0]])))
    pad = int(round(0.05 * fs))
    refractory = refractory_s * fs
    peaks: list[int] = []
    for start, stop in zip(edges[::2], edges[1::2]):
        lo, hi = max(start - pad, 0), min(stop + pad, x.size)
        p = lo + int(np.argmax(x[lo:hi]))
        if peaks and p - peaks[-1] < refractory:
            if x[p] > x[peaks[-1]]:
                peaks[-1] = p
            continue
        peaks.append(p)
    refined = []
    for p in peaks:
        if 0 < p < x.size - 1:
            a, b, c = x[p - 1], x[p], x[p + 1]
            denom = a - 2 * b + c
            off = 0.5 * (a - c) / denom if denom < 0 else 0.0
            refined.append(p + float(np.clip(off, -0.5, 0.5)))
        else:
            refined.append(float(p))
    return np.asarray(refined)


def compute_sdnn(x: np.ndarray, fs: float = TARGET_HZ) -> float | None:
    """Sample standard deviation of R-R intervals in ms; None with fewer than 3 R peaks."""
    peaks = detect_r_peaks(x, fs)
    if peaks.size < 3:
        return None
    rr = np.diff(peaks) * (1000.0 / fs)
    return float(np.std(rr, ddof=1))


# -- dataset files --------------------------------------------------------------

def write_windows(path: str | Path, windows: Sequence[EcgWindow]) -> None:
    """Write the little-endian ``CPW1`` windowed dataset format."""
    buf = bytearray(DATASET_MAGIC)
    buf += struct.pack("<I", len(windows))
    for w in windows:
        if w.samples.shape != (WINDOW_SAMPLES,):
            raise ConfigError(f"CPW1 windows hold {WINDOW_SAMPLES} samples, got {w.samples.shape}")
        buf += w.samples.astype("<f4").tobytes()
        buf += struct.pack("<h", -1 if w.label is None else int(w.label))
        buf += struct.pack("<f", math.nan if w.sdnn_ms is None else w.sdnn_ms)
        pid = w.patient_id.encode("utf-8")
        buf += struct.pack("<H", len(pid)) + pid
    Path(path).write_bytes(bytes(buf))


def read_windows(path: str | Path) -> list[EcgWindow]:
    data = Path(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a CPW1 dataset")
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    out = []
    for _ in range(count):
        samples = np.frombuffer(data, dtype="<f4", count=WINDOW_SAMPLES, offset=off).astype(np.float64)
        off += 4 * WINDOW_SAMPLES
        label, sdnn, plen = struct.unpack_from("<hfH", data, off)
        off += 8
        pid = data[off:off + plen].decode("utf-8")
        off += plen
        out.append(EcgWindow(samples, pid, "", None if label < 0 else label,
                             None if math.isnan(sdnn) else float(sdnn)))
    return out


def read_raw_f32(path: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    """Load a raw little-endian f32 signal plus its ``<path>.meta`` key=value sidecar.

    The sidecar must define ``fs``; ``patient_id`` and ``record_id`` are optional.
    """
    path = Path(path)
    meta: dict[str, str] = {}
    for line in Path(str(path) + ".meta").read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    if "fs" not in meta:
        raise ConfigError(f"{path}.meta lacks an fs entry")
    return np.fromfile(path, dtype="<f4").astype(np.float64), meta
