"""Synthetic single-lead ECG with controllable beat-to-beat irregularity.

Each beat is three Gaussian bumps (P, R, T) placed relative to its R time;
R-R intervals are drawn from N(mean_rr, sdnn^2).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .preprocessing import TARGET_HZ, WINDOW_SAMPLES, EcgWindow

PRESETS = ("normal", "af_like")
PRESET_LABELS = {"normal": 0, "af_like": 1}

# (offset from R in s, width sigma in s, amplitude)
P_WAVE = (-0.16, 0.020, 0.15)
R_WAVE = (0.0, 0.018, 1.0)
T_WAVE = (0.25, 0.050, 0.30)
AF_MIN_JITTER_MS = 150.0
MIN_RR_MS = 250.0


@dataclass(frozen=True)
class SynthConfig:
    mean_rr_ms: float = 800.0
    sdnn_ms: float = 0.0
    preset: str = "normal"
    noise_std: float = 0.02
    seed: int = 0
    n_windows: int = 100
    rr_spread: float = 0.1  # per-window heart-rate spread, fraction of mean_rr_ms
    windows_per_patient: int = 1
    normalize: bool = True

    def __post_init__(self):
        if not self.mean_rr_ms > 200:
            raise ValueError("mean_rr_ms must exceed 200")
        if self.sdnn_ms < 0 or self.noise_std < 0 or not 0 <= self.rr_spread < 1:
            raise ValueError("sdnn_ms, noise_std and rr_spread must be non-negative (rr_spread < 1)")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}")

    @property
    def rr_std_ms(self) -> float:
        if self.preset == "af_like":
            return max(2.0 * self.sdnn_ms, AF_MIN_JITTER_MS)
        return self.sdnn_ms


def beat_times(rng: np.random.Generator, duration_s: float, mean_rr_s: float,
               rr_std_s: float) -> np.ndarray:
    """R times (s) covering [-1, duration + 1] starting from a random phase."""
    t = -1.0 - rng.uniform(0.0, mean_rr_s)
    times = []
    while t < duration_s + 1.0:
        times.append(t)
        rr = mean_rr_s + rr_std_s * rng.standard_normal() if rr_std_s > 0 else mean_rr_s
        t += max(rr, MIN_RR_MS / 1000.0)
    return np.asarray(times)


def render(times: np.ndarray, n: int, fs: float = TARGET_HZ, p_waves: bool = True) -> np.ndarray:
    t = np.arange(n) / fs
    x = np.zeros(n)
    waves = [R_WAVE, T_WAVE] + ([P_WAVE] if p_waves else [])
    for offset, width, amp in waves:
        centres = times + offset
        x += amp * np.exp(-0.5 * ((t[:, None] - centres[None, :]) / width) ** 2).sum(axis=1)
    return x


def realized_sdnn(times: np.ndarray, duration_s: float) -> tuple[float | None, np.ndarray]:
    inside = times[(times >= 0) & (times < duration_s)]
    rr = np.diff(inside) * 1000.0
    return (float(np.std(rr, ddof=1)) if rr.size >= 2 else None), rr


def generate(config: SynthConfig, n_samples: int = WINDOW_SAMPLES,
             fs: float = TARGET_HZ) -> list[EcgWindow]:
    """Windows for one preset; identical configs give identical output."""
    rng = np.random.default_rng([config.seed, PRESETS.index(config.preset)])
    duration = n_samples / fs
    label = PRESET_LABELS[config.preset]
    out = []
    for i in range(config.n_windows):
        mean_rr = config.mean_rr_ms * (1.0 + config.rr_spread * rng.uniform(-1, 1)) / 1000.0
        times = beat_times(rng, duration, mean_rr, config.rr_std_ms / 1000.0)
        x = render(times, n_samples, fs, p_waves=config.preset == "normal")
        x = x + config.noise_std * rng.standard_normal(n_samples)
        if config.normalize:
            x = (x - x.mean()) / x.std()
        sdnn, _ = realized_sdnn(times, duration)
        pid = f"syn{config.seed}-{config.preset}-{i // config.windows_per_patient}"
        out.append(EcgWindow(x, pid, f"{pid}/{i}", label, sdnn))
    return out


def split_counts(fractions: Sequence[float], total: int) -> list[int]:
    """Largest-remainder apportionment of ``total`` items to the given fractions."""
    f = np.asarray(fractions, dtype=np.float64)
    f = f / f.sum()
    raw = f * total
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def generate_mixed(parts: Sequence[tuple[SynthConfig, float]], n_windows: int,
                   seed: int = 0, shuffle: bool = True) -> list[EcgWindow]:
    """Corpus drawn from several configs in the requested proportions.

    Each part gets its own seed stream so parts never share random draws.
    """
    counts = split_counts([w for _, w in parts], n_windows)
    windows: list[EcgWindow] = []
    for k, ((cfg, _), n) in enumerate(zip(parts, counts)):
        windows += generate(replace(cfg, n_windows=n, seed=seed * 1000 + k))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(windows))
        windows = [windows[i] for i in order]
    return windows


def pretraining_corpus(n_windows: int = 2000, sdnn_levels: Sequence[float] = (0.0, 60.0, 120.0),
                       seed: int = 0, noise_std: float = 0.02) -> list[EcgWindow]:
    """Normal-rhythm windows split evenly across the given R-R jitter levels."""
    parts = [(SynthConfig(sdnn_ms=s, noise_std=noise_std), 1.0) for s in sdnn_levels]
    return generate_mixed(parts, n_windows, seed)


def rhythm_corpus(n_windows: int = 400, seed: int = 1, af_fraction: float = 0.5,
                  sdnn_levels: Sequence[float] = (0.0, 60.0, 120.0),
                  noise_std: float = 0.02, windows_per_patient: int = 4) -> list[EcgWindow]:
    """Labelled normal (0) vs af_like (1) windows for probing."""
    normal = [(SynthConfig(sdnn_ms=s, noise_std=noise_std, windows_per_patient=windows_per_patient),
               (1 - af_fraction) / len(sdnn_levels)) for s in sdnn_levels]
    af = [(SynthConfig(preset="af_like", noise_std=noise_std, windows_per_patient=windows_per_patient),
           af_fraction)]
    return generate_mixed(normal + af, n_windows, seed)
