"""Patch-aligned STFT magnitude frames used as attention keys in the decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .autodiff import DimensionError, Tensor, add, matmul

N_BINS = 255
N_FFT = 2 * (N_BINS - 1)  # 508: one-sided rfft length of 255 bins


@dataclass(frozen=True)
class SpectrogramConfig:
    patch_size: int = 20
    window_len: int = 40
    n_bins: int = N_BINS
    window: str = "hann"
    scale: str = "mag"  # mag | power | log

    @property
    def n_fft(self) -> int:
        return 2 * (self.n_bins - 1)

    @classmethod
    def for_patch(cls, patch_size: int, **kw) -> "SpectrogramConfig":
        """Window twice the patch length, hop equal to the patch length."""
        return cls(patch_size=patch_size, window_len=2 * patch_size, **kw)


def frame_signal(x: np.ndarray, patch_size: int, window_len: int) -> np.ndarray:
    """(..., L) -> (..., L // patch_size, window_len); frame i is centred on patch i.

    The signal is reflect-padded by ``(window_len - patch_size) / 2`` on each
    side; for an odd difference the extra sample goes to the right.
    """
    x = np.asarray(x, dtype=np.float64)
    extra = window_len - patch_size
    if extra < 0:
        raise DimensionError(f"window {window_len} is shorter than patch {patch_size}")
    n = x.shape[-1] // patch_size
    left = extra // 2
    widths = [(0, 0)] * (x.ndim - 1) + [(left, extra - left)]
    xp = np.pad(x, widths, mode="reflect") if extra else x
    starts = np.arange(n) * patch_size
    idx = starts[:, None] + np.arange(window_len)[None, :]
    return xp[..., idx]


def stft_magnitude(x: np.ndarray, config: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Spectrogram frames of shape (..., n_patches, n_bins); never masked, never learned."""
    frames = frame_signal(x, config.patch_size, config.window_len)
    win = get_window(config.window, config.window_len)
    spec = np.abs(np.fft.rfft(frames * win, n=config.n_fft, axis=-1))
    if config.scale == "power":
        spec = spec ** 2
    elif config.scale == "log":
        spec = np.log1p(spec)
    elif config.scale != "mag":
        raise ValueError(f"unknown spectrogram scale {config.scale!r}")
    return spec


def project_frames(frames, weight: Tensor, bias: Tensor | None = None,
                   pos: Tensor | None = None) -> Tensor:
    """Linear map of spectrogram frames to model width, plus positional encoding per frame."""
    frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=weight.dtype))
    if frames.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"spectrogram has {frames.shape[-1]} bins but projection expects {weight.shape[0]}"
        )
    out = matmul(frames, weight)
    if bias is not None:
        out = add(out, bias)
    if pos is not None:
        if pos.shape != out.shape[-2:]:
            raise DimensionError(f"positional table {pos.shape} vs frames {out.shape[-2:]}")
        out = add(out, pos)
    return out
