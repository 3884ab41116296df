"""Masked ECG pretraining with spectrogram-keyed decoder attention, on a small numpy autodiff engine."""

from .model import ModelConfig
from .synthetic import SynthConfig
from .training import TrainConfig

__all__ = ["ModelConfig", "SynthConfig", "TrainConfig"]
__version__ = "0.1.0"
