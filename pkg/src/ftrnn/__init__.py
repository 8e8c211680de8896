"""Time-frequency recurrent speech separation on a small numpy autodiff engine."""
from .dsp import StftConfig, Waveform, istft, stft
from .model import FtrnnConfig, FtrnnModel, forward, init_model, load_checkpoint, save_checkpoint

__all__ = [
    "FtrnnConfig",
    "FtrnnModel",
    "StftConfig",
    "Waveform",
    "forward",
    "init_model",
    "istft",
    "load_checkpoint",
    "save_checkpoint",
    "stft",
]
