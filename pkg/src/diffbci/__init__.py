"""Imagined-speech EEG decoding with a diffusion-conditioned 1D U-Net, at desk scale."""
from ._accel import HAS_NUMBA, backend

__version__ = "0.1.0"

__all__ = ["HAS_NUMBA", "backend", "__version__"]
