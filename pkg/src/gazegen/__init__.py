"""Gaze trajectory generation by autoregressive denoising diffusion.

Subpackages: core data model (`core`), saliency conditioning and synthetic
scenes (`conditioning`), diffusion processes (`diffusion`), the denoising
network and training (`denoiser`, `nn`), scanpath metrics (`metrics`), and the
command line front end (`cli`).
"""

from .errors import ConfigError, DataError, GazegenError, NumericsError

__all__ = ["ConfigError", "DataError", "GazegenError", "NumericsError"]

__version__ = "0.1.0"
