"""Segmentation of supported nanoparticles in grayscale micrographs.

The package covers the full loop: synthetic scene generation, classical
pseudo-label construction, small trainable segmentation networks built on a
from-scratch dense-tensor engine, threshold-based evaluation, and per-particle
measurement. ``nanoseg.cli`` exposes the same stages as subcommands.
"""

__version__ = "0.1.0"

from .imgcore import normalize, read_pgm, write_pgm
from .pseudolabel import PseudoLabelParams, generate_label, mask_iou
from .synth import SynthConfig, generate, make_dataset
from .models import ShallowSpec, UNetSpec, build_shallow, build_unet, load_model, save_model
from .train import TrainConfig, fit
from .evaluation import PixelMetrics, confusion, sweep
from .particles import connected_components, measure

__all__ = [
    "__version__",
    "normalize",
    "read_pgm",
    "write_pgm",
    "PseudoLabelParams",
    "generate_label",
    "mask_iou",
    "SynthConfig",
    "generate",
    "make_dataset",
    "ShallowSpec",
    "UNetSpec",
    "build_shallow",
    "build_unet",
    "load_model",
    "save_model",
    "TrainConfig",
    "fit",
    "PixelMetrics",
    "confusion",
    "sweep",
    "connected_components",
    "measure",
]
