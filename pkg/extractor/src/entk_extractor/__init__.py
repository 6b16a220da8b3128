"""Empirical-NTK extraction from pretrained torch classifiers.

Computes per-example Jacobian feature maps over a selected parameter subset
and writes their inner products in the kernel file format the valuation
engine consumes.
"""

from .config import ConfigError, ExtractionConfig, ModelSpec, ParamSelector
from .extract import build_model, extract, jacobian_features, kernel_blocks
from .kernelfile import write_kernel_file

__version__ = "0.1.0"
