"""Numpy reference implementation of a Mamba-style scene-text detector's mechanisms.

Selective scans (S6, SS2D), Top-k sparse deformable attention, the dual-scale
feed-forward network, pyramid enhancement, the mask-to-polygon decoder and its
losses, each with a hand-written backward pass.
"""
from .config import ConfigError, RunConfig
from .fixtures import ManifestError
from .model import init_model, model_forward, param_counts

__version__ = "0.1.0"

__all__ = ["ConfigError", "ManifestError", "RunConfig", "init_model", "model_forward", "param_counts"]
