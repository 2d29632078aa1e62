"""Desk-scale lab for modality-balanced collaborative distillation:
a taped autodiff tensor core, MLP encoders with concatenation fusion,
synthetic multi-domain multi-modal data, the full training algorithm with
its ERM/EMA baselines, a loss-landscape flatness probe, and an experiment
harness behind a CLI."""

from .kernels import BACKEND_NAME

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "__version__"]
