"""Occupancy detection from smart-meter readings with hybrid Bi-LSTM and
transformer-encoder models, built on a small numpy autodiff engine."""

__version__ = "0.1.0"

from . import kernels  # noqa: E402,F401
