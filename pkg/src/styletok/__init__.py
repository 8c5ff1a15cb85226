"""Desk-scale text-to-spectrogram synthesis with a learned style-token bank."""

__version__ = "0.1.0"

from .tensor import Parameter, Tape, Tensor  # noqa: F401
