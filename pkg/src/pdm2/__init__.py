"""Dual-modal (ultrasound + optoacoustic) pre-touch ranging toolkit."""
from . import errors, kernels  # noqa: F401

__version__ = "0.1.0"
