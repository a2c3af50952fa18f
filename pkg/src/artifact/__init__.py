"""Thin elasto-plastic plates with hardening and periodic microstructure."""
from . import tensorkit, materials, reduction, plate, evolution, homogenize  # noqa: F401

__version__ = "0.1.0"
