"""Reconstruct CIE-XYZ images from rendered sRGB with a learnable global color mapping."""

from .color import ColorState, DeltaEVariant, WhitePoint
from .image import Image
from .mapping import Direction, GlobalMapping, apply, init_baseline

__version__ = "0.1.0"
