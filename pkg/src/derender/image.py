from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .color import ColorState


@dataclass
class Image:
    """Planar float raster: ``data`` has shape (3, height, width)."""

    data: np.ndarray
    state: ColorState

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.state = ColorState(self.state)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"image data must have shape (3, H, W), got {self.data.shape}")
        if self.data.shape[1] == 0 or self.data.shape[2] == 0:
            raise ValueError("image has a zero dimension")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """View as (3, N) with N = height * width, row-major."""
        return self.data.reshape(3, -1)

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, height: int, width: int, state) -> "Image":
        return cls(np.asarray(pixels).reshape(3, height, width), state)

    @classmethod
    def from_hwc(cls, array: np.ndarray, state) -> "Image":
        return cls(np.moveaxis(np.asarray(array, dtype=float), -1, 0), state)

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self.data, 0, -1)
