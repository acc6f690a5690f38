"""Image container shared by phantoms, operators and the reconstruction pipeline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ImageGrid:
    """An n-dimensional real-valued image.

    ``values`` holds intensities, conventionally normalized to [0, 1] for
    inputs to the pipeline (reconstructions may overshoot slightly and are
    clamped only when metrics are computed).  ``source_range`` records the
    (min, max) of the un-normalized source so file round-trips can restore
    the original scale.
    """

    values: np.ndarray
    source_range: tuple[float, float] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim not in (1, 2, 3):
            raise ValueError(f"expected 1D/2D/3D image, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def image_values(img) -> np.ndarray:
    """Return the pixel array of an ImageGrid or a bare ndarray."""
    if isinstance(img, ImageGrid):
        return img.values
    return np.asarray(img, dtype=np.float64)


def normalize_to_range(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map ``values`` affinely so [lo, hi] becomes [0, 1] (degenerate range maps to 0)."""
    values = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)
