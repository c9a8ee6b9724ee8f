"""Flow-field and mask helpers.

A flow field is a float64 array of shape ``(F, H, W, 2)``. Entry ``[k, i, j]``
holds the cumulative offset ``(dx, dy)`` of pixel ``(i, j)`` at frame ``k``
relative to its position in frame 0; ``dx`` runs along columns and ``dy``
along rows. Masks are ``(H, W)`` arrays of zeros and ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when arrays do not have compatible flow/mask shapes."""


@dataclass(frozen=True)
class DistanceWeights:
    """Blend between magnitude and angle terms of the offset distance."""

    w_mag: float
    w_angle: float

    def __post_init__(self):
        if self.w_mag < 0 or self.w_angle < 0:
            raise ValueError("distance weights must be nonnegative")
        if abs(self.w_mag + self.w_angle - 1.0) > 1e-12:
            raise ValueError("distance weights must sum to 1")

    def to_list(self):
        return [self.w_mag, self.w_angle]

    @classmethod
    def from_list(cls, values):
        w_mag, w_angle = values
        return cls(float(w_mag), float(w_angle))


def as_flow(x, copy=False) -> np.ndarray:
    """Validate ``x`` as a flow field and return it as a float64 array."""
    arr = np.array(x, dtype=np.float64, copy=copy) if copy else np.asarray(x, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] != 2:
        raise ShapeError(f"flow must have shape (F, H, W, 2), got {arr.shape}")
    if min(arr.shape[:3]) < 1:
        raise ShapeError(f"flow dimensions must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("flow contains non-finite entries")
    return arr


def as_mask(m, shape=None) -> np.ndarray:
    """Validate a binary object mask; ``shape`` is the expected ``(H, W)``."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"mask shape {arr.shape} does not match flow grid {tuple(shape)}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask entries must be 0 or 1")
    if not arr.any():
        raise ValueError("mask has an empty object region")
    if arr.all():
        raise ValueError("mask has an empty background region")
    return arr


def check_compatible(x, m):
    """Raise ShapeError unless flow ``x`` and mask ``m`` share a grid."""
    if x.shape[1:3] != m.shape:
        raise ShapeError(f"flow grid {x.shape[1:3]} does not match mask {m.shape}")


def same_shape(a, b) -> bool:
    return a.shape[:3] == b.shape[:3]


def magnitudes(x) -> np.ndarray:
    """Per-vector offset magnitudes, shape ``(F, H, W)``."""
    return np.hypot(x[..., 0], x[..., 1])


def masked_mean(values, weights):
    """Mean of ``values`` (F, H, W) weighted by a per-pixel ``weights`` (H, W).

    The normaliser counts every (frame, pixel) pair, so it is
    ``values.shape[0] * weights.sum()``.
    """
    total = np.einsum("kij,ij->", values, weights)
    return total / (values.shape[0] * weights.sum())


def disk_mask(height, width, center, radius) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    cy, cx = center
    return ((rows - cy) ** 2 + (cols - cx) ** 2 <= radius**2).astype(np.float64)


def rect_mask(height, width, top, left, bottom, right) -> np.ndarray:
    """Rectangle covering rows ``top..bottom`` and cols ``left..right`` inclusive."""
    m = np.zeros((height, width))
    m[top : bottom + 1, left : right + 1] = 1.0
    return m


def rotate_vectors(x, angle):
    """Rotate every 2-vector in ``x`` by ``angle`` radians."""
    c, s = np.cos(angle), np.sin(angle)
    out = np.empty_like(x)
    out[..., 0] = c * x[..., 0] - s * x[..., 1]
    out[..., 1] = s * x[..., 0] + c * x[..., 1]
    return out
