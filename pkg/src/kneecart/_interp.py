"""Trilinear sampling shared by resampling and field composition."""

from __future__ import annotations

import numpy as np


def trilinear(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Sample ``values`` (3D, or 4D with trailing component axis) at
    fractional voxel indices ``idx`` of shape (..., 3).

    Out-of-grid positions are clamped to the border voxel (edge padding),
    so the result is always finite when ``values`` is.
    """
    values = np.asarray(values)
    idx = np.asarray(idx, dtype=np.float64)
    dims = values.shape[:3]
    lo = np.floor(idx).astype(np.int64)
    frac = idx - lo

    out = None
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.ones(idx.shape[:-1], dtype=np.float64)
        for ax in range(3):
            w = w * (frac[..., ax] if offs[ax] else 1.0 - frac[..., ax])
        ci = np.clip(lo + offs, 0, np.array(dims) - 1)
        sample = values[ci[..., 0], ci[..., 1], ci[..., 2]]
        if values.ndim == 4:
            w = w[..., None]
        out = w * sample if out is None else out + w * sample
    return out


def nearest(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Nearest-neighbour sampling with border clamping; keeps dtype."""
    values = np.asarray(values)
    idx = np.asarray(idx, dtype=np.float64)
    dims = np.array(values.shape[:3])
    ci = np.clip(np.rint(idx).astype(np.int64), 0, dims - 1)
    return values[ci[..., 0], ci[..., 1], ci[..., 2]]
