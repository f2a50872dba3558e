"""Image-quality metrics and summary statistics."""

from __future__ import annotations

import numpy as np

from .data import mu_to_hu


def rmse_hu(x, ref, mask=None) -> float:
    """Root-mean-square difference in shifted HU, optionally over a boolean mask."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    d = mu_to_hu(x) - mu_to_hu(ref)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ValueError("mask shape does not match the images")
        if not mask.any():
            raise ValueError("mask selects no pixels")
        d = d[mask]
    return float(np.sqrt(np.mean(d * d)))


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation (divide by n)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to summarize")
    return float(v.mean()), float(v.std(ddof=0))
