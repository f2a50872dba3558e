"""Fan-beam filtered back-projection for a flat, equispaced detector."""

from __future__ import annotations

import numpy as np

from .geometry import FanBeamGeometry

FILTERS = ("ramp", "hann")


def ramp_filter_response(n_pad: int, spacing: float, kind: str = "ramp") -> np.ndarray:
    """Frequency response of the band-limited ramp filter on ``n_pad`` samples.

    Built from the spatial-domain ramp kernel so the DC term is correct for
    a finite detector.
    """
    if kind not in FILTERS:
        raise ValueError(f"unknown filter {kind!r}; choose from {FILTERS}")
    n = np.concatenate([np.arange(0, n_pad // 2 + 1), np.arange(-(n_pad // 2) + 1 - n_pad % 2, 0)])
    h = np.zeros(n_pad)
    h[0] = 1.0 / (4.0 * spacing**2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    H = np.real(np.fft.fft(h)) * spacing
    if kind == "hann":
        f = np.fft.fftfreq(n_pad)
        H *= 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    return H


def filter_projections(geom: FanBeamGeometry, y, kind: str = "ramp", filter_length=None):
    """Cosine-weight and ramp-filter every view, in isocentre-scaled detector units."""
    nd = geom.n_detectors
    if filter_length is None:
        filter_length = int(2 ** np.ceil(np.log2(2 * nd)))
    if filter_length < nd:
        raise ValueError(f"filter length {filter_length} is shorter than the detector count {nd}")
    mag = geom.source_to_iso / geom.source_to_detector
    u = geom.detector_offsets * mag
    du = geom.detector_pitch * mag
    R = geom.source_to_iso
    weighted = np.asarray(y, dtype=np.float64) * (R / np.sqrt(R**2 + u**2))[None, :]
    H = ramp_filter_response(filter_length, du, kind)
    spec = np.fft.fft(weighted, n=filter_length, axis=1)
    return np.real(np.fft.ifft(spec * H[None, :], axis=1))[:, :nd]


def fbp_reconstruct(
    geom: FanBeamGeometry, y, filter_kind: str = "ramp", filter_length=None, clamp: bool = True
) -> np.ndarray:
    """Analytical full-scan fan-beam reconstruction.

    ``clamp=False`` returns the linear result before the nonnegativity floor.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != geom.sino_shape:
        raise ValueError(f"sinogram shape {y.shape} does not match geometry {geom.sino_shape}")
    q = filter_projections(geom, y, filter_kind, filter_length)
    R = geom.source_to_iso
    du = geom.detector_pitch * R / geom.source_to_detector
    u0 = -0.5 * (geom.n_detectors - 1) * du
    x, yy = geom.pixel_centers()
    img = np.zeros(geom.shape)
    for v, a in enumerate(geom.angles):
        c, s = np.cos(a), np.sin(a)
        along = x * c + yy * s  # toward the source
        across = -x * s + yy * c  # along the detector axis
        U = (R - along) / R
        pos = (across / U - u0) / du
        i0 = np.floor(pos).astype(np.int64)
        frac = pos - i0
        row = q[v]
        lo = np.where((i0 >= 0) & (i0 < geom.n_detectors), row[np.clip(i0, 0, geom.n_detectors - 1)], 0.0)
        hi = np.where(
            (i0 + 1 >= 0) & (i0 + 1 < geom.n_detectors),
            row[np.clip(i0 + 1, 0, geom.n_detectors - 1)],
            0.0,
        )
        img += ((1.0 - frac) * lo + frac * hi) / U**2
    img *= 0.5 * (2.0 * np.pi / geom.n_views)
    return np.maximum(img, 0.0) if clamp else img
