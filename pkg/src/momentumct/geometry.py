"""Fan-beam scan geometry with a flat, equally spaced detector."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised for an inconsistent scan description."""


@dataclass(frozen=True)
class FanBeamGeometry:
    """2-D fan-beam scan description.

    Views are spaced uniformly over 360 degrees starting at angle 0. The
    source sits at ``source_to_iso * (cos a, sin a)`` and the flat detector
    is centred on the opposite side of the isocentre, perpendicular to the
    central ray. All lengths are in mm.
    """

    n_pixels_per_side: int
    pixel_pitch: float
    n_views: int
    n_detectors: int
    detector_pitch: float
    source_to_iso: float
    source_to_detector: float

    def __post_init__(self):
        for name in ("n_pixels_per_side", "n_views", "n_detectors"):
            if int(getattr(self, name)) < 1:
                raise GeometryError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pixel_pitch", "detector_pitch", "source_to_iso", "source_to_detector"):
            value = float(getattr(self, name))
            if not (value > 0 and math.isfinite(value)):
                raise GeometryError(f"{name} must be a positive finite length, got {value}")
        if self.source_to_detector <= self.source_to_iso:
            raise GeometryError(
                "source_to_detector must exceed source_to_iso "
                f"({self.source_to_detector} <= {self.source_to_iso})"
            )
        if self.fov_radius >= self.source_to_iso:
            raise GeometryError(
                f"source at {self.source_to_iso} mm lies inside the field of view "
                f"(radius {self.fov_radius} mm)"
            )
        needed = self.required_detector_half_width
        have = 0.5 * self.n_detectors * self.detector_pitch
        if have < needed:
            raise GeometryError(
                f"detector half-width {have:.4g} mm does not cover the field of view; "
                f"need at least {needed:.4g} mm"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_pixels_per_side, self.n_pixels_per_side)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_views, self.n_detectors)

    @property
    def n_pixels(self) -> int:
        return self.n_pixels_per_side**2

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_detectors

    @property
    def fov_radius(self) -> float:
        return 0.5 * self.n_pixels_per_side * self.pixel_pitch

    @property
    def required_detector_half_width(self) -> float:
        # Flat-detector extent subtended by the circle inscribed in the grid.
        fan_half_angle = math.asin(self.fov_radius / self.source_to_iso)
        return self.source_to_detector * math.tan(fan_half_angle)

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_views) / self.n_views

    @property
    def detector_offsets(self) -> np.ndarray:
        """Signed detector-cell centre positions along the detector, mm."""
        return (np.arange(self.n_detectors) - 0.5 * (self.n_detectors - 1)) * self.detector_pitch

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x, y)`` pixel-centre coordinate grids, each of shape ``shape``.

        Row 0 is the top of the image (largest y); column 0 is the left (smallest x).
        """
        n = self.n_pixels_per_side
        c = (np.arange(n) - 0.5 * (n - 1)) * self.pixel_pitch
        x, y = np.meshgrid(c, -c)
        return x, y

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def covering(
        cls,
        n_pixels_per_side: int,
        pixel_pitch: float,
        n_views: int,
        n_detectors: int,
        source_to_iso: float = 595.0,
        source_to_detector: float = 1085.6,
        margin: float = 1.05,
    ) -> "FanBeamGeometry":
        """Build a geometry whose detector pitch just covers the field of view.

        ``margin`` widens the detector beyond the minimum needed.
        """
        fov = 0.5 * n_pixels_per_side * pixel_pitch
        half = source_to_detector * math.tan(math.asin(fov / source_to_iso))
        pitch = 2.0 * half * margin / n_detectors
        return cls(
            n_pixels_per_side=n_pixels_per_side,
            pixel_pitch=pixel_pitch,
            n_views=n_views,
            n_detectors=n_detectors,
            detector_pitch=pitch,
            source_to_iso=source_to_iso,
            source_to_detector=source_to_detector,
        )
