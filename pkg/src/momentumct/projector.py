"""Implicit fan-beam system matrix.

The matrix is assembled once per geometry from exact ray/pixel intersection
lengths (Siddon's method) and stored sparse. Back projection multiplies by the
transpose of the very same matrix, so the pair is an exact adjoint.
"""

from __future__ import annotations

import functools
import logging

import numpy as np
import scipy.sparse as sp

from .geometry import FanBeamGeometry

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Array dimensions do not match the geometry."""


def _siddon(p0, p1, n, pitch):
    """Intersection lengths of segment ``p0 -> p1`` with an ``n x n`` grid.

    Returns ``(flat_indices, lengths)`` in row-major image order.
    """
    half = 0.5 * n * pitch
    d = p1 - p0
    length = float(np.hypot(d[0], d[1]))
    edges = -half + pitch * np.arange(n + 1)

    a_lo, a_hi = 0.0, 1.0
    alphas = []
    for k in range(2):
        if d[k] != 0.0:
            a = (edges - p0[k]) / d[k]
            a_lo = max(a_lo, min(a[0], a[-1]))
            a_hi = min(a_hi, max(a[0], a[-1]))
            alphas.append(a)
        elif not (-half <= p0[k] <= half):
            return np.empty(0, np.int64), np.empty(0)
    if a_hi <= a_lo:
        return np.empty(0, np.int64), np.empty(0)

    a = np.concatenate([[a_lo, a_hi]] + alphas)
    a = np.unique(a[(a >= a_lo) & (a <= a_hi)])
    seg = np.diff(a) * length
    mid = 0.5 * (a[:-1] + a[1:])
    mx = p0[0] + mid * d[0]
    my = p0[1] + mid * d[1]
    col = np.floor((mx + half) / pitch).astype(np.int64)
    row = np.floor((half - my) / pitch).astype(np.int64)
    ok = (seg > 0) & (col >= 0) & (col < n) & (row >= 0) & (row < n)
    return row[ok] * n + col[ok], seg[ok]


def ray_endpoints(geom: FanBeamGeometry, view: int) -> tuple[np.ndarray, np.ndarray]:
    """Source point and detector-cell centres (``n_detectors x 2``) for one view."""
    a = geom.angles[view]
    c, s = np.cos(a), np.sin(a)
    src = geom.source_to_iso * np.array([c, s])
    det_center = -(geom.source_to_detector - geom.source_to_iso) * np.array([c, s])
    axis = np.array([-s, c])
    cells = det_center[None, :] + geom.detector_offsets[:, None] * axis[None, :]
    return src, cells


def build_system_matrix(geom: FanBeamGeometry) -> sp.csr_matrix:
    """Assemble A (rays x pixels) with row index ``view * n_detectors + detector``."""
    n = geom.n_pixels_per_side
    indptr = [0]
    indices = []
    data = []
    for v in range(geom.n_views):
        src, cells = ray_endpoints(geom, v)
        for cell in cells:
            idx, w = _siddon(src, cell, n, geom.pixel_pitch)
            indices.append(idx)
            data.append(w)
            indptr.append(indptr[-1] + idx.size)
    A = sp.csr_matrix(
        (np.concatenate(data), np.concatenate(indices), np.asarray(indptr)),
        shape=(geom.n_rays, geom.n_pixels),
    )
    A.sort_indices()
    log.debug("system matrix %s with %d nonzeros", A.shape, A.nnz)
    return A


class Projector:
    """Forward/back projection pair for one geometry."""

    def __init__(self, geom: FanBeamGeometry):
        self.geom = geom
        self.A = build_system_matrix(geom)
        self.AT = self.A.T.tocsr()

    def _check_image(self, img):
        img = np.asarray(img, dtype=np.float64)
        if img.shape != self.geom.shape:
            raise ShapeError(f"image shape {img.shape} does not match geometry {self.geom.shape}")
        return img

    def _check_sino(self, sino):
        sino = np.asarray(sino, dtype=np.float64)
        if sino.shape != self.geom.sino_shape:
            raise ShapeError(
                f"sinogram shape {sino.shape} does not match geometry {self.geom.sino_shape}"
            )
        return sino

    def forward(self, img):
        img = self._check_image(img)
        return (self.A @ img.ravel()).reshape(self.geom.sino_shape)

    def back(self, sino):
        sino = self._check_sino(sino)
        return (self.AT @ sino.ravel()).reshape(self.geom.shape)

    def normal(self, img, w):
        """Apply ``A^T diag(w) A``."""
        return self.back(w * self.forward(img))

    def majorizer_diag(self, w):
        w = self._check_sino(w)
        if np.any(w < 0):
            raise ValueError("statistical weights must be nonnegative")
        return self.normal(np.ones(self.geom.shape), w)

    def dense(self) -> np.ndarray:
        return self.A.toarray()


@functools.lru_cache(maxsize=8)
def get_projector(geom: FanBeamGeometry) -> Projector:
    return Projector(geom)


def forward_project(geom: FanBeamGeometry, img) -> np.ndarray:
    """Line integrals of ``img`` along every source-to-detector-cell ray."""
    return get_projector(geom).forward(img)


def back_project(geom: FanBeamGeometry, sino) -> np.ndarray:
    """Exact transpose of :func:`forward_project`."""
    return get_projector(geom).back(sino)


def compute_majorizer_diag(geom: FanBeamGeometry, w) -> np.ndarray:
    """Diagonal majorizer ``A^T W A 1`` of the data-fit Hessian.

    Dominates ``A^T W A`` because every entry of A is nonnegative.
    """
    return get_projector(geom).majorizer_diag(w)


def power_iteration(apply_op, shape, max_iters=100, tol=1e-6, start=None, seed=0):
    """Largest eigenvalue of a symmetric PSD operator by power iteration.

    Returns ``(estimate, rayleigh_quotients)``. An all-zero start vector is
    replaced by a draw from a fixed Philox stream.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not tol > 0:
        raise ValueError("tol must be positive")
    v = np.ones(shape) if start is None else np.array(start, dtype=np.float64)
    if not np.any(v):
        v = np.random.Generator(np.random.Philox(seed)).standard_normal(shape)
    v = v / np.linalg.norm(v)
    history = []
    lam = 0.0
    for _ in range(max_iters):
        Av = apply_op(v)
        lam_new = float(np.vdot(v, Av))
        history.append(lam_new)
        nrm = np.linalg.norm(Av)
        if nrm == 0:
            return 0.0, history
        v = Av / nrm
        if lam_new > 0 and abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    return lam, history


def estimate_spectral_radius(geom: FanBeamGeometry, w, max_iters=100, tol=1e-6) -> float:
    """Power-iteration estimate of the largest eigenvalue of ``A^T diag(w) A``."""
    proj = get_projector(geom)
    w = proj._check_sino(w)
    lam, _ = power_iteration(lambda v: proj.normal(v, w), geom.shape, max_iters, tol)
    return lam
