"""Phantoms, low-dose sinogram simulation, statistical weights, datasets."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .arrayio import atomic_write_text, load_array, save_array
from .geometry import FanBeamGeometry

MU_WATER = 0.02  # /mm; 1000 HU on the shifted scale
MU_MAX = 0.04  # /mm; phantom ceiling
CLAMP_EPS = 0.1  # counts, floor applied before the log

# Shepp-Logan ellipse layout in normalized coordinates [-1, 1]:
# (amplitude, semi-axis a, semi-axis b, x0, y0, rotation in degrees).
# Amplitudes are relative to water, so brain matter sits at 1.0 and bone at 2.0.
SHEPP_LOGAN = np.array(
    [
        [2.0, 0.6900, 0.9200, 0.00, 0.0000, 0.0],
        [-1.0, 0.6624, 0.8740, 0.00, -0.0184, 0.0],
        [-0.2, 0.1100, 0.3100, 0.22, 0.0000, -18.0],
        [-0.2, 0.1600, 0.4100, -0.22, 0.0000, 18.0],
        [0.1, 0.2100, 0.2500, 0.00, 0.3500, 0.0],
        [0.1, 0.0460, 0.0460, 0.00, 0.1000, 0.0],
        [0.1, 0.0460, 0.0460, 0.00, -0.1000, 0.0],
        [0.1, 0.0460, 0.0230, -0.08, -0.6050, 0.0],
        [0.1, 0.0230, 0.0230, 0.00, -0.6060, 0.0],
        [0.1, 0.0230, 0.0460, 0.06, -0.6050, 0.0],
    ]
)


def make_rng(*key: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by integers, e.g. ``(master_seed, index)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def phantom_ellipses(variant_seed: int = 0, slice_index: int = 0) -> np.ndarray:
    """Ellipse table for one perturbed phantom ("patient") and slice.

    ``variant_seed == 0`` with ``slice_index == 0`` is the unperturbed layout.
    """
    e = SHEPP_LOGAN.copy()
    if variant_seed:
        rng = make_rng(variant_seed)
        # Whole-head size and aspect, applied to every ellipse so nesting is kept.
        sx, sy = rng.uniform(0.85, 1.0, size=2)
        e[:, 1] *= sx
        e[:, 3] *= sx
        e[:, 2] *= sy
        e[:, 4] *= sy
        inner = slice(2, None)
        n = e.shape[0] - 2
        e[inner, 0] *= rng.uniform(0.7, 1.3, size=n)
        e[inner, 1:3] *= rng.uniform(0.85, 1.15, size=(n, 2))
        e[inner, 3:5] += rng.uniform(-0.03, 0.03, size=(n, 2))
        e[inner, 5] += rng.uniform(-8.0, 8.0, size=n)
    if slice_index:
        rng = make_rng(variant_seed, slice_index)
        inner = slice(2, None)
        n = e.shape[0] - 2
        e[inner, 1:3] *= rng.uniform(0.92, 1.08, size=(n, 2))
        e[inner, 3:5] += rng.uniform(-0.015, 0.015, size=(n, 2))
    return e


def ellipse_sum(ellipses: np.ndarray, x, y) -> np.ndarray:
    """Sum of ellipse amplitudes covering each normalized point ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    for amp, a, b, x0, y0, deg in ellipses:
        th = math.radians(deg)
        c, s = math.cos(th), math.sin(th)
        xr = (x - x0) * c + (y - y0) * s
        yr = -(x - x0) * s + (y - y0) * c
        out += amp * ((xr / a) ** 2 + (yr / b) ** 2 <= 1.0)
    return out


def shepp_logan(n: int, variant_seed: int = 0, slice_index: int = 0) -> np.ndarray:
    """Shepp-Logan attenuation phantom (per mm) sampled at pixel centres.

    Normalized coordinates span the full grid; row 0 is the top (y = +1).
    """
    if n < 16:
        raise ValueError(f"phantom size must be >= 16, got {n}")
    c = (np.arange(n) - 0.5 * (n - 1)) * (2.0 / n)
    x, y = np.meshgrid(c, -c)
    rel = ellipse_sum(phantom_ellipses(variant_seed, slice_index), x, y)
    return np.clip(MU_WATER * rel, 0.0, MU_MAX)


def mu_to_hu(mu):
    """Shifted Hounsfield units: air 0, water 1000."""
    return 1000.0 * np.asarray(mu) / MU_WATER


def hu_to_mu(hu):
    return np.asarray(hu) * MU_WATER / 1000.0


@dataclass(frozen=True)
class NoiseModel:
    incident_photons: float = 1e4
    electronic_variance: float = 25.0
    clamp_epsilon: float = CLAMP_EPS
    seed: int = 0

    def __post_init__(self):
        if not self.incident_photons > 0:
            raise ValueError("incident_photons must be positive")
        if not self.electronic_variance >= 0:
            raise ValueError("electronic_variance must be nonnegative")
        if not 0 < self.clamp_epsilon < self.incident_photons:
            raise ValueError("clamp_epsilon must lie in (0, incident_photons)")


def simulate_counts(ideal, noise: NoiseModel, rng=None, poisson: bool = True) -> np.ndarray:
    """Pre-log detector counts ``max(Poisson(I0 exp(-l)) + N(0, s2), eps)``.

    With ``poisson=False`` the Poisson draw is replaced by its mean.
    """
    ideal = np.asarray(ideal, dtype=np.float64)
    if not np.all(np.isfinite(ideal)):
        raise ValueError("ideal sinogram contains non-finite entries")
    if np.any(ideal < 0):
        raise ValueError("ideal line integrals must be nonnegative")
    if rng is None:
        rng = make_rng(noise.seed)
    mean = noise.incident_photons * np.exp(-ideal)
    counts = rng.poisson(mean).astype(np.float64) if poisson else mean.copy()
    if noise.electronic_variance > 0:
        counts += rng.normal(0.0, math.sqrt(noise.electronic_variance), size=ideal.shape)
    return np.maximum(counts, noise.clamp_epsilon)


def simulate_low_dose(ideal, noise: NoiseModel, rng=None, poisson: bool = True) -> np.ndarray:
    """Post-log low-dose sinogram under the Poisson-Gaussian model."""
    counts = simulate_counts(ideal, noise, rng=rng, poisson=poisson)
    return -np.log(counts / noise.incident_photons)


def statistical_weights(y, sigma2: float) -> np.ndarray:
    """Weights ``y^2 / (y + sigma2)``; nonpositive entries map to 0."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    y = np.asarray(y, dtype=np.float64)
    pos = y > 0
    w = np.zeros_like(y)
    w[pos] = y[pos] ** 2 / (y[pos] + sigma2)
    return w


def weights_from_sinogram(y, noise: NoiseModel) -> np.ndarray:
    """Statistical weights of a post-log sinogram, evaluated on its counts ``I0 exp(-y)``."""
    counts = noise.incident_photons * np.exp(-np.asarray(y, dtype=np.float64))
    return statistical_weights(counts, noise.electronic_variance)


# --------------------------------------------------------------------------- datasets


@dataclass
class Sample:
    sample_id: str
    split: str
    patient_seed: int
    slice_index: int
    y: np.ndarray
    fbp: np.ndarray
    ref: np.ndarray


@dataclass
class Dataset:
    geometry: FanBeamGeometry
    noise: NoiseModel
    samples: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]


def allocate_slices(seeds, n_pairs: int) -> list[tuple[int, int]]:
    """Spread ``n_pairs`` samples round-robin over patient seeds as ``(seed, slice)``."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one patient seed")
    return [(seeds[k % len(seeds)], k // len(seeds)) for k in range(n_pairs)]


_SPLIT_CODE = {"train": 1, "test": 2}


def build_dataset(
    geom: FanBeamGeometry,
    noise: NoiseModel,
    train_seeds,
    test_seeds,
    n_train: int,
    n_test: int,
    filter_kind: str = "ramp",
) -> Dataset:
    """Simulate the train/test cohort. Patient seeds must not overlap between splits."""
    from .fbp import fbp_reconstruct
    from .projector import forward_project

    overlap = set(train_seeds) & set(test_seeds)
    if overlap:
        raise ValueError(f"patient seeds shared by train and test: {sorted(overlap)}")
    ds = Dataset(geom, noise)
    for split, seeds, count in (("train", train_seeds, n_train), ("test", test_seeds, n_test)):
        for k, (seed, sl) in enumerate(allocate_slices(seeds, count)):
            ref = shepp_logan(geom.n_pixels_per_side, seed, sl)
            ideal = forward_project(geom, ref)
            y = simulate_low_dose(ideal, noise, rng=make_rng(noise.seed, _SPLIT_CODE[split], k))
            x0 = fbp_reconstruct(geom, y, filter_kind)
            ds.samples.append(Sample(f"{split}_{k:03d}", split, seed, sl, y, x0, ref))
    return ds


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    members = []
    for s in ds.samples:
        files = {}
        for key in ("y", "fbp", "ref"):
            name = f"{s.sample_id}_{key}.mcta"
            save_array(directory / name, getattr(s, key))
            files[key] = name
        members.append(
            {
                "id": s.sample_id,
                "split": s.split,
                "patient_seed": s.patient_seed,
                "slice": s.slice_index,
                "files": files,
            }
        )
    manifest = {
        "geometry": ds.geometry.to_dict(),
        "noise": asdict(ds.noise),
        "members": members,
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2))
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    geom = FanBeamGeometry(**manifest["geometry"])
    ds = Dataset(geom, NoiseModel(**manifest["noise"]))
    for m in manifest["members"]:
        arrays = {
            "y": load_array(directory / m["files"]["y"], geom.sino_shape),
            "fbp": load_array(directory / m["files"]["fbp"], geom.shape),
            "ref": load_array(directory / m["files"]["ref"], geom.shape),
        }
        ds.samples.append(
            Sample(m["id"], m["split"], m["patient_seed"], m["slice"], **arrays)
        )
    return ds
