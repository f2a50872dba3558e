"""Momentum-Net: refine, extrapolate, and majorized PWLS update, repeated per layer."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrayio import atomic_write_text, load_array, save_array
from .data import NoiseModel, weights_from_sinogram
from .geometry import FanBeamGeometry
from .metrics import rmse_hu
from .nn import ConvLayer, Denoiser, NumericalError, TrainHyper, denoiser_train_layer, init_denoiser
from .projector import compute_majorizer_diag, estimate_spectral_radius, get_projector

log = logging.getLogger(__name__)

DELTA = 1.0 - np.finfo(np.float64).eps


class LayerError(RuntimeError):
    """A failure inside one Momentum-Net layer; ``layer`` holds its index."""

    def __init__(self, layer: int, cause: Exception):
        super().__init__(f"layer {layer}: {cause}")
        self.layer = layer
        self.cause = cause


@dataclass
class MomentumState:
    x_curr: np.ndarray
    x_prev: np.ndarray
    t: float = 1.0
    layer_index: int = 0

    @classmethod
    def start(cls, x0) -> "MomentumState":
        x0 = np.asarray(x0, dtype=np.float64)
        return cls(x0.copy(), x0.copy(), 1.0, 0)


@dataclass
class NetConfig:
    n_layers: int = 50
    chi: float = 119.0
    rho: float = 0.5
    delta: float = DELTA
    use_momentum: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if not self.chi > 0:
            raise ValueError("chi must be positive")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")


@dataclass
class ReconProblem:
    """Per-sample quantities the MBIR module reuses across layers."""

    geom: FanBeamGeometry
    y: np.ndarray
    w: np.ndarray
    beta: float
    majorizer: np.ndarray

    @classmethod
    def from_sinogram(cls, geom, y, noise: NoiseModel, chi: float) -> "ReconProblem":
        w = weights_from_sinogram(y, noise)
        return cls(geom, np.asarray(y, dtype=np.float64), w, select_beta(geom, w, chi),
                   compute_majorizer_diag(geom, w))


# --------------------------------------------------------------------------- modules


def refine(x, denoiser, rho: float):
    """Relaxed refinement ``(1 - rho) x + rho D(x)``."""
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    return (1.0 - rho) * x + rho * denoiser(x)


def momentum_coeffs(t_prev: float) -> tuple[float, float]:
    """Next ``t`` and the momentum weight ``(t_prev - 1) / t``."""
    if not t_prev >= 1:
        raise ValueError(f"t_prev must be >= 1, got {t_prev}")
    t = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_prev * t_prev))
    return t, (t_prev - 1.0) / t


def extrapolate(x_curr, x_prev, m: float, delta: float = DELTA):
    x_curr = np.asarray(x_curr, dtype=np.float64)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    if x_curr.shape != x_prev.shape:
        raise ValueError(f"shape mismatch {x_curr.shape} vs {x_prev.shape}")
    if not 0 <= m <= 1:
        raise ValueError("m must lie in [0, 1]")
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    return x_curr + delta * delta * m * (x_curr - x_prev)


def select_beta(geom: FanBeamGeometry, w, chi: float, max_iters: int = 200, tol: float = 1e-8) -> float:
    """Regularization weight from the spectral radius: ``lambda_max(A^T W A) / chi``."""
    if not chi > 0:
        raise ValueError("chi must be positive")
    lam = estimate_spectral_radius(geom, w, max_iters=max_iters, tol=tol)
    if not lam > 0:
        raise ValueError("spectral radius estimate is not positive (all-zero weights?)")
    return lam / chi


def pwls_cost(geom, y, w, z, x, beta) -> float:
    """``0.5 ||y - A x||_W^2 + 0.5 beta ||x - z||^2``."""
    r = np.asarray(y) - get_projector(geom).forward(x)
    return 0.5 * float(np.sum(w * r * r)) + 0.5 * beta * float(np.sum((np.asarray(x) - z) ** 2))


def mbir_update(geom, y, w, z, x_ext, beta, majorizer_diag=None):
    """One majorized PWLS step from the extrapolated point, projected onto ``x >= 0``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    proj = get_projector(geom)
    z = np.asarray(z, dtype=np.float64)
    x_ext = np.asarray(x_ext, dtype=np.float64)
    if z.shape != geom.shape or x_ext.shape != geom.shape:
        raise ValueError(f"images must have shape {geom.shape}")
    if majorizer_diag is None:
        majorizer_diag = compute_majorizer_diag(geom, w)
    grad = proj.back(w * (proj.forward(x_ext) - y)) + beta * (x_ext - z)
    return np.maximum(x_ext - grad / (majorizer_diag + beta), 0.0)


def momentum_layer(state: MomentumState, denoiser, problem: ReconProblem, cfg: NetConfig):
    """Advance ``state`` by one layer; returns ``(new_state, z)``."""
    z = refine(state.x_curr, denoiser, cfg.rho)
    t, m = state.t, 0.0
    if state.layer_index > 0 and cfg.use_momentum:
        t, m = momentum_coeffs(state.t)
    x_ext = extrapolate(state.x_curr, state.x_prev, m, cfg.delta)
    x_new = mbir_update(problem.geom, problem.y, problem.w, z, x_ext, problem.beta, problem.majorizer)
    if not np.all(np.isfinite(x_new)):
        raise NumericalError("non-finite reconstruction")
    return MomentumState(x_new, state.x_curr, t, state.layer_index + 1), z


@dataclass
class Trace:
    rmse: list = field(default_factory=list)
    images: list = field(default_factory=list)


def run_momentum_net(cfg: NetConfig, denoisers, problem: ReconProblem, x0, ref=None,
                     keep_images: bool = False):
    """Reconstruct from ``x0`` through ``len(denoisers)`` layers.

    Returns ``(image, trace)``; ``trace.rmse`` has one entry per layer when
    ``ref`` is given.
    """
    if len(denoisers) != cfg.n_layers:
        raise ValueError(f"expected {cfg.n_layers} denoisers, got {len(denoisers)}")
    state = MomentumState.start(x0)
    trace = Trace()
    for l, d in enumerate(denoisers):
        try:
            state, _ = momentum_layer(state, d, problem, cfg)
        except Exception as exc:
            raise LayerError(l, exc) from exc
        if ref is not None:
            trace.rmse.append(rmse_hu(state.x_curr, ref))
        if keep_images:
            trace.images.append(state.x_curr.copy())
    return state.x_curr, trace


# --------------------------------------------------------------------------- checkpoints


def save_denoiser(d: Denoiser, directory, layer_index: int, epochs: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, layer in enumerate(d.layers):
        save_array(directory / f"conv{i}_weight.mcta", layer.weight)
        save_array(directory / f"conv{i}_bias.mcta", layer.bias)
        if layer.rsn_state is not None:
            save_array(directory / f"conv{i}_rsn_u.mcta", layer.rsn_state[0])
            save_array(directory / f"conv{i}_rsn_v.mcta", layer.rsn_state[1])
    manifest = {
        "variant": d.variant,
        "layer_index": layer_index,
        "epochs": epochs,
        "scale": d.scale,
        "layers": [list(layer.weight.shape) for layer in d.layers],
        "rsn_state": [layer.rsn_state is not None for layer in d.layers],
    }
    atomic_write_text(directory / "params.json", json.dumps(manifest, indent=2))
    return directory


def load_denoiser(directory) -> Denoiser:
    directory = Path(directory)
    manifest = json.loads((directory / "params.json").read_text())
    layers = []
    for i, shape in enumerate(manifest["layers"]):
        w = load_array(directory / f"conv{i}_weight.mcta", shape)
        b = load_array(directory / f"conv{i}_bias.mcta", (shape[0],))
        state = None
        if manifest["rsn_state"][i]:
            state = (load_array(directory / f"conv{i}_rsn_u.mcta"),
                     load_array(directory / f"conv{i}_rsn_v.mcta"))
        layers.append(ConvLayer(w, b, state))
    return Denoiser(layers, manifest["variant"], manifest["scale"])


def load_checkpoints(directory) -> list[Denoiser]:
    directory = Path(directory)
    dirs = sorted(directory.glob("layer_*"), key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise FileNotFoundError(f"no layer_* checkpoints under {directory}")
    return [load_denoiser(p) for p in dirs]


# --------------------------------------------------------------------------- training


def train_momentum_net(samples, geom, noise, cfg: NetConfig, variant="simplecnn",
                       hyper: TrainHyper = TrainHyper(), first_hyper: TrainHyper | None = None,
                       channels: int = 64, checkpoint_dir=None, on_layer=None):
    """Greedy layer-wise training over ``samples`` (objects with ``y``, ``fbp``, ``ref``).

    Layer ``l`` trains on the current iterates ``x^(l)`` and warm-starts from
    layer ``l - 1``. Returns ``(denoisers, loss_traces)``.
    """
    if not samples:
        raise ValueError("training split is empty")
    first_hyper = first_hyper or hyper
    problems = [ReconProblem.from_sinogram(geom, s.y, noise, cfg.chi) for s in samples]
    states = [MomentumState.start(s.fbp) for s in samples]
    denoisers, losses = [], []
    d = init_denoiser(variant, channels=channels, seed=cfg.seed)
    for l in range(cfg.n_layers):
        h = first_hyper if l == 0 else hyper
        pairs = [(st.x_curr, s.ref) for st, s in zip(states, samples)]
        try:
            d, trace = denoiser_train_layer(pairs, d, h, seed=cfg.seed, tag=l)
        except NumericalError as exc:
            raise LayerError(l, exc) from exc
        denoisers.append(d)
        losses.append(trace)
        if checkpoint_dir is not None:
            save_denoiser(d, Path(checkpoint_dir) / f"layer_{l}", l, h.epochs)
        try:
            states = [momentum_layer(st, d, p, cfg)[0] for st, p in zip(states, problems)]
        except Exception as exc:
            raise LayerError(l, exc) from exc
        if on_layer is not None:
            on_layer(l, trace, states)
        log.info("layer %d trained, final loss %.4g", l, trace[-1])
    return denoisers, losses
