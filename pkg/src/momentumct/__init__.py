"""Momentum-Net reconstruction for low-dose fan-beam CT."""

from .data import NoiseModel, build_dataset, shepp_logan, simulate_low_dose, statistical_weights
from .fbp import fbp_reconstruct
from .geometry import FanBeamGeometry
from .metrics import rmse_hu
from .momentum import (
    NetConfig,
    ReconProblem,
    extrapolate,
    mbir_update,
    momentum_coeffs,
    refine,
    run_momentum_net,
    select_beta,
    train_momentum_net,
)
from .nn import Denoiser, denoiser_apply, init_denoiser
from .projector import (
    back_project,
    compute_majorizer_diag,
    estimate_spectral_radius,
    forward_project,
)

__version__ = "0.1.0"
