"""Small numpy CNN engine for the four-layer image-refining denoisers.

Activations are channel-last: a single image is ``(H, W, C)`` and a batch is
``(B, H, W, C)``. Convolution weights are ``(out_ch, in_ch, k, k)`` and use the
cross-correlation convention with "same" zero padding and stride 1.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import MU_WATER, make_rng

log = logging.getLogger(__name__)

VARIANTS = ("simplecnn", "simplecnn-rsn", "dn-rsn")


class NumericalError(FloatingPointError):
    """Non-finite values appeared during optimisation."""


@dataclass
class ConvLayer:
    weight: np.ndarray
    bias: np.ndarray
    rsn_state: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"weight must be (out, in, k, k), got {self.weight.shape}")
        if self.weight.shape[2] % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias length must equal the number of output channels")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def _as_batch(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def _im2col(x, k):
    """Columns ordered (row offset, column offset, channel), shape ``(B*H*W, k*k*C)``."""
    B, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((B, H, W, k, k, C), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xp[:, di : di + H, dj : dj + W, :]
    return cols.reshape(B * H * W, k * k * C)


def _weight_matrix(weight):
    # (out, in, k, k) -> (out, k*k*in), matching _im2col's column order
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _adjoint_matrix(weight):
    # flipped kernel with in/out swapped, rows ordered like _im2col of the output
    return weight[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, weight.shape[1])


def conv2d(layer: ConvLayer, x, return_cache: bool = False):
    """Apply the convolution (with bias). Accepts ``(H, W, C)`` or ``(B, H, W, C)``."""
    xb, single = _as_batch(x)
    if xb.shape[-1] != layer.in_channels:
        raise ValueError(
            f"input has {xb.shape[-1]} channels but the layer expects {layer.in_channels}"
        )
    B, H, W, _ = xb.shape
    cols = _im2col(xb, layer.kernel_size)
    out = cols @ _weight_matrix(layer.weight).T
    out += layer.bias
    out = out.reshape(B, H, W, layer.out_channels)
    if single:
        out = out[0]
    if return_cache:
        return out, (cols, xb.shape, single)
    return out


def conv_adjoint(weight, g):
    """Adjoint of the bias-free convolution, applied to ``g`` of shape ``(B, H, W, out_ch)``."""
    B, H, W, _ = g.shape
    out = _im2col(g, weight.shape[2]) @ _adjoint_matrix(weight)
    return out.reshape(B, H, W, weight.shape[1])


def conv2d_backward(layer: ConvLayer, grad_out, cache, need_input_grad: bool = True):
    """Gradients ``(grad_input, grad_weight, grad_bias)`` of :func:`conv2d`.

    ``grad_input`` is None when ``need_input_grad`` is false.
    """
    cols, in_shape, single = cache
    g = grad_out[None] if single else grad_out
    gm = g.reshape(-1, layer.out_channels)
    k, cin = layer.kernel_size, layer.in_channels
    grad_w = (gm.T @ cols).reshape(layer.out_channels, k, k, cin).transpose(0, 3, 1, 2)
    grad_w = np.ascontiguousarray(grad_w)
    grad_b = gm.sum(axis=0)
    grad_x = None
    if need_input_grad:
        grad_x = conv_adjoint(layer.weight, g)
        if single:
            grad_x = grad_x[0]
    return grad_x, grad_w, grad_b


def conv_linear(weight, x):
    """Bias-free convolution of a batch ``(B, H, W, C)``."""
    zero = np.zeros(weight.shape[0], dtype=weight.dtype)
    return conv2d(ConvLayer(weight, zero), x)


def relu(x):
    return np.maximum(x, 0)


# --------------------------------------------------------------------------- spectral norm


def conv_spectral_norm(weight, spatial_dims, iters=100, state=None, seed=0):
    """Power-iteration estimate of the operator norm of a zero-padded convolution.

    Returns ``(sigma, (u, v))`` where ``u`` lives in the input space and ``v``
    in the output space; pass the pair back as ``state`` to warm-start.
    """
    H, W = spatial_dims
    if state is None:
        u = make_rng(seed).standard_normal((1, H, W, weight.shape[1])).astype(weight.dtype)
    else:
        u = state[0].astype(weight.dtype, copy=True)
    u /= np.linalg.norm(u)
    v = None
    sigma = 0.0
    for _ in range(iters):
        v = conv_linear(weight, u)
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0, (u, v)
        v /= nv
        u = conv_adjoint(weight, v)
        sigma = float(np.linalg.norm(u))
        u /= sigma
    return sigma, (u, v)


def spectral_normalize(layer: ConvLayer, spatial_dims, power_iters: int = 5) -> ConvLayer:
    """Divide the weights by the estimated operator norm; persists the singular vectors."""
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    sigma, state = conv_spectral_norm(layer.weight, spatial_dims, power_iters, layer.rsn_state)
    w = layer.weight / sigma if sigma > 0 else layer.weight.copy()
    return ConvLayer(w, layer.bias.copy(), state)


# --------------------------------------------------------------------------- denoiser


@dataclass
class Denoiser:
    """Four-layer CNN refiner.

    Residual variants return ``x - R(x)``; ``dn-rsn`` returns the network output
    directly. Images are multiplied by ``scale`` before entering the network
    and divided by it on the way out, so the network sees water near 1.
    """

    layers: list[ConvLayer]
    variant: str = "simplecnn"
    scale: float = 1.0 / MU_WATER

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")

    @property
    def residual(self) -> bool:
        return self.variant != "dn-rsn"

    @property
    def uses_rsn(self) -> bool:
        return self.variant.endswith("rsn")

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_params(self, params) -> "Denoiser":
        layers = [
            ConvLayer(params[2 * i], params[2 * i + 1], layer.rsn_state)
            for i, layer in enumerate(self.layers)
        ]
        return Denoiser(layers, self.variant, self.scale)

    def copy(self) -> "Denoiser":
        return copy.deepcopy(self)

    def network(self, h, keep: bool = False):
        """Run the raw network on ``(B, H, W, 1)``; optionally keep caches for backprop."""
        caches = []
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            pre, cache = conv2d(layer, h, return_cache=True)
            h = relu(pre) if i < n - 1 else pre
            if keep:
                caches.append((cache, pre))
        return h, caches

    def __call__(self, x):
        return denoiser_apply(self, x)


def init_denoiser(variant="simplecnn", channels=64, kernel=3, n_layers=4, seed=0, dtype=np.float32):
    """He-normal weights (variance 2/fan_in), zero biases."""
    rng = make_rng(seed)
    chans = [1] + [channels] * (n_layers - 1) + [1]
    layers = []
    for cin, cout in zip(chans[:-1], chans[1:]):
        std = math.sqrt(2.0 / (cin * kernel * kernel))
        w = (rng.standard_normal((cout, cin, kernel, kernel)) * std).astype(dtype)
        layers.append(ConvLayer(w, np.zeros(cout, dtype=dtype)))
    return Denoiser(layers, variant)


def zero_denoiser(variant="simplecnn", channels=64, dtype=np.float64) -> Denoiser:
    d = init_denoiser(variant, channels, dtype=dtype)
    return d.with_params([np.zeros_like(p) for p in d.params()])


def denoiser_apply(params: Denoiser, x) -> np.ndarray:
    """Denoise one image ``(N, N)`` or a stack ``(B, N, N)``; output matches the input shape."""
    x = np.asarray(x)
    xb = x[None] if x.ndim == 2 else x
    dt = params.dtype
    h, _ = params.network((xb * params.scale).astype(dt)[..., None])
    r = h[..., 0].astype(np.float64) / params.scale
    out = xb - r if params.residual else r
    return out[0] if x.ndim == 2 else out


def mse_loss_and_grads(params: Denoiser, x_in, x_ref):
    """Mean-square error of ``D(x_in)`` against ``x_ref`` over a batch ``(B, N, N)``.

    Returns ``(loss, grads)`` with grads aligned to ``params.params()``.
    Arithmetic runs in the parameter dtype.
    """
    dt = params.dtype
    s = params.scale
    x_in = np.asarray(x_in, dtype=dt)
    x_ref = np.asarray(x_ref, dtype=dt)
    h, caches = params.network((x_in * s)[..., None], keep=True)
    r = h[..., 0] / dt.type(s)
    out = x_in - r if params.residual else r
    diff = out - x_ref
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    g_out = (2.0 / diff.size) * diff
    g = (-g_out if params.residual else g_out) / dt.type(s)
    g = g[..., None].astype(dt)
    grads = [None] * (2 * len(params.layers))
    for i in reversed(range(len(params.layers))):
        cache, pre = caches[i]
        if i < len(params.layers) - 1:
            g = g * (pre > 0)
        g, gw, gb = conv2d_backward(params.layers[i], g, cache, need_input_grad=i > 0)
        grads[2 * i] = gw
        grads[2 * i + 1] = gb
    return loss, grads


# --------------------------------------------------------------------------- optimiser


def flush_subnormal(a: np.ndarray) -> np.ndarray:
    """Zero out subnormal entries, which are far slower in matmul than normal floats."""
    tiny = np.finfo(a.dtype).tiny
    return np.where(np.abs(a) < tiny, a.dtype.type(0), a)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient; Adam step rejected")
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = beta1 * mi + (1.0 - beta1) * g
        vi = beta2 * vi + (1.0 - beta2) * g * g
        step = lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        new_p.append(flush_subnormal((p - step).astype(p.dtype)))
        new_m.append(flush_subnormal(mi))
        new_v.append(flush_subnormal(vi))
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------- training


@dataclass
class TrainHyper:
    epochs: int = 100
    batch_size: int = 5
    lr0: float = 1e-3
    decay: float = 0.9
    decay_every: int = 10
    rsn_power_iters: int = 5

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.decay ** (epoch // self.decay_every)


def normalize_all(d: Denoiser, spatial_dims, power_iters) -> Denoiser:
    return Denoiser(
        [spectral_normalize(layer, spatial_dims, power_iters) for layer in d.layers],
        d.variant,
        d.scale,
    )


def denoiser_train_layer(pairs, init: Denoiser, hyper: TrainHyper = TrainHyper(), seed=0, tag=0):
    """Fit one denoiser to ``(x_in, x_ref)`` image pairs with mini-batch Adam.

    Returns ``(denoiser, per_epoch_mean_loss)``. RSN variants re-normalise every
    conv layer after each optimiser step. ``tag`` keys the shuffling stream
    (e.g. the network layer index).
    """
    if len(pairs) == 0:
        raise ValueError("training set is empty")
    x_in = np.stack([np.asarray(p[0]) for p in pairs])
    x_ref = np.stack([np.asarray(p[1]) for p in pairs])
    spatial = x_in.shape[1:]
    d = init.copy()
    state = AdamState()
    trace = []
    n = len(pairs)
    for epoch in range(hyper.epochs):
        lr = hyper.lr_at(epoch)
        order = make_rng(seed, tag, epoch).permutation(n)
        losses = []
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            loss, grads = mse_loss_and_grads(d, x_in[idx], x_ref[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            new_params, state = adam_step(d.params(), grads, state, lr)
            d = d.with_params(new_params)
            if d.uses_rsn:
                # the division shrinks gradient-free weights geometrically toward subnormals
                d = normalize_all(d, spatial, hyper.rsn_power_iters)
                d = d.with_params([flush_subnormal(p) for p in d.params()])
            losses.append(loss * len(idx))
        trace.append(sum(losses) / n)
        log.debug("tag %s epoch %d lr %.3g loss %.4g", tag, epoch, lr, trace[-1])
    return d, trace
