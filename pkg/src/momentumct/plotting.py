"""PNG export: windowed grayscale images and summary figures."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image as PILImage  # noqa: E402

from .arrayio import atomic_write_bytes  # noqa: E402
from .data import mu_to_hu  # noqa: E402

DEFAULT_WINDOW = (1000.0, 400.0)

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "figure.dpi": 120,
    }
)


def window_to_gray(hu, window=DEFAULT_WINDOW) -> np.ndarray:
    """Linear HU window ``(center, width)`` mapped onto 0..255, clamped."""
    center, width = window
    if not width > 0:
        raise ValueError("window width must be positive")
    lo = center - 0.5 * width
    g = np.rint((np.asarray(hu, dtype=np.float64) - lo) / width * 255.0)
    return np.clip(g, 0, 255).astype(np.uint8)


def export_image(img, path, window=DEFAULT_WINDOW) -> Path:
    """Write an attenuation image (per mm) as an 8-bit grayscale PNG."""
    gray = window_to_gray(mu_to_hu(img), window)
    buf = io.BytesIO()
    PILImage.fromarray(gray, mode="L").save(buf, format="PNG")
    path = Path(path)
    atomic_write_bytes(path, buf.getvalue())
    return path


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    path = Path(path)
    atomic_write_bytes(path, buf.getvalue())
    return path


def plot_rmse_curves(curves: dict, path) -> Path:
    """Mean RMSE (HU) against layer index, one line per method."""
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    for name, series in curves.items():
        layers, values = zip(*series)
        ax.plot(layers, values, label=name, lw=1.2)
    ax.set_xlabel("Layer")
    ax.set_ylabel("Mean RMSE (HU)")
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_panel(images: dict, path, window=DEFAULT_WINDOW, rmse: dict | None = None) -> Path:
    """Side-by-side windowed images with optional RMSE captions."""
    center, width = window
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.0 * n, 2.2))
    axes = np.atleast_1d(axes)
    for ax, (name, img) in zip(axes, images.items()):
        ax.imshow(mu_to_hu(img), cmap="gray", vmin=center - width / 2, vmax=center + width / 2)
        title = name if not rmse or name not in rmse else f"{name}\n{rmse[name]:.1f} HU"
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    return _save(fig, path)
