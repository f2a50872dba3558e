"""Orchestration behind the command-line interface.

Run directory layout::

    <output_dir>/
      run.json                     dataset location and geometry/noise used
      <variant>/checkpoints/layer_<l>/
      <variant>/train_log.csv      layer, epoch, loss
      <variant>/trace.csv          layer, sample_id, rmse_hu (layer 0 = FBP input)
      <variant>/recon/<id>.mcta    final test reconstructions
      metrics.csv, curve.csv, figures/   written by ``evaluate``
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .arrayio import atomic_write_text, load_array, save_array
from .config import ExperimentConfig
from .data import Dataset, build_dataset, load_dataset, save_dataset
from .fbp import fbp_reconstruct
from .metrics import mean_std, rmse_hu
from .momentum import ReconProblem, load_checkpoints, run_momentum_net, train_momentum_net
from .nn import VARIANTS
from .plotting import export_image, plot_panel, plot_rmse_curves

log = logging.getLogger(__name__)

TRACE_FIELDS = ("layer", "sample_id", "rmse_hu")
METRIC_FIELDS = ("method", "mean_rmse_hu", "std_rmse_hu", "n")


class MissingTracesError(FileNotFoundError):
    pass


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trace(path, rows) -> None:
    """Rows of ``(layer, sample_id, rmse_hu)``."""
    atomic_write_text(path, _csv_text(TRACE_FIELDS, [(l, s, _fmt(r)) for l, s, r in rows]))


def read_trace(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != TRACE_FIELDS:
            raise ValueError(f"{path}: expected columns {TRACE_FIELDS}, got {reader.fieldnames}")
        return [(int(r["layer"]), r["sample_id"], float(r["rmse_hu"])) for r in reader]


# --------------------------------------------------------------------------- commands


def simulate(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    ds = build_dataset(cfg.geometry, cfg.noise, d.train_seeds, d.test_seeds, d.n_train, d.n_test,
                       d.fbp_filter)
    save_dataset(ds, d.path)
    log.info("wrote %d samples to %s", len(ds.samples), d.path)
    return ds


def trace_rows(samples, geom, noise, net, denoisers, mask=None):
    """Reconstruct every sample and return trace rows plus final images."""
    rows, finals = [], {}
    for s in samples:
        problem = ReconProblem.from_sinogram(geom, s.y, noise, net.chi)
        x, trace = run_momentum_net(net, denoisers, problem, s.fbp, ref=None, keep_images=True)
        rows.append((0, s.sample_id, rmse_hu(s.fbp, s.ref, mask)))
        rows += [(l + 1, s.sample_id, rmse_hu(img, s.ref, mask)) for l, img in enumerate(trace.images)]
        finals[s.sample_id] = x
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows, finals


def train(cfg: ExperimentConfig, variant: str | None = None) -> Path:
    """Greedy training on the train split, then a traced reconstruction of the test split."""
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    ds = load_dataset(cfg.dataset.path)
    vdir = Path(cfg.output_dir) / variant
    vdir.mkdir(parents=True, exist_ok=True)
    log_rows = []

    def on_layer(l, losses, states):
        log_rows.extend((l, e, _fmt(v)) for e, v in enumerate(losses))

    denoisers, _ = train_momentum_net(
        ds.split("train"), ds.geometry, ds.noise, cfg.net, variant,
        hyper=cfg.train.hyper(), first_hyper=cfg.train.hyper(first=True),
        channels=cfg.train.channels, checkpoint_dir=vdir / "checkpoints", on_layer=on_layer,
    )
    atomic_write_text(vdir / "train_log.csv", _csv_text(("layer", "epoch", "loss"), log_rows))

    rows, finals = trace_rows(ds.split("test"), ds.geometry, ds.noise, cfg.net, denoisers)
    write_trace(vdir / "trace.csv", rows)
    for sid, img in finals.items():
        save_array(vdir / "recon" / f"{sid}.mcta", img)
    run_info = {
        "dataset": str(Path(cfg.dataset.path).resolve()),
        "geometry": ds.geometry.to_dict(),
        "noise": asdict(ds.noise),
        "window": list(cfg.window),
    }
    atomic_write_text(Path(cfg.output_dir) / "run.json", json.dumps(run_info, indent=2))
    return vdir


def reconstruct(cfg: ExperimentConfig, checkpoints, sinogram_path, output=None,
                reference=None, mask=None):
    """Reconstruct one post-log sinogram file with trained checkpoints.

    Writes ``<output>.mcta`` and, when a reference is given, ``<output>_trace.csv``.
    Returns ``(image, rmse_per_layer or None)``.
    """
    geom = cfg.geometry
    y = load_array(sinogram_path, geom.sino_shape)
    denoisers = load_checkpoints(checkpoints)
    net = replace(cfg.net, n_layers=len(denoisers))
    x0 = fbp_reconstruct(geom, y, cfg.dataset.fbp_filter)
    problem = ReconProblem.from_sinogram(geom, y, cfg.noise, net.chi)
    ref = None if reference is None else load_array(reference, geom.shape)
    msk = None if mask is None else load_array(mask, geom.shape).astype(bool)
    x, trace = run_momentum_net(net, denoisers, problem, x0, keep_images=ref is not None)
    rmse = None
    if output is not None:
        output = Path(output)
        save_array(output.with_suffix(".mcta"), x)
        export_image(x, output.with_suffix(".png"), cfg.window)
    if ref is not None:
        sid = Path(sinogram_path).stem
        rmse = [rmse_hu(img, ref, msk) for img in trace.images]
        if output is not None:
            rows = [(0, sid, rmse_hu(x0, ref, msk))] + [(l + 1, sid, r) for l, r in enumerate(rmse)]
            write_trace(output.with_name(output.stem + "_trace.csv"), rows)
    return x, rmse


def summarize(run_dir) -> dict:
    """Write ``metrics.csv`` and ``curve.csv`` from every ``<variant>/trace.csv``.

    Returns a dict with ``metrics`` rows, ``curves`` and ``missing`` variants.
    """
    run_dir = Path(run_dir)
    traces, missing = {}, []
    for v in VARIANTS:
        vdir = run_dir / v
        if (vdir / "trace.csv").exists():
            traces[v] = read_trace(vdir / "trace.csv")
        elif vdir.exists():
            missing.append(v)
    if not traces:
        raise MissingTracesError(f"no trace.csv under {run_dir} (missing: {missing or 'all'})")

    metrics, curves = [], {}
    first = next(iter(traces.values()))
    fbp = [r for l, _, r in first if l == 0]
    m, s = mean_std(fbp)
    metrics.append(("fbp", m, s, len(fbp)))
    for v, rows in traces.items():
        by_layer = defaultdict(list)
        for l, _, r in rows:
            by_layer[l].append(r)
        last = max(by_layer)
        m, s = mean_std(by_layer[last])
        metrics.append((v, m, s, len(by_layer[last])))
        curves[v] = [(l, float(np.mean(by_layer[l]))) for l in sorted(by_layer)]

    atomic_write_text(
        run_dir / "metrics.csv",
        _csv_text(METRIC_FIELDS, [(n, _fmt(a), _fmt(b), c) for n, a, b, c in metrics]),
    )
    atomic_write_text(
        run_dir / "curve.csv",
        _csv_text(("method", "layer", "mean_rmse_hu"),
                  [(v, l, _fmt(r)) for v, series in curves.items() for l, r in series]),
    )
    if missing:
        log.warning("variants without traces: %s", ", ".join(missing))
    return {"metrics": metrics, "curves": curves, "missing": missing}


def evaluate(run_dir, n_panels: int = 3) -> dict:
    """Summarize a run and render the RMSE curve plus image panels."""
    run_dir = Path(run_dir)
    summary = summarize(run_dir)
    figdir = run_dir / "figures"
    plot_rmse_curves(summary["curves"], figdir / "rmse_vs_layer.png")

    info_path = run_dir / "run.json"
    if info_path.exists():
        info = json.loads(info_path.read_text())
        window = tuple(info.get("window", (1000.0, 400.0)))
        try:
            ds = load_dataset(info["dataset"])
        except FileNotFoundError:
            log.warning("dataset %s not found; skipping image panels", info["dataset"])
            return summary
        for s in ds.split("test")[:n_panels]:
            images = {"FBP": s.fbp}
            for v in summary["curves"]:
                p = run_dir / v / "recon" / f"{s.sample_id}.mcta"
                if p.exists():
                    images[v] = load_array(p, s.ref.shape)
            images["Reference"] = s.ref
            rmse = {k: rmse_hu(img, s.ref) for k, img in images.items() if k != "Reference"}
            plot_panel(images, figdir / f"panel_{s.sample_id}.png", window, rmse)
            for k, img in images.items():
                export_image(img, figdir / f"{s.sample_id}_{k.lower()}.png", window)
    summary["figures"] = figdir
    return summary
