"""Experiment configuration (TOML)."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .data import NoiseModel
from .geometry import FanBeamGeometry, GeometryError
from .momentum import NetConfig
from .nn import VARIANTS, TrainHyper


class ConfigError(ValueError):
    """Invalid or incomplete configuration file."""


@dataclass
class DatasetConfig:
    path: Path
    train_seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    test_seeds: list = field(default_factory=lambda: [7, 8, 9, 10])
    n_train: int = 20
    n_test: int = 12
    fbp_filter: str = "ramp"


@dataclass
class TrainConfig:
    channels: int = 64
    epochs: int = 100
    first_layer_epochs: int | None = None
    batch_size: int = 5
    lr: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 10
    rsn_power_iters: int = 5

    def hyper(self, first: bool = False) -> TrainHyper:
        epochs = self.first_layer_epochs if first and self.first_layer_epochs else self.epochs
        return TrainHyper(epochs, self.batch_size, self.lr, self.lr_decay, self.lr_decay_every,
                          self.rsn_power_iters)


@dataclass
class ExperimentConfig:
    geometry: FanBeamGeometry
    noise: NoiseModel
    dataset: DatasetConfig
    net: NetConfig
    train: TrainConfig
    variant: str = "simplecnn"
    output_dir: Path = Path("run")
    seed: int = 0
    keep_images: bool = False
    window: tuple = (1000.0, 400.0)
    source: Path | None = None


def _pick(cls, table: dict, section: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**table, **extra)
    except (TypeError, ValueError, GeometryError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def _geometry(table: dict) -> FanBeamGeometry:
    table = dict(table)
    try:
        if "detector_pitch" not in table:
            margin = table.pop("detector_margin", 1.05)
            return FanBeamGeometry.covering(margin=margin, **table)
        return FanBeamGeometry(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[geometry] {exc}") from exc


def parse_config(doc: dict, base_dir=Path("."), require_dataset: bool = False) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a parsed TOML document.

    Relative paths resolve against ``base_dir``.
    """
    base_dir = Path(base_dir)
    doc = dict(doc)
    for section in ("geometry", "dataset"):
        if section not in doc:
            raise ConfigError(f"missing [{section}] section")
    geometry = _geometry(doc.pop("geometry"))
    noise = _pick(NoiseModel, doc.pop("noise", {}), "noise")

    ds_table = dict(doc.pop("dataset"))
    if "path" not in ds_table:
        raise ConfigError("[dataset] needs a path")
    ds_table["path"] = base_dir / ds_table["path"]
    dataset = _pick(DatasetConfig, ds_table, "dataset")
    if set(dataset.train_seeds) & set(dataset.test_seeds):
        raise ConfigError("[dataset] train and test seeds overlap")
    if require_dataset and not (dataset.path / "manifest.json").exists():
        raise ConfigError(f"dataset {dataset.path} does not exist; run `simulate` first")

    net_table = dict(doc.pop("net", {}))
    net_table.setdefault("seed", doc.get("seed", 0))
    if "momentum" in net_table:
        net_table["use_momentum"] = net_table.pop("momentum")
    keep_images = bool(net_table.pop("keep_images", False))
    net = _pick(NetConfig, net_table, "net")
    train = _pick(TrainConfig, doc.pop("train", {}), "train")

    variant = doc.pop("variant", "simplecnn")
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
    window = doc.pop("window", [1000.0, 400.0])
    if len(window) != 2 or not window[1] > 0:
        raise ConfigError("window must be [center, width] with width > 0")
    out = base_dir / doc.pop("output_dir", "run")
    seed = int(doc.pop("seed", 0))
    if doc:
        raise ConfigError(f"unknown top-level keys: {sorted(doc)}")
    return ExperimentConfig(geometry, noise, dataset, net, train, variant, out, seed,
                            keep_images, tuple(window))


def load_config(path, require_dataset: bool = False) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = parse_config(doc, path.parent, require_dataset)
    cfg.source = path
    return cfg
