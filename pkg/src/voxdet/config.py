"""Run configuration: one YAML tree covering every pipeline stage.

The dataclasses own validation; this module only maps them to and from
plain dicts. Unknown keys are rejected rather than ignored so a typo in
a config file fails loudly instead of silently running defaults.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import yaml

from .detection_head import (
    ANCHOR_DIMS,
    ANCHOR_Z_CENTER,
    NEGATIVE_IOU,
    NMS_IOU_DEFAULT,
    POSITIVE_IOU,
)
from .evaluation import METRIC_BEV, METRIC_3D
from .network import NetworkConfig
from .trainer import TrainConfig
from .voxelizer import GridConfig, default_grid, mini_grid


@dataclass(frozen=True)
class DataPaths:
    scenes: str = "data/scenes"
    conceptual: str = "data/conceptual"
    out: str = "runs"


@dataclass(frozen=True)
class ConceptualConfig:
    m_bins: int = 24
    k_percent: float = 20.0
    min_points: int = 8

    def __post_init__(self):
        if self.m_bins < 1:
            raise ValueError("m_bins must be >= 1")
        if not (0.0 < self.k_percent <= 100.0):
            raise ValueError("k_percent must be in (0, 100]")


@dataclass(frozen=True)
class AnchorConfig:
    dims: tuple[float, float, float] = ANCHOR_DIMS
    z_center: float = ANCHOR_Z_CENTER
    positive_iou: float = POSITIVE_IOU
    negative_iou: float = NEGATIVE_IOU

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError("anchor dims must be three positive numbers")
        if not (0.0 <= self.negative_iou <= self.positive_iou <= 1.0):
            raise ValueError("need 0 <= negative_iou <= positive_iou <= 1")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    interpolation: int = 40
    metric: str = METRIC_BEV
    score_threshold: float = 0.1
    nms_iou: float = NMS_IOU_DEFAULT

    def __post_init__(self):
        if self.interpolation not in (11, 40):
            raise ValueError("interpolation must be 11 or 40")
        if self.metric not in (METRIC_BEV, METRIC_3D):
            raise ValueError(f"metric must be '{METRIC_BEV}' or '{METRIC_3D}'")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataPaths = field(default_factory=DataPaths)
    grid: GridConfig = field(default_factory=default_grid)
    network: NetworkConfig | None = None  # filled from grid in __post_init__
    conceptual: ConceptualConfig = field(default_factory=ConceptualConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.network is None:
            object.__setattr__(self, "network", NetworkConfig(grid=self.grid))
        if self.network.grid != self.grid:
            raise ValueError("network.grid must equal the top-level grid")


def default_run_config() -> RunConfig:
    return RunConfig()


def mini_run_config() -> RunConfig:
    """Desk-scale variant: 64x64x8 grid, short training schedule."""
    grid = mini_grid()
    return RunConfig(grid=grid, network=NetworkConfig(grid=grid),
                     train=TrainConfig(batch_size=2, epochs=10))


# network.grid is serialized once, at the top level
_NETWORK_FIELDS = tuple(f.name for f in fields(NetworkConfig) if f.name != "grid")
_TUPLE_KEYS = {"range_min", "range_max", "voxel_size", "stage_channels", "dims"}


def _section_dict(obj, names) -> dict:
    out = {}
    for name in names:
        value = getattr(obj, name)
        out[name] = list(value) if name in _TUPLE_KEYS else value
    return out


def to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "data": _section_dict(cfg.data, (f.name for f in fields(DataPaths))),
        "grid": _section_dict(cfg.grid, (f.name for f in fields(GridConfig))),
        "network": _section_dict(cfg.network, _NETWORK_FIELDS),
        "conceptual": _section_dict(cfg.conceptual, (f.name for f in fields(ConceptualConfig))),
        "anchors": _section_dict(cfg.anchors, (f.name for f in fields(AnchorConfig))),
        "train": _section_dict(cfg.train, (f.name for f in fields(TrainConfig))),
        "eval": _section_dict(cfg.eval, (f.name for f in fields(EvalConfig))),
    }


def _build_section(name: str, cls, raw: dict) -> object:
    known = {f.name for f in fields(cls)}
    if name == "network":
        known.discard("grid")
    for key in raw:
        if key not in known:
            raise ValueError(f"unknown key '{key}' in section '{name}'")
    kwargs = {k: tuple(v) if k in _TUPLE_KEYS else v for k, v in raw.items()}
    return kwargs if name == "network" else cls(**kwargs)


_SECTIONS = {
    "data": DataPaths,
    "grid": GridConfig,
    "network": NetworkConfig,
    "conceptual": ConceptualConfig,
    "anchors": AnchorConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ValueError("config root must be a mapping")
    for key in d:
        if key != "seed" and key not in _SECTIONS:
            raise ValueError(f"unknown config section '{key}'")
        if key != "seed" and not isinstance(d[key], dict):
            raise ValueError(f"section '{key}' must be a mapping")
    grid = (_build_section("grid", GridConfig, d["grid"])
            if "grid" in d else default_grid())
    net_kwargs = _build_section("network", NetworkConfig, d.get("network", {}))
    parts = {name: _build_section(name, cls, d[name])
             for name, cls in _SECTIONS.items()
             if name in d and name not in ("grid", "network")}
    return RunConfig(seed=int(d.get("seed", 0)), grid=grid,
                     network=NetworkConfig(grid=grid, **net_kwargs), **parts)


def dumps_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads_config(text: str) -> RunConfig:
    return from_dict(yaml.safe_load(text))


def save_config(path: str | os.PathLike, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_config(cfg))


def load_config(path: str | os.PathLike) -> RunConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        return loads_config(fh.read())
