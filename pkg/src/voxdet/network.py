"""The two siamese detector branches and their shared detection trunk.

Both branches run voxelize -> per-voxel linear embed -> four sparse stages
-> dense BEV -> adaptation layer -> small conv head.  The live branch's
adaptation layer is a deformable 5x5 conv whose offsets come from a
zero-initialized side conv; the reference branch uses a rigid 5x5 conv of
identical weight shape, so checkpoints cross-load for every shared layer.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor
from .geometry import PointCloud
from .sparse_conv import STRIDED, SUBMANIFOLD, build_rulebook, sparse_conv, squeeze_height, to_dense
from .voxelizer import GridConfig, SparseVoxelTensor, mini_grid, voxelize

SPATIAL_DOWNSAMPLE = 8  # three stride-2 stages


def _collapse_kernel(z_in: int) -> tuple[int, int]:
    """Height-collapse kernel and stride for the final stage."""
    kz = min(3, z_in)
    sz = 2 if z_in > 2 else 1
    return kz, sz


@dataclass(frozen=True)
class NetworkConfig:
    grid: GridConfig = field(default_factory=mini_grid)
    embed_channels: int = 128
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    deform_kernel: int = 5
    adapt_channels: int = 128
    head_channels: int = 128
    num_yaws: int = 2

    def __post_init__(self):
        nx, ny, nz = self.grid.spatial_shape
        if nx % SPATIAL_DOWNSAMPLE or ny % SPATIAL_DOWNSAMPLE:
            raise ValueError(
                f"grid BEV dims {nx}x{ny} must be divisible by {SPATIAL_DOWNSAMPLE}")
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels must list four stages")
        if self.deform_kernel % 2 == 0:
            raise ValueError("deform_kernel must be odd")

    @property
    def bev_shape(self) -> tuple[int, int]:
        """(H, W) of the backbone output feature map."""
        nx, ny, _ = self.grid.spatial_shape
        return ny // SPATIAL_DOWNSAMPLE, nx // SPATIAL_DOWNSAMPLE

    @property
    def height_out(self) -> int:
        """Z cells remaining after the three strides and the collapse stage."""
        z = self.grid.spatial_shape[2]
        for _ in range(3):
            z = (z - 1) // 2 + 1
        kz, sz = _collapse_kernel(z)
        return (z - kz) // sz + 1

    @property
    def bev_channels(self) -> int:
        return self.stage_channels[-1] * self.height_out

    @property
    def num_offset_channels(self) -> int:
        return 2 * self.deform_kernel * self.deform_kernel


@dataclass
class ForwardOutput:
    """Per-scene head outputs; spatial shape is shared by every field."""

    cls_map: Tensor       # (num_yaws, H, W) logits
    reg_map: Tensor       # (num_yaws*7, H, W) deltas
    adapt_feature: Tensor  # (adapt_channels, H, W), post-ReLU
    offsets: Tensor | None  # (2*k*k, H, W); None on the reference branch


def parameter_shapes(config: NetworkConfig, with_offsets: bool = True) -> dict:
    """Canonical name -> shape registry; the reference branch omits offsets."""
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (config.embed_channels, 3),
        "embed.bias": (config.embed_channels,),
    }
    z = config.grid.spatial_shape[2]
    c_in = config.embed_channels
    for i, c_out in enumerate(config.stage_channels):
        shapes[f"backbone.s{i}.sub0.weight"] = (c_out, c_in, 3, 3, 3)
        shapes[f"backbone.s{i}.sub0.bias"] = (c_out,)
        shapes[f"backbone.s{i}.sub1.weight"] = (c_out, c_out, 3, 3, 3)
        shapes[f"backbone.s{i}.sub1.bias"] = (c_out,)
        if i < 3:
            c_next = config.stage_channels[i + 1]
            shapes[f"backbone.s{i}.down.weight"] = (c_next, c_out, 3, 3, 3)
            z = (z - 1) // 2 + 1
        else:
            c_next = c_out
            kz, _ = _collapse_kernel(z)
            shapes[f"backbone.s{i}.down.weight"] = (c_next, c_out, 1, 1, kz)
        shapes[f"backbone.s{i}.down.bias"] = (c_next,)
        c_in = c_next

    k = config.deform_kernel
    shapes["adapt.weight"] = (config.adapt_channels, config.bev_channels, k, k)
    shapes["adapt.bias"] = (config.adapt_channels,)
    if with_offsets:
        shapes["offsets.weight"] = (config.num_offset_channels, config.bev_channels, k, k)
        shapes["offsets.bias"] = (config.num_offset_channels,)
    shapes["head.stem.weight"] = (config.head_channels, config.adapt_channels, 3, 3)
    shapes["head.stem.bias"] = (config.head_channels,)
    shapes["head.cls.weight"] = (config.num_yaws, config.head_channels, 1, 1)
    shapes["head.cls.bias"] = (config.num_yaws,)
    shapes["head.reg.weight"] = (config.num_yaws * 7, config.head_channels, 1, 1)
    shapes["head.reg.bias"] = (config.num_yaws * 7,)
    return shapes


def init_params(config: NetworkConfig, seed: int = 0,
                with_offsets: bool = True) -> dict[str, Tensor]:
    """He-scaled random weights, zero biases; the offset conv starts all-zero
    so the live branch initially equals a rigid conv."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config, with_offsets).items():
        if name.startswith("offsets.") or name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def validate_params(params: dict, config: NetworkConfig, with_offsets: bool) -> None:
    want = parameter_shapes(config, with_offsets)
    for name, shape in want.items():
        if name not in params:
            raise ValueError(f"missing parameter {name}")
        if tuple(params[name].data.shape) != shape:
            raise ValueError(
                f"parameter {name} has shape {params[name].data.shape}, wants {shape}")


def copy_shared_into(pfe_params: dict, cfg_params: dict) -> None:
    """Overwrite the live branch's shared layers with the reference weights."""
    for name, tensor in cfg_params.items():
        if name not in pfe_params:
            raise ValueError(f"live branch lacks parameter {name}")
        if pfe_params[name].data.shape != tensor.data.shape:
            raise ValueError(f"shape mismatch on {name}")
        pfe_params[name].data = tensor.data.copy()


def _backbone_bev(cloud: PointCloud, params: dict, config: NetworkConfig) -> Tensor:
    vox = voxelize(cloud, config.grid)
    embedded = engine.relu(engine.linear(
        vox.features, params["embed.weight"], params["embed.bias"]))
    sp = SparseVoxelTensor(vox.coords, embedded, vox.spatial_shape)
    for i in range(4):
        for j in (0, 1):
            rb = build_rulebook(sp.coords, sp.spatial_shape, 3, mode=SUBMANIFOLD)
            sp = sparse_conv(sp, params[f"backbone.s{i}.sub{j}.weight"],
                             params[f"backbone.s{i}.sub{j}.bias"], rb)
            sp = SparseVoxelTensor(sp.coords, engine.relu(sp.features), sp.spatial_shape)
        if i < 3:
            rb = build_rulebook(sp.coords, sp.spatial_shape, 3, stride=2,
                                mode=STRIDED, padding=1)
        else:
            kz, sz = _collapse_kernel(sp.spatial_shape[2])
            rb = build_rulebook(sp.coords, sp.spatial_shape, (1, 1, kz),
                                stride=(1, 1, sz), mode=STRIDED, padding=0)
        sp = sparse_conv(sp, params[f"backbone.s{i}.down.weight"],
                         params[f"backbone.s{i}.down.bias"], rb)
        sp = SparseVoxelTensor(sp.coords, engine.relu(sp.features), sp.spatial_shape)
    return squeeze_height(to_dense(sp))


def _head(adapt: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    stem = engine.relu(engine.conv2d(
        adapt, params["head.stem.weight"], params["head.stem.bias"], padding=1))
    cls_map = engine.conv2d(stem, params["head.cls.weight"], params["head.cls.bias"])
    reg_map = engine.conv2d(stem, params["head.reg.weight"], params["head.reg.bias"])
    return cls_map, reg_map


def pfe_forward(cloud: PointCloud, params: dict, config: NetworkConfig) -> ForwardOutput:
    """Live branch: deformable adaptation layer guided by learned offsets."""
    validate_params(params, config, with_offsets=True)
    bev = _backbone_bev(cloud, params, config)
    pad = config.deform_kernel // 2
    offsets = engine.conv2d(bev, params["offsets.weight"], params["offsets.bias"],
                            padding=pad)
    adapt = engine.relu(engine.deform_conv2d(
        bev, params["adapt.weight"], offsets, params["adapt.bias"], padding=pad))
    cls_map, reg_map = _head(adapt, params)
    return ForwardOutput(cls_map, reg_map, adapt, offsets)


def cfg_forward(cloud: PointCloud, params: dict, config: NetworkConfig) -> ForwardOutput:
    """Reference branch: identical trunk with a rigid conv in place of the
    deformable layer; no offsets."""
    validate_params(params, config, with_offsets=False)
    bev = _backbone_bev(cloud, params, config)
    pad = config.deform_kernel // 2
    adapt = engine.relu(engine.conv2d(
        bev, params["adapt.weight"], params["adapt.bias"], padding=pad))
    cls_map, reg_map = _head(adapt, params)
    return ForwardOutput(cls_map, reg_map, adapt, None)
