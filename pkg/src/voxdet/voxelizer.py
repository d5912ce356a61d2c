"""Point cloud to sparse voxel tensor conversion.

Each occupied voxel keeps at most a fixed number of points (the first ones
in cloud order, for determinism) and its feature is the plain mean of the
kept x, y, z coordinates: three channels, no learned per-point encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor
from .geometry import PointCloud


@dataclass(frozen=True)
class GridConfig:
    """Axis-aligned voxel grid; ranges are half-open [min, max) per axis."""

    range_min: tuple[float, float, float]
    range_max: tuple[float, float, float]
    voxel_size: tuple[float, float, float]
    max_points_per_voxel: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "range_min", tuple(float(v) for v in self.range_min))
        object.__setattr__(self, "range_max", tuple(float(v) for v in self.range_max))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        if self.max_points_per_voxel < 1:
            raise ValueError("max_points_per_voxel must be >= 1")
        for lo, hi, vs in zip(self.range_min, self.range_max, self.voxel_size):
            if vs <= 0:
                raise ValueError("voxel_size must be positive")
            cells = (hi - lo) / vs
            if abs(cells - round(cells)) > 1e-6 or round(cells) < 1:
                raise ValueError(f"range extent {hi - lo} not an integral number of voxels of {vs}")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        """Cell counts (nx, ny, nz)."""
        return tuple(
            int(round((hi - lo) / vs))
            for lo, hi, vs in zip(self.range_min, self.range_max, self.voxel_size)
        )


@dataclass
class SparseVoxelTensor:
    """Active voxel sites plus their feature rows.

    coords is (N, 3) integer (ix, iy, iz); features is a Tensor of shape
    (N, C) so gradients can flow through sparse convolutions.
    """

    coords: np.ndarray
    features: Tensor
    spatial_shape: tuple[int, int, int]

    def __post_init__(self) -> None:
        self.coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int64).reshape(-1, 3))
        if not isinstance(self.features, Tensor):
            self.features = Tensor(self.features)
        if self.features.data.ndim != 2 or self.features.data.shape[0] != len(self.coords):
            raise ValueError(
                f"features shape {self.features.data.shape} does not match {len(self.coords)} coords"
            )
        shape = np.asarray(self.spatial_shape, dtype=np.int64)
        if len(self.coords):
            if (self.coords < 0).any() or (self.coords >= shape).any():
                raise ValueError("voxel coords outside spatial_shape")
            keys = self._linear_keys()
            if len(np.unique(keys)) != len(keys):
                raise ValueError("duplicate voxel coords")

    def _linear_keys(self) -> np.ndarray:
        nx, ny, nz = self.spatial_shape
        return (self.coords[:, 0] * ny + self.coords[:, 1]) * nz + self.coords[:, 2]

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    @property
    def num_channels(self) -> int:
        return self.features.data.shape[1]


def voxelize(cloud: PointCloud, grid: GridConfig) -> SparseVoxelTensor:
    """Bin points into voxels; feature = mean xyz of the first few points per voxel.

    Points outside the half-open range are dropped. Output voxels are sorted
    lexicographically by (ix, iy, iz) so the result is deterministic.
    """
    nx, ny, nz = grid.spatial_shape
    lo = np.asarray(grid.range_min)
    vs = np.asarray(grid.voxel_size)
    if len(cloud) == 0:
        return SparseVoxelTensor(np.zeros((0, 3), np.int64), Tensor(np.zeros((0, 3))), grid.spatial_shape)
    idx = np.floor((cloud.xyz - lo) / vs).astype(np.int64)
    shape = np.array([nx, ny, nz])
    keep = ((idx >= 0) & (idx < shape)).all(axis=1)
    idx = idx[keep]
    xyz = cloud.xyz[keep]
    if len(idx) == 0:
        return SparseVoxelTensor(np.zeros((0, 3), np.int64), Tensor(np.zeros((0, 3))), grid.spatial_shape)

    keys = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    order = np.argsort(keys, kind="stable")  # stable keeps cloud order inside each voxel
    keys_sorted = keys[order]
    xyz_sorted = xyz[order]
    uniq_keys, starts, counts = np.unique(keys_sorted, return_index=True, return_counts=True)
    group = np.repeat(np.arange(len(uniq_keys)), counts)
    rank = np.arange(len(keys_sorted)) - starts[group]
    kept = rank < grid.max_points_per_voxel

    feats = np.zeros((len(uniq_keys), 3))
    np.add.at(feats, group[kept], xyz_sorted[kept])
    feats /= np.minimum(counts, grid.max_points_per_voxel)[:, None]

    coords = np.column_stack([uniq_keys // (ny * nz), (uniq_keys // nz) % ny, uniq_keys % nz])
    return SparseVoxelTensor(coords, Tensor(feats), grid.spatial_shape)


def default_grid() -> GridConfig:
    """Full-scale grid: 1408 x 1600 x 40 cells over the forward fan."""
    return GridConfig(range_min=(0.0, -40.0, -3.0), range_max=(70.4, 40.0, 1.0),
                      voxel_size=(0.05, 0.05, 0.1))


def mini_grid() -> GridConfig:
    """Desk-scale grid for tests: 64 x 64 x 8 cells."""
    return GridConfig(range_min=(0.0, -16.0, -2.0), range_max=(32.0, 16.0, 2.0),
                      voxel_size=(0.5, 0.5, 0.5))
