"""Sparse 3D convolution over active voxel sites via rulebooks.

A rulebook lists, for every kernel tap, which input row contributes to
which output row; the convolution is then gather, matmul against that
tap's weight slice, scatter-add. Submanifold mode keeps the site set
unchanged (no dilation of the active pattern); strided mode creates the
downsampled sites that receive at least one contribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, _record
from .voxelizer import SparseVoxelTensor

SUBMANIFOLD = "submanifold"
STRIDED = "strided"


def _as_triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {v!r}")
    return t


@dataclass
class Rulebook:
    """Gather/scatter plan: one (input rows, output rows) pair list per kernel tap."""

    taps: list[tuple[np.ndarray, np.ndarray]]
    out_coords: np.ndarray
    out_spatial_shape: tuple[int, int, int]
    kernel: tuple[int, int, int]
    mode: str
    in_count: int

    @property
    def num_pairs(self) -> int:
        return sum(len(i) for i, _ in self.taps)


def _linear_keys(coords: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    _, ny, nz = shape
    return (coords[:, 0] * ny + coords[:, 1]) * nz + coords[:, 2]


def build_rulebook(coords: np.ndarray, spatial_shape, kernel, stride=1,
                   mode: str = SUBMANIFOLD, padding=None) -> Rulebook:
    """Plan a sparse convolution over the given active sites.

    Tap order is the nested (dx, dy, dz) enumeration, matching how weight
    tensors of shape (C_out, C_in, kx, ky, kz) are flattened.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    spatial_shape = _as_triple(spatial_shape)
    kernel = _as_triple(kernel)
    stride = _as_triple(stride)
    if min(stride) < 1:
        raise ValueError(f"invalid stride {stride}")
    if padding is None:
        padding = tuple(k // 2 for k in kernel)
    padding = _as_triple(padding)

    if mode == SUBMANIFOLD:
        if any(k % 2 == 0 for k in kernel):
            raise ValueError(f"submanifold mode needs odd kernel dims, got {kernel}")
        if stride != (1, 1, 1):
            raise ValueError("submanifold mode is stride 1 by definition")
        return _build_submanifold(coords, spatial_shape, kernel)
    if mode == STRIDED:
        return _build_strided(coords, spatial_shape, kernel, stride, padding)
    raise ValueError(f"unknown rulebook mode {mode!r}")


def _tap_offsets(kernel: tuple[int, int, int]) -> np.ndarray:
    kx, ky, kz = kernel
    grid = np.stack(np.meshgrid(np.arange(kx), np.arange(ky), np.arange(kz), indexing="ij"), -1)
    return grid.reshape(-1, 3)


def _build_submanifold(coords, spatial_shape, kernel) -> Rulebook:
    keys = _linear_keys(coords, spatial_shape)
    order = np.argsort(keys)
    keys_sorted = keys[order]
    half = np.array([k // 2 for k in kernel])
    shape = np.asarray(spatial_shape)
    taps = []
    empty = np.zeros(0, dtype=np.int64)
    for tap in _tap_offsets(kernel):
        rel = tap - half
        cand = coords + rel  # input position feeding each output site at this tap
        valid = ((cand >= 0) & (cand < shape)).all(axis=1)
        out_idx = np.nonzero(valid)[0]
        if len(out_idx) == 0 or len(keys_sorted) == 0:
            taps.append((empty, empty))
            continue
        cand_keys = _linear_keys(cand[valid], spatial_shape)
        pos = np.minimum(np.searchsorted(keys_sorted, cand_keys), len(keys_sorted) - 1)
        found = keys_sorted[pos] == cand_keys
        taps.append((order[pos[found]], out_idx[found]))
    return Rulebook(taps, coords.copy(), spatial_shape, kernel, SUBMANIFOLD, len(coords))


def _build_strided(coords, spatial_shape, kernel, stride, padding) -> Rulebook:
    shape = np.asarray(spatial_shape)
    k = np.asarray(kernel)
    s = np.asarray(stride)
    p = np.asarray(padding)
    out_shape = (shape + 2 * p - k) // s + 1
    if (out_shape < 1).any():
        raise ValueError(f"kernel {kernel} with stride {stride} empties spatial shape {spatial_shape}")

    # first pass: find every output site receiving at least one contribution
    per_tap: list[tuple[np.ndarray, np.ndarray]] = []
    all_out = []
    for tap in _tap_offsets(kernel):
        num = coords + p - tap
        ok = (num % s == 0).all(axis=1)
        site = num // s
        ok &= ((site >= 0) & (site < out_shape)).all(axis=1)
        in_idx = np.nonzero(ok)[0]
        per_tap.append((in_idx, site[ok]))
        if len(in_idx):
            all_out.append(site[ok])
    out_tuple = tuple(int(v) for v in out_shape)
    if not all_out:
        empty = np.zeros(0, dtype=np.int64)
        return Rulebook([(empty, empty) for _ in per_tap], np.zeros((0, 3), np.int64),
                        out_tuple, kernel, STRIDED, len(coords))
    stacked = np.concatenate(all_out)
    out_keys = _linear_keys(stacked, out_tuple)
    uniq_keys = np.unique(out_keys)  # sorted: lexicographic (ix, iy, iz) order
    _, ny, nz = out_tuple
    out_coords = np.column_stack([uniq_keys // (ny * nz), (uniq_keys // nz) % ny, uniq_keys % nz])

    taps = []
    for in_idx, sites in per_tap:
        if len(in_idx) == 0:
            taps.append((in_idx, in_idx.copy()))
            continue
        site_keys = _linear_keys(sites, out_tuple)
        out_idx = np.searchsorted(uniq_keys, site_keys)
        taps.append((in_idx, out_idx))
    return Rulebook(taps, out_coords, out_tuple, kernel, STRIDED, len(coords))


def sparse_conv_forward(features: Tensor, weight: Tensor, bias: Tensor | None,
                        rulebook: Rulebook) -> Tensor:
    """Gather-matmul-scatter convolution; differentiable in features/weight/bias."""
    n, c_in = features.data.shape
    c_out, c_in2, kx, ky, kz = weight.data.shape
    if c_in != c_in2:
        raise ValueError(f"channel mismatch: features {c_in}, weight {c_in2}")
    if (kx, ky, kz) != rulebook.kernel:
        raise ValueError(f"weight kernel {(kx, ky, kz)} != rulebook kernel {rulebook.kernel}")
    if n != rulebook.in_count:
        raise ValueError(f"rulebook built for {rulebook.in_count} sites, features have {n}")
    m = len(rulebook.out_coords)
    w_taps = weight.data.reshape(c_out, c_in, -1)
    out = np.zeros((m, c_out))
    gathered_cache = []
    for t, (in_idx, out_idx) in enumerate(rulebook.taps):
        if len(in_idx) == 0:
            gathered_cache.append(None)
            continue
        gathered = features.data[in_idx]
        gathered_cache.append(gathered)
        # out rows are unique within one tap, so fancy-index add is exact
        out[out_idx] += gathered @ w_taps[:, :, t].T
    if bias is not None:
        out += bias.data

    def backward(g):
        d_feat = np.zeros_like(features.data)
        d_w = np.zeros_like(w_taps)
        for t, (in_idx, out_idx) in enumerate(rulebook.taps):
            if len(in_idx) == 0:
                continue
            g_rows = g[out_idx]
            d_feat[in_idx] += g_rows @ w_taps[:, :, t]
            d_w[:, :, t] += g_rows.T @ gathered_cache[t]
        d_w = d_w.reshape(weight.data.shape)
        if bias is None:
            return d_feat, d_w
        return d_feat, d_w, g.sum(axis=0)

    inputs = [features, weight] if bias is None else [features, weight, bias]
    return _record(inputs, out, backward)


def sparse_conv(sp: SparseVoxelTensor, weight: Tensor, bias: Tensor | None,
                rulebook: Rulebook) -> SparseVoxelTensor:
    feats = sparse_conv_forward(sp.features, weight, bias, rulebook)
    return SparseVoxelTensor(rulebook.out_coords, feats, rulebook.out_spatial_shape)


def to_dense(sp: SparseVoxelTensor) -> Tensor:
    """Expand active sites into a dense (C, Z, Y, X) volume of zeros elsewhere."""
    nx, ny, nz = sp.spatial_shape
    c = sp.num_channels
    ix, iy, iz = sp.coords[:, 0], sp.coords[:, 1], sp.coords[:, 2]
    out = np.zeros((c, nz, ny, nx))
    out[:, iz, iy, ix] = sp.features.data.T

    def backward(g):
        return (g[:, iz, iy, ix].T,)

    return _record([sp.features], out, backward)


def from_dense(dense: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of to_dense for tests: coords and features of nonzero sites."""
    c, nz, ny, nx = dense.shape
    occupied = (dense != 0).any(axis=0)
    iz, iy, ix = np.nonzero(occupied)
    coords = np.column_stack([ix, iy, iz]).astype(np.int64)
    keys = (coords[:, 0] * ny + coords[:, 1]) * nz + coords[:, 2]
    order = np.argsort(keys)
    coords = coords[order]
    feats = dense[:, coords[:, 2], coords[:, 1], coords[:, 0]].T
    return coords, feats


def squeeze_height(dense: Tensor) -> Tensor:
    """Reshape (C, Z, Y, X) to (C*Z, Y, X); channel index is c*Z + z."""
    from .engine import reshape

    c, z, y, x = dense.data.shape
    return reshape(dense, (c * z, y, x))
