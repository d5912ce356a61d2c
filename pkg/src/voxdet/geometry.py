"""Oriented-box and point-set geometry.

Everything here is pure and stateless: BEV corner extraction, point-in-box
tests, rotated IoU via convex polygon clipping, rigid transforms, and the
directed average closest-point distance used to pair sparse objects with
dense stand-in models.

Conventions: sensor frame is x forward, y left, z up; yaw rotates about +z
and is stored in [-pi, pi); boxes are parameterized by their geometric
center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(angle: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((angle + math.pi) % TWO_PI - math.pi)


def rotation_2d(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]], dtype=np.float64)


@dataclass(frozen=True)
class PointCloud:
    """A flat array of sensor points, shape (N, 4): x, y, z, intensity."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"point cloud must have shape (N, 4), got {arr.shape}")
        if arr.shape[0] and not np.isfinite(arr[:, :3]).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "data", arr)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4), dtype=np.float64))

    @classmethod
    def from_xyz(cls, xyz: np.ndarray, intensity: np.ndarray | None = None) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if intensity is None:
            intensity = np.zeros(len(xyz), dtype=np.float64)
        return cls(np.column_stack([xyz, np.asarray(intensity, dtype=np.float64)]))

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.data[:, 3]


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: geometric center, full extents, yaw about +z."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "cz", "l", "w", "h", "yaw"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"box field {name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"box dimensions must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h], dtype=np.float64)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Box3D":
        cx, cy, cz, l, w, h, yaw = (float(v) for v in arr)
        return cls(cx, cy, cz, l, w, h, yaw)


@dataclass(frozen=True)
class Pose:
    """Rigid transform in the sensor frame: yaw rotation then translation."""

    rotation: float
    translation: tuple[float, float, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", normalize_angle(float(self.rotation)))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))


def box_corners_bev(box: Box3D) -> np.ndarray:
    """Counter-clockwise BEV corners of the yaw-rotated l-by-w rectangle.

    Returns a (4, 2) array; the first corner is the rotated (+l/2, +w/2).
    """
    half = np.array(
        [[box.l / 2, box.w / 2], [-box.l / 2, box.w / 2], [-box.l / 2, -box.w / 2], [box.l / 2, -box.w / 2]],
        dtype=np.float64,
    )
    return half @ rotation_2d(box.yaw).T + np.array([box.cx, box.cy])


def points_in_box(cloud: PointCloud, box: Box3D, slack: float = 1e-9) -> np.ndarray:
    """Indices of points inside the box, boundary-inclusive.

    `slack` absorbs rigid-transform roundoff so points sitting exactly on a
    face stay inside after a round trip through a pose.
    """
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    local = (cloud.xyz - box.center) @ rotation_z(box.yaw)
    half = box.dims / 2 + slack
    mask = (np.abs(local) <= half).all(axis=1)
    return np.nonzero(mask)[0]


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as an (N, 2) vertex array."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` by convex CCW polygon `clip`."""
    output = subject
    n = len(clip)
    for i in range(n):
        if len(output) == 0:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        rel = output - a
        d = edge[0] * rel[:, 1] - edge[1] * rel[:, 0]
        new_pts = []
        m = len(output)
        for j in range(m):
            k = (j + 1) % m
            if d[j] >= 0:
                new_pts.append(output[j])
            if (d[j] > 0 and d[k] < 0) or (d[j] < 0 and d[k] > 0):
                t = d[j] / (d[j] - d[k])
                new_pts.append(output[j] + t * (output[k] - output[j]))
        output = np.array(new_pts, dtype=np.float64) if new_pts else np.zeros((0, 2))
    return output


def _bev_intersection_area(a: Box3D, b: Box3D) -> float:
    # Canonical argument order makes the result exactly symmetric in (a, b).
    if (a.cx, a.cy, a.l, a.w, a.yaw) > (b.cx, b.cy, b.l, b.w, b.yaw):
        a, b = b, a
    return polygon_area(_clip_polygon(box_corners_bev(a), box_corners_bev(b)))


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """BEV intersection-over-union of two oriented boxes, in [0, 1]."""
    inter = _bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    area_a = a.l * a.w
    area_b = b.l * b.w
    return inter / (area_a + area_b - inter)


def rotated_iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU for upright boxes: BEV polygon overlap times z-interval overlap."""
    inter_bev = _bev_intersection_area(a, b)
    if inter_bev <= 0.0:
        return 0.0
    z_lo = max(a.cz - a.h / 2, b.cz - b.h / 2)
    z_hi = min(a.cz + a.h / 2, b.cz + b.h / 2)
    if z_hi <= z_lo:
        return 0.0
    inter = inter_bev * (z_hi - z_lo)
    vol_a = a.l * a.w * a.h
    vol_b = b.l * b.w * b.h
    return inter / (vol_a + vol_b - inter)


class _HashGrid:
    """Uniform hash grid over a fixed point set for nearest-neighbor queries."""

    def __init__(self, points: np.ndarray, cell: float = 0.5):
        self.points = points
        self.cell = cell
        keys = np.floor(points / cell).astype(np.int64)
        self.cells: dict[tuple[int, int, int], list[int]] = {}
        for i, k in enumerate(map(tuple, keys)):
            self.cells.setdefault(k, []).append(i)
        self.kmin = keys.min(axis=0)
        self.kmax = keys.max(axis=0)

    def nearest_distance(self, p: np.ndarray) -> float:
        c0 = np.floor(p / self.cell).astype(np.int64)
        k_max = int(np.maximum(np.abs(c0 - self.kmin), np.abs(c0 - self.kmax)).max())
        best = math.inf
        for ring in range(k_max + 1):
            # A cell at Chebyshev ring r holds points no closer than (r-1)*cell,
            # so once best <= (ring-1)*cell no ring from here on can improve it.
            if ring > 0 and best <= (ring - 1) * self.cell:
                break
            idx: list[int] = []
            lo, hi = c0 - ring, c0 + ring
            for ix in range(lo[0], hi[0] + 1):
                for iy in range(lo[1], hi[1] + 1):
                    for iz in range(lo[2], hi[2] + 1):
                        if max(abs(ix - c0[0]), abs(iy - c0[1]), abs(iz - c0[2])) != ring:
                            continue
                        bucket = self.cells.get((ix, iy, iz))
                        if bucket is not None:
                            idx.extend(bucket)
            if idx:
                d = np.linalg.norm(self.points[idx] - p, axis=1).min()
                best = min(best, float(d))
        return best


def avg_closest_point_distance(a: PointCloud, b: PointCloud, symmetric: bool = False) -> float:
    """Mean over points of `a` of the distance to the closest point of `b`.

    Directed from the observed object `a` to the candidate model `b`; a
    sparse observation that is a subset of a dense model scores 0 this way.
    `symmetric=True` averages both directions instead.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("avg_closest_point_distance requires non-empty clouds")
    d_ab = _directed_mean_closest(a.xyz, b.xyz)
    if not symmetric:
        return d_ab
    return 0.5 * (d_ab + _directed_mean_closest(b.xyz, a.xyz))


def _directed_mean_closest(a: np.ndarray, b: np.ndarray) -> float:
    if len(b) < 64:
        diff = a[:, None, :] - b[None, :, :]
        return float(np.sqrt((diff * diff).sum(axis=2)).min(axis=1).mean())
    grid = _HashGrid(b)
    return float(np.mean([grid.nearest_distance(p) for p in a]))


def transform_points(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Rotate about +z then translate; intensity rides along unchanged."""
    xyz = cloud.xyz @ rotation_z(pose.rotation).T + np.asarray(pose.translation)
    return PointCloud.from_xyz(xyz, cloud.intensity.copy())


def transform_box(box: Box3D, pose: Pose) -> Box3D:
    """Apply a rigid pose to a box: center moves, yaw accumulates, dims fixed."""
    center = box.center @ rotation_z(pose.rotation).T + np.asarray(pose.translation)
    return Box3D(center[0], center[1], center[2], box.l, box.w, box.h, box.yaw + pose.rotation)
