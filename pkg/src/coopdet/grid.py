"""Core sparse data types: voxel grids, point clouds, kernels.

A ``SparseGrid`` is the currency of the whole pipeline: a 2D bird's-eye
grid stored as (index, feature) pairs. Indices are canonically sorted by
(row, col) so that set-equality tests and serialization are exact, and
all arrays are frozen after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def wrap_pi(angle):
    """Wrap angle(s) to (-pi, pi]."""
    a = np.asarray(angle, np.float64)
    w = (a + np.pi) % (2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.isscalar(angle) or a.ndim == 0 else w


@dataclass(frozen=True)
class VoxelSpec:
    """Metric extent and resolution of the base voxel grid.

    Rows map to y, columns to x. Grid shape is (ceil(y_extent / dy),
    ceil(x_extent / dx)). A continuous position in "base units" is
    (y - y0) / dy for rows, (x - x0) / dx for columns, so the center of
    integer cell (r, c) sits at base units (r + 0.5, c + 0.5).
    """

    x_range: tuple[float, float] = (-140.8, 140.8)
    y_range: tuple[float, float] = (-40.0, 40.0)
    voxel_size: tuple[float, float] = (0.4, 0.4)

    def __post_init__(self):
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise ContractViolation("degenerate voxel ranges")
        if not (self.voxel_size[0] > 0 and self.voxel_size[1] > 0):
            raise ContractViolation("voxel_size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        h = math.ceil((self.y_range[1] - self.y_range[0]) / self.voxel_size[1])
        w = math.ceil((self.x_range[1] - self.x_range[0]) / self.voxel_size[0])
        return h, w

    def to_base_units(self, xy: np.ndarray) -> np.ndarray:
        """(n, 2) metric (x, y) -> (n, 2) continuous (row, col)."""
        xy = np.asarray(xy, np.float64)
        out = np.empty_like(xy)
        out[..., 0] = (xy[..., 1] - self.y_range[0]) / self.voxel_size[1]
        out[..., 1] = (xy[..., 0] - self.x_range[0]) / self.voxel_size[0]
        return out

    def to_metric(self, rc: np.ndarray) -> np.ndarray:
        """(n, 2) continuous (row, col) -> (n, 2) metric (x, y)."""
        rc = np.asarray(rc, np.float64)
        out = np.empty_like(rc)
        out[..., 0] = self.x_range[0] + rc[..., 1] * self.voxel_size[0]
        out[..., 1] = self.y_range[0] + rc[..., 0] * self.voxel_size[1]
        return out


@dataclass(frozen=True)
class PointCloud:
    """(n, 4) array of x, y, z, intensity. Coordinates in meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, np.float64).reshape(-1, 4)
        if not np.isfinite(pts).all():
            raise ContractViolation("point cloud contains non-finite values")
        if pts.shape[0] and (pts[:, 3].min() < 0 or pts[:, 3].max() > 1):
            raise ContractViolation("intensity outside [0, 1]")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class ConvKernel:
    """Dense weights for a sparse convolution.

    weights: (k*k, c_in, c_out) with taps in row-major (u, v) order;
    bias: (c_out,). k must be odd so the kernel has a center.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        w = np.asarray(self.weights, np.float64)
        b = np.asarray(self.bias, np.float64)
        if w.ndim != 3:
            raise ContractViolation("kernel weights must be (k*k, c_in, c_out)")
        k = int(round(w.shape[0] ** 0.5))
        if k * k != w.shape[0] or k % 2 == 0:
            raise ContractViolation("kernel size must be odd")
        if b.shape != (w.shape[2],):
            raise ContractViolation("bias shape mismatch")
        if self.stride not in (1, 2):
            raise ContractViolation("kernel stride must be 1 or 2")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ContractViolation("kernel weights must be finite")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))

    @property
    def k(self) -> int:
        return int(round(self.weights.shape[0] ** 0.5))

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class SparseGrid:
    """Sparse 2D feature map: unique sorted (row, col) cells + features.

    ``stride`` is the down-sampling factor of this grid relative to the
    base voxel grid (1, 2, 4, 8 or 16).
    """

    indices: np.ndarray
    features: np.ndarray
    shape: tuple[int, int]
    stride: int = 1

    def __post_init__(self):
        idx = np.asarray(self.indices, np.int64).reshape(-1, 2)
        feats = np.asarray(self.features, np.float64)
        if feats.ndim != 2 or idx.shape[0] != feats.shape[0]:
            raise ContractViolation("indices and features disagree in length")
        if idx.shape[0]:
            if idx.min() < 0 or idx[:, 0].max() >= self.shape[0] or idx[:, 1].max() >= self.shape[1]:
                raise ContractViolation("index outside grid bounds")
            if not np.isfinite(feats).all():
                raise ContractViolation("features must be finite")
            order = np.lexsort((idx[:, 1], idx[:, 0]))
            idx = idx[order]
            feats = feats[order]
            if idx.shape[0] > 1 and (np.diff(idx[:, 0] * self.shape[1] + idx[:, 1]) == 0).any():
                raise ContractViolation("duplicate cell index")
        object.__setattr__(self, "indices", _frozen(idx))
        object.__setattr__(self, "features", _frozen(feats))

    @classmethod
    def empty(cls, shape: tuple[int, int], channels: int, stride: int = 1) -> "SparseGrid":
        return cls(np.zeros((0, 2), np.int64), np.zeros((0, channels)), shape, stride)

    @property
    def n_active(self) -> int:
        return self.indices.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def linear(self) -> np.ndarray:
        return self.indices[:, 0] * self.shape[1] + self.indices[:, 1]

    def with_features(self, feats: np.ndarray) -> "SparseGrid":
        """Same active set and geometry, new feature values."""
        feats = np.asarray(feats, np.float64).reshape(self.n_active, -1)
        return SparseGrid(self.indices, feats, self.shape, self.stride)

    def subset(self, mask: np.ndarray) -> "SparseGrid":
        return SparseGrid(self.indices[mask], self.features[mask], self.shape, self.stride)


def densify(grid: SparseGrid) -> np.ndarray:
    """Expand to a dense (H, W, C) array; inactive cells are zero."""
    h, w = grid.shape
    out = np.zeros((h, w, grid.channels))
    out[grid.indices[:, 0], grid.indices[:, 1]] = grid.features
    return out


def sparsify(dense: np.ndarray, stride: int = 1) -> SparseGrid:
    """Inverse of densify: keeps cells whose feature vector is not all-zero."""
    dense = np.asarray(dense, np.float64)
    h, w, c = dense.shape
    mask = (dense != 0).any(axis=2)
    rr, cc = np.nonzero(mask)
    return SparseGrid(np.stack([rr, cc], axis=1), dense[rr, cc], (h, w), stride)
