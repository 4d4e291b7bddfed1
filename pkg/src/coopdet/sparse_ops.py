"""Sparse operators over ``SparseGrid``: the building blocks of the pipeline.

Convolution semantics are the dense zero-padded ones restricted to an
active set: ``out(ro, co) = sum_{u,v} in(s*ro + u - p, s*co + v - p) W[u,v]
+ bias`` with p = k // 2. The regular sparse convolution activates every
in-bounds output cell whose receptive field touches an input cell; the
submanifold variant keeps the input active set unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .backend import kernels
from .errors import ContractViolation
from .grid import ConvKernel, PointCloud, SparseGrid, VoxelSpec

STATS_CHANNELS = 5  # count, mean dx, mean dy, mean z, mean intensity


@dataclass(frozen=True)
class VoxelEncoder:
    """Aggregation rule mapping the points of one voxel to its feature.

    ``stats`` emits [count, mean x-offset, mean y-offset, mean z, mean
    intensity] (offsets from the cell center, meters). ``lifted`` applies
    a fixed seeded linear map on top of those statistics to reach
    ``channels`` dimensions, keeping the artifact training-free.
    """

    kind: str = "lifted"
    channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("stats", "lifted"):
            raise ContractViolation(f"unknown encoder kind {self.kind!r}")

    @property
    def out_channels(self) -> int:
        return STATS_CHANNELS if self.kind == "stats" else self.channels


@lru_cache(maxsize=32)
def _lift_matrix(channels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11F7]))
    m = rng.uniform(-1.0, 1.0, size=(STATS_CHANNELS, channels)) / np.sqrt(STATS_CHANNELS)
    m.flags.writeable = False
    return m


def _bin_points(cloud: PointCloud, spec: VoxelSpec):
    """Assign in-range points to cells; canonical point order per cell.

    Returns (sorted linear cell ids with boundaries, sorted points) so
    that downstream sums are independent of the input point order.
    """
    h, w = spec.shape
    pts = cloud.points
    rc = spec.to_base_units(pts[:, :2])
    rows = np.floor(rc[:, 0]).astype(np.int64)
    cols = np.floor(rc[:, 1]).astype(np.int64)
    ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    pts = pts[ok]
    lin = rows[ok] * w + cols[ok]
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], lin))
    return lin[order], pts[order]


def voxelize(cloud: PointCloud, spec: VoxelSpec, encoder: VoxelEncoder = VoxelEncoder()) -> SparseGrid:
    """Bin a point cloud onto the base grid; one active cell per occupied voxel."""
    h, w = spec.shape
    lin, pts = _bin_points(cloud, spec)
    if lin.size == 0:
        return SparseGrid.empty((h, w), encoder.out_channels, stride=1)

    uniq, start = np.unique(lin, return_index=True)
    counts = np.add.reduceat(np.ones(lin.size), start)
    sums = np.add.reduceat(pts, start, axis=0)

    idx = np.stack([uniq // w, uniq % w], axis=1)
    centers = spec.to_metric(idx + 0.5)
    stats = np.empty((uniq.size, STATS_CHANNELS))
    stats[:, 0] = counts
    stats[:, 1] = sums[:, 0] / counts - centers[:, 0]
    stats[:, 2] = sums[:, 1] / counts - centers[:, 1]
    stats[:, 3] = sums[:, 2] / counts
    stats[:, 4] = sums[:, 3] / counts

    if encoder.kind == "stats":
        feats = stats
    else:
        feats = stats @ _lift_matrix(encoder.channels, encoder.seed)
    return SparseGrid(idx, feats, (h, w), stride=1)


class CellStats:
    """Per-cell raw point sums on the base grid, for the analytic heads.

    columns: n, Σx, Σy, Σz, Σx², Σy², Σxy, Σz², then the edge-direction
    votes Σw, Σw·sin2φ, Σw·cos2φ over scan-adjacent point pairs (w is
    pair length, φ its direction; doubling the angle makes opposite
    directions agree). Sums are additive, so window aggregates are
    exact; an integral image makes them O(1) per window.
    """

    COLS = 11

    def __init__(self, indices: np.ndarray, sums: np.ndarray, shape: tuple[int, int]):
        self.indices = indices
        self.sums = sums
        self.shape = shape
        h, w = shape
        dense = np.zeros((h + 1, w + 1, self.COLS))
        if indices.shape[0]:
            dense[indices[:, 0] + 1, indices[:, 1] + 1] = sums
        self._integral = dense.cumsum(axis=0).cumsum(axis=1)

    def window_sums(self, r0, c0, extent: int) -> np.ndarray:
        """Sums over base-cell windows [r0, r0+extent) x [c0, c0+extent)."""
        h, w = self.shape
        r0 = np.asarray(r0, np.int64)
        c0 = np.asarray(c0, np.int64)
        ra = np.clip(r0, 0, h)
        ca = np.clip(c0, 0, w)
        rb = np.clip(r0 + extent, 0, h)
        cb = np.clip(c0 + extent, 0, w)
        integ = self._integral
        return integ[rb, cb] - integ[ra, cb] - integ[rb, ca] + integ[ra, ca]


MAX_EDGE_PAIR_M = 0.8  # scan neighbors farther apart are treated as jumps


def _edge_votes(cloud: PointCloud, spec: VoxelSpec) -> np.ndarray:
    """Per-cell (Σw, Σw sin2φ, Σw cos2φ) from consecutive scan points.

    Interprets the cloud in its given order as scan rings, so surface
    direction falls out of neighboring returns. Pairs across layer
    changes or gaps wider than MAX_EDGE_PAIR_M are skipped.
    """
    h, w = spec.shape
    votes = np.zeros((h, w, 3))
    pts = cloud.points
    if pts.shape[0] < 2:
        return votes
    d = pts[1:, :2] - pts[:-1, :2]
    seg = np.hypot(d[:, 0], d[:, 1])
    ok = (seg > 1e-9) & (seg <= MAX_EDGE_PAIR_M) & (pts[1:, 2] == pts[:-1, 2])
    if not ok.any():
        return votes
    phi2 = 2.0 * np.arctan2(d[ok, 1], d[ok, 0])
    rc = spec.to_base_units(pts[:-1, :2][ok])
    rows = np.floor(rc[:, 0]).astype(np.int64)
    cols = np.floor(rc[:, 1]).astype(np.int64)
    inb = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    wv = seg[ok][inb]
    np.add.at(votes[:, :, 0], (rows[inb], cols[inb]), wv)
    np.add.at(votes[:, :, 1], (rows[inb], cols[inb]), wv * np.sin(phi2[inb]))
    np.add.at(votes[:, :, 2], (rows[inb], cols[inb]), wv * np.cos(phi2[inb]))
    return votes


def point_stats(cloud: PointCloud, spec: VoxelSpec) -> CellStats:
    """Raw per-voxel point sums used by the heuristic decoding heads."""
    h, w = spec.shape
    votes = _edge_votes(cloud, spec)
    lin, pts = _bin_points(cloud, spec)
    if lin.size == 0:
        return CellStats(np.zeros((0, 2), np.int64), np.zeros((0, CellStats.COLS)), (h, w))
    uniq, start = np.unique(lin, return_index=True)
    cols = np.stack(
        [
            np.ones(lin.size),
            pts[:, 0],
            pts[:, 1],
            pts[:, 2],
            pts[:, 0] ** 2,
            pts[:, 1] ** 2,
            pts[:, 0] * pts[:, 1],
            pts[:, 2] ** 2,
        ],
        axis=1,
    )
    sums = np.add.reduceat(cols, start, axis=0)
    idx = np.stack([uniq // w, uniq % w], axis=1)
    full = np.concatenate([sums, votes[idx[:, 0], idx[:, 1]]], axis=1)
    return CellStats(idx, full, (h, w))


def _check_channels(grid: SparseGrid, kernel: ConvKernel) -> None:
    if kernel.c_in != grid.channels:
        raise ContractViolation(
            f"kernel expects {kernel.c_in} channels, grid has {grid.channels}"
        )


def sparse_conv(grid: SparseGrid, kernel: ConvKernel) -> SparseGrid:
    """Regular sparse convolution; may dilate the active set and down-sample."""
    _check_channels(grid, kernel)
    s = kernel.stride
    h, w = grid.shape
    hout = (h - 1) // s + 1
    wout = (w - 1) // s + 1
    if grid.n_active == 0:
        return SparseGrid.empty((hout, wout), kernel.c_out, grid.stride * s)
    oidx, ofeat = kernels().conv_active(
        grid.indices, grid.features, kernel.weights, kernel.bias, s, hout, wout
    )
    return SparseGrid(oidx, ofeat, (hout, wout), grid.stride * s)


def subm_conv(grid: SparseGrid, kernel: ConvKernel) -> SparseGrid:
    """Submanifold convolution: active set identical to the input's."""
    if kernel.stride != 1:
        raise ContractViolation("submanifold convolution requires stride 1")
    _check_channels(grid, kernel)
    feats = kernels().subm_active(
        grid.indices, grid.features, kernel.weights, kernel.bias, *grid.shape
    )
    return SparseGrid(grid.indices, feats, grid.shape, grid.stride)


def subm_maxpool(grid: SparseGrid, window: int, score) -> SparseGrid:
    """Suppress cells that are not the strict best in their neighborhood.

    ``score`` is either a channel index or an external per-cell score
    array. Ties break toward the lower (row, col) index, so output is a
    deterministic subset with unchanged features.
    """
    if window % 2 == 0 or window < 3:
        raise ContractViolation("window must be odd and >= 3")
    if isinstance(score, (int, np.integer)):
        scores = grid.features[:, int(score)].astype(np.float64)
    else:
        scores = np.asarray(score, np.float64)
        if scores.shape != (grid.n_active,):
            raise ContractViolation("score array must match the active set")
    if grid.n_active == 0:
        return grid
    keep = kernels().maxpool_keep(grid.indices, scores, window, *grid.shape)
    return grid.subset(keep)


def sparse_add(a: SparseGrid, b: SparseGrid) -> SparseGrid:
    """Union the active sets, summing features where both grids are active."""
    if a.shape != b.shape or a.channels != b.channels or a.stride != b.stride:
        raise ContractViolation("sparse_add requires matching shape/channels/stride")
    if a.n_active == 0:
        return b
    if b.n_active == 0:
        return a
    lin = np.concatenate([a.linear(), b.linear()])
    feats = np.concatenate([a.features, b.features], axis=0)
    uniq, inv = np.unique(lin, return_inverse=True)
    out = np.zeros((uniq.size, a.channels))
    np.add.at(out, inv, feats)
    idx = np.stack([uniq // a.shape[1], uniq % a.shape[1]], axis=1)
    return SparseGrid(idx, out, a.shape, a.stride)


def index_upsample(grid: SparseGrid, factor: int, out_shape: tuple[int, int] | None = None) -> SparseGrid:
    """Relocate indices onto a grid ``factor`` times finer; values unchanged."""
    if factor not in (2, 4):
        raise ContractViolation("upsample factor must be 2 or 4")
    if grid.stride % factor != 0:
        raise ContractViolation(f"stride {grid.stride} not divisible by {factor}")
    if out_shape is None:
        out_shape = (grid.shape[0] * factor, grid.shape[1] * factor)
    return SparseGrid(grid.indices * factor, grid.features, out_shape, grid.stride // factor)
