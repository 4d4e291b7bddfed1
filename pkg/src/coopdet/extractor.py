"""Single-agent extraction: point cloud in, semantic detection boxes out.

The pipeline is voxelize -> multi-scale sparse blocks -> sparse feature
pyramid -> decoding heads -> threshold / max-pool dedup / center
adjustment / confidence re-weighting. The output unit is the SemDB: an
adjusted spatial position, a confidence, and a C-dim semantic feature.

Two head modes exist. ``seeded`` draws every kernel from a seeded PRNG,
giving a structurally complete but untrained network. ``heuristic``
computes confidence and center deviation analytically from point
occupancy, and packs additive point moments into the feature channels so
the downstream fusion stage can decode real boxes without training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import trace
from .errors import ContractViolation
from .grid import ConvKernel, PointCloud, SparseGrid, VoxelSpec
from .sparse_ops import (
    CellStats,
    VoxelEncoder,
    index_upsample,
    point_stats,
    sparse_add,
    sparse_conv,
    subm_conv,
    subm_maxpool,
    voxelize,
)

LEVELS = (1, 2, 4, 8, 16)
FPN_LEVELS = (4, 8, 16)

# Heuristic-mode feature channel layout. All entries are sums over the
# cell's aggregation window, so sparse addition fuses them exactly:
# ch0 count, ch1/ch2 doubled-angle orientation votes (n sin2θ, n cos2θ),
# ch3 Σz, ch4 Σz², ch5 Σdx², ch6 Σdy², ch7 Σdx·dy, where the d offsets
# are taken from the window centroid (meters). Channels 8+ stay zero
# and absorb the temporal encoding downstream.
CH_COUNT = 0
CH_YAW_SIN = 1
CH_YAW_COS = 2
CH_SUM_Z = 3
CH_SUM_ZZ = 4
CH_VAR_XX = 5
CH_VAR_YY = 6
CH_VAR_XY = 7
MIN_STAT_CHANNELS = 8


@dataclass(frozen=True)
class SemDB:
    """One object-level sparse feature: where, how sure, and what.

    ``index`` is a fractional (row, col) position in base-grid cell
    units after center adjustment.
    """

    index: np.ndarray
    confidence: float
    feature: np.ndarray
    source_agent: int
    timestamp_ms: int

    def __post_init__(self):
        idx = np.asarray(self.index, np.float64).reshape(2)
        feat = np.asarray(self.feature, np.float64).ravel()
        if not (np.isfinite(idx).all() and np.isfinite(feat).all()):
            raise ContractViolation("SemDB fields must be finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractViolation("confidence must lie in [0, 1]")
        idx.flags.writeable = False
        feat.flags.writeable = False
        object.__setattr__(self, "index", idx)
        object.__setattr__(self, "feature", feat)


@dataclass(frozen=True)
class ExtractorConfig:
    voxel: VoxelSpec = field(default_factory=VoxelSpec)
    channels: int = 32
    subm_blocks: tuple[int, int, int, int, int] = (1, 1, 2, 2, 2)
    kernel_size: int = 3
    conf_threshold: float = 0.3
    maxpool_window: int = 3
    head_mode: str = "heuristic"  # or "seeded"
    occupancy_kappa: float = 4.0
    neighborhood: int = 1  # stride-4-cell radius for the analytic heads
    # analytic-head geometry: single-class anchor size, surface-to-center
    # push, and the visible-edge length below which the view is taken to
    # be the short side of the box
    anchor_length: float = 4.5
    anchor_width: float = 2.0
    push_scale: float = 0.65
    flip_extent: float = 3.0
    flip_purity: float = 0.75
    edge_vote_min: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.conf_threshold < 1.0:
            raise ContractViolation("conf_threshold must lie in (0, 1)")
        if self.maxpool_window % 2 == 0:
            raise ContractViolation("maxpool_window must be odd")
        if self.head_mode not in ("seeded", "heuristic"):
            raise ContractViolation(f"unknown head mode {self.head_mode!r}")
        if self.channels < MIN_STAT_CHANNELS:
            raise ContractViolation(f"need at least {MIN_STAT_CHANNELS} channels")


@dataclass(frozen=True)
class MultiScaleFeatures:
    """Per-stride feature grids, keyed by down-sampling factor."""

    levels: dict

    def __post_init__(self):
        smin = min(self.levels)
        base = self.levels[smin].stride // smin
        for s, g in self.levels.items():
            if g.stride != s * base:
                raise ContractViolation(f"level {s} carries stride {g.stride}")


def _seeded_kernel(rng: np.random.Generator, k: int, cin: int, cout: int, stride: int) -> ConvKernel:
    fan_in = k * k * cin
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(k * k, cin, cout))
    return ConvKernel(w, np.zeros(cout), stride)


@lru_cache(maxsize=64)
def backbone_weights(channels: int, subm_blocks: tuple, kernel_size: int, seed: int) -> dict:
    """Deterministic kernel bank for the multi-scale blocks and the FPN.

    Layers are drawn in a fixed order from one seeded stream; every
    weight is uniform on ±1/sqrt(fan_in).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBACB]))
    bank = {}
    for li, s in enumerate(LEVELS):
        if s != 1:
            bank[f"down{s}"] = _seeded_kernel(rng, kernel_size, channels, channels, 2)
        for b in range(subm_blocks[li]):
            bank[f"level{s}_block{b}"] = _seeded_kernel(rng, kernel_size, channels, channels, 1)
    for s in FPN_LEVELS:
        bank[f"lateral{s}"] = _seeded_kernel(rng, 1, channels, channels, 1)
    return bank


@lru_cache(maxsize=64)
def head_weights(channels: int, kernel_size: int, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
    return {
        "conf": _seeded_kernel(rng, kernel_size, channels, 1, 1),
        "dev": _seeded_kernel(rng, kernel_size, channels, 2, 1),
    }


def extract_multiscale(grid: SparseGrid, cfg: ExtractorConfig, bank: dict | None = None) -> MultiScaleFeatures:
    """Stride 1..16 feature stack: stride-2 conv then residual subm blocks."""
    if bank is None:
        bank = backbone_weights(cfg.channels, cfg.subm_blocks, cfg.kernel_size, cfg.seed)
    levels = {}
    x = grid
    for li, s in enumerate(LEVELS):
        if s != 1:
            x = sparse_conv(x, bank[f"down{s}"])
        for b in range(cfg.subm_blocks[li]):
            x = sparse_add(subm_conv(x, bank[f"level{s}_block{b}"]), x)
        levels[s] = x
    return MultiScaleFeatures(levels)


def sparse_fpn(ms: MultiScaleFeatures, cfg: ExtractorConfig, bank: dict | None = None) -> SparseGrid:
    """Fuse the 4x/8x/16x levels into one stride-4 grid.

    Each level goes through a 1x1 lateral projection, higher levels get
    their indices up-sampled onto the 4x grid, and everything is merged
    by sparse addition.
    """
    for s in FPN_LEVELS:
        if s not in ms.levels:
            raise ContractViolation(f"missing level {s} for FPN")
    if bank is None:
        bank = backbone_weights(cfg.channels, cfg.subm_blocks, cfg.kernel_size, cfg.seed)
    l4 = subm_conv(ms.levels[4], bank["lateral4"])
    l8 = subm_conv(ms.levels[8], bank["lateral8"])
    l16 = subm_conv(ms.levels[16], bank["lateral16"])
    up8 = index_upsample(l8, 2, out_shape=l4.shape)
    up16 = index_upsample(l16, 4, out_shape=l4.shape)
    return sparse_add(sparse_add(l4, up8), up16)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class HeadOutputs:
    confidence: np.ndarray  # (n,) in [0, 1]
    deviation: np.ndarray  # (n, 2) base-grid cell units
    stats_features: np.ndarray | None = None  # (n, C), heuristic mode only


def occupancy_confidence(counts: np.ndarray, kappa: float) -> np.ndarray:
    """Saturating point-count score: 1 - exp(-n / kappa)."""
    return 1.0 - np.exp(-counts / kappa)


def _heuristic_heads(fused: SparseGrid, cfg: ExtractorConfig, stats: CellStats) -> HeadOutputs:
    stride = fused.stride
    nb = cfg.neighborhood
    extent = stride * (2 * nb + 1)
    corner_r = (fused.indices[:, 0] - nb) * stride
    corner_c = (fused.indices[:, 1] - nb) * stride
    sums = stats.window_sums(corner_r, corner_c, extent)

    n = sums[:, 0]
    safe = np.maximum(n, 1.0)
    conf = np.where(n > 0, occupancy_confidence(n, cfg.occupancy_kappa), 0.0)

    mean_x = sums[:, 1] / safe
    mean_y = sums[:, 2] / safe
    var_xx = np.maximum(sums[:, 4] - n * mean_x ** 2, 0.0) / safe
    var_yy = np.maximum(sums[:, 5] - n * mean_y ** 2, 0.0) / safe
    cov_xy = (sums[:, 6] - n * mean_x * mean_y) / safe

    # orientation: dominant scan-edge direction where the votes carry
    # enough surface, covariance principal axis otherwise
    theta_edge = 0.5 * np.arctan2(sums[:, 9], sums[:, 10])
    theta_pca = 0.5 * np.arctan2(2.0 * cov_xy, var_xx - var_yy)
    theta = np.where(sums[:, 8] > cfg.edge_vote_min, theta_edge, theta_pca)

    # a short visible edge means we are looking at the box's short side;
    # only trust that reading when the votes agree on a single direction
    # (corner views mix two edge families and the long arm already wins)
    c, s = np.cos(theta), np.sin(theta)
    var_along = c ** 2 * var_xx + 2 * c * s * cov_xy + s ** 2 * var_yy
    var_across = s ** 2 * var_xx - 2 * c * s * cov_xy + c ** 2 * var_yy
    edge_len = np.sqrt(12.0 * np.maximum(var_along, 0.0))
    vote_purity = np.hypot(sums[:, 9], sums[:, 10]) / np.maximum(sums[:, 8], 1e-9)
    flip = (edge_len < cfg.flip_extent) & (vote_purity > cfg.flip_purity)
    theta = np.where(flip, theta + np.pi / 2, theta)
    c, s = np.cos(theta), np.sin(theta)

    # centroids sit on the visible surface; push them away from the
    # sensor by the anchor box's half-extent along the view ray, scaled
    # down when the cluster wraps around the object (across-spread)
    dist = np.hypot(mean_x, mean_y)
    ux = np.where(dist > 1e-9, mean_x / np.maximum(dist, 1e-9), 0.0)
    uy = np.where(dist > 1e-9, mean_y / np.maximum(dist, 1e-9), 0.0)
    support = (
        np.abs(ux * c + uy * s) * cfg.anchor_length / 2
        + np.abs(-ux * s + uy * c) * cfg.anchor_width / 2
    )
    flatness = np.clip(1.0 - np.maximum(var_across, 0.0), 0.0, 1.0)
    push = cfg.push_scale * flatness * support
    center_x = mean_x + push * ux
    center_y = mean_y + push * uy

    centroid_rc = cfg.voxel.to_base_units(np.stack([center_x, center_y], axis=1))
    dev = centroid_rc - stride * fused.indices
    # cells with no points keep a zero deviation
    dev[n == 0] = 0.0

    feats = np.zeros((fused.n_active, cfg.channels))
    feats[:, CH_COUNT] = n
    feats[:, CH_YAW_SIN] = n * np.sin(2.0 * theta)
    feats[:, CH_YAW_COS] = n * np.cos(2.0 * theta)
    feats[:, CH_SUM_Z] = sums[:, 3]
    feats[:, CH_SUM_ZZ] = sums[:, 7]
    feats[:, CH_VAR_XX] = n * var_xx
    feats[:, CH_VAR_YY] = n * var_yy
    feats[:, CH_VAR_XY] = n * cov_xy
    return HeadOutputs(conf, dev, feats)


def run_heads(fused: SparseGrid, cfg: ExtractorConfig, stats: CellStats | None = None) -> HeadOutputs:
    """Per-cell confidence and center deviation for the fused grid."""
    if cfg.head_mode == "heuristic":
        if stats is None:
            raise ContractViolation("heuristic heads need point statistics")
        return _heuristic_heads(fused, cfg, stats)
    bank = head_weights(cfg.channels, cfg.kernel_size, cfg.seed)
    conf = _sigmoid(subm_conv(fused, bank["conf"]).features[:, 0])
    dev = subm_conv(fused, bank["dev"]).features[:, :2]
    return HeadOutputs(conf, dev)


def select_and_refine(
    fused: SparseGrid,
    heads: HeadOutputs,
    cfg: ExtractorConfig,
    source_agent: int = 0,
    timestamp_ms: int = 0,
    reweight: bool = True,
) -> list[SemDB]:
    """Threshold, max-pool dedup, center adjustment, re-weighting."""
    if heads.confidence.shape[0] != fused.n_active:
        raise ContractViolation("head outputs misaligned with the fused grid")
    keep = heads.confidence >= cfg.conf_threshold
    if not keep.any():
        return []
    sub = fused.subset(keep)
    conf = heads.confidence[keep]
    dev = heads.deviation[keep]
    feats = heads.stats_features[keep] if heads.stats_features is not None else sub.features

    pooled = subm_maxpool(sub, cfg.maxpool_window, score=conf)
    # map surviving cells back to their row in the thresholded arrays
    sub_lin = sub.linear()
    surviving = np.isin(sub_lin, pooled.linear())

    if reweight:
        trace.record("reweight")
    out = []
    for i in np.nonzero(surviving)[0]:
        adjusted = fused.stride * sub.indices[i] + dev[i]
        feature = feats[i] * conf[i] if reweight else feats[i]
        out.append(
            SemDB(adjusted, float(conf[i]), feature, source_agent, timestamp_ms)
        )
    return out


def extract(
    cloud: PointCloud,
    cfg: ExtractorConfig,
    source_agent: int = 0,
    timestamp_ms: int = 0,
    reweight: bool = True,
) -> list[SemDB]:
    """Full single-agent pass from raw points to SemDBs."""
    encoder = VoxelEncoder("lifted", cfg.channels, cfg.seed)
    grid = voxelize(cloud, cfg.voxel, encoder)
    ms = extract_multiscale(grid, cfg)
    fused = sparse_fpn(ms, cfg)
    stats = point_stats(cloud, cfg.voxel) if cfg.head_mode == "heuristic" else None
    heads = run_heads(fused, cfg, stats)
    return select_and_refine(fused, heads, cfg, source_agent, timestamp_ms, reweight)
