"""Extractor pipeline: multi-scale stack, FPN, heads, SemDB selection."""

import numpy as np
import pytest

from coopdet.errors import ContractViolation
from coopdet.extractor import (
    CH_COUNT,
    ExtractorConfig,
    HeadOutputs,
    backbone_weights,
    extract,
    extract_multiscale,
    run_heads,
    select_and_refine,
    sparse_fpn,
)
from coopdet.grid import PointCloud, SparseGrid, VoxelSpec, densify
from coopdet.sparse_ops import (
    VoxelEncoder,
    index_upsample,
    point_stats,
    sparse_add,
    sparse_conv,
    subm_conv,
    voxelize,
)


def small_cfg(**kw):
    defaults = dict(
        voxel=VoxelSpec((0.0, 32.0), (0.0, 32.0), (0.8, 0.8)),
        channels=8,
        subm_blocks=(1, 1, 1, 1, 1),
        head_mode="seeded",
        seed=3,
    )
    defaults.update(kw)
    return ExtractorConfig(**defaults)


def box_perimeter_cloud(cx, cy, l, w, yaw, z_layers=(0.5, 1.0, 1.5), step=0.25):
    """Points sampled uniformly along a box's BEV perimeter."""
    pts = []
    ca, sa = np.cos(yaw), np.sin(yaw)
    corners = [(l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2)]
    for i in range(4):
        ax, ay = corners[i]
        bx, by = corners[(i + 1) % 4]
        seg = np.hypot(bx - ax, by - ay)
        for t in np.arange(0.0, seg, step) / seg:
            lx = ax + t * (bx - ax)
            ly = ay + t * (by - ay)
            x = cx + lx * ca - ly * sa
            y = cy + lx * sa + ly * ca
            for z in z_layers:
                pts.append([x, y, z, 1.0])
    return PointCloud(np.array(pts))


class TestMultiScale:
    def test_empty_input_all_levels_empty(self):
        cfg = small_cfg()
        grid = SparseGrid.empty(cfg.voxel.shape, cfg.channels)
        ms = extract_multiscale(grid, cfg)
        assert all(g.n_active == 0 for g in ms.levels.values())

    def test_single_cell_reaches_level_16(self):
        cfg = small_cfg()
        grid = SparseGrid(
            np.array([[17, 23]]), np.ones((1, cfg.channels)), cfg.voxel.shape
        )
        ms = extract_multiscale(grid, cfg)
        assert ms.levels[16].n_active >= 1

    def test_matches_op_by_op_composition(self, rng):
        cfg = small_cfg()
        h, w = cfg.voxel.shape
        n = 40
        lin = rng.choice(h * w, n, replace=False)
        grid = SparseGrid(
            np.stack([lin // w, lin % w], 1), rng.normal(size=(n, cfg.channels)), (h, w)
        )
        ms = extract_multiscale(grid, cfg)

        bank = backbone_weights(cfg.channels, cfg.subm_blocks, cfg.kernel_size, cfg.seed)
        x = grid
        for li, s in enumerate((1, 2, 4, 8, 16)):
            if s != 1:
                x = sparse_conv(x, bank[f"down{s}"])
            for b in range(cfg.subm_blocks[li]):
                x = sparse_add(subm_conv(x, bank[f"level{s}_block{b}"]), x)
            np.testing.assert_array_equal(ms.levels[s].indices, x.indices)
            np.testing.assert_array_equal(ms.levels[s].features, x.features)

    def test_stride_tags(self, rng):
        cfg = small_cfg()
        grid = SparseGrid(
            np.array([[4, 4], [20, 30]]), rng.normal(size=(2, cfg.channels)), cfg.voxel.shape
        )
        ms = extract_multiscale(grid, cfg)
        for s, g in ms.levels.items():
            assert g.stride == s


class TestSparseFpn:
    def test_only_level4_active(self, rng):
        cfg = small_cfg()
        grid = SparseGrid(
            np.array([[9, 9]]), rng.normal(size=(1, cfg.channels)), cfg.voxel.shape
        )
        ms = extract_multiscale(grid, cfg)
        bank = backbone_weights(cfg.channels, cfg.subm_blocks, cfg.kernel_size, cfg.seed)
        empty8 = SparseGrid.empty(ms.levels[8].shape, cfg.channels, 8)
        empty16 = SparseGrid.empty(ms.levels[16].shape, cfg.channels, 16)
        from coopdet.extractor import MultiScaleFeatures

        ms2 = MultiScaleFeatures(
            {1: ms.levels[1], 2: ms.levels[2], 4: ms.levels[4], 8: empty8, 16: empty16}
        )
        fused = sparse_fpn(ms2, cfg)
        ref = subm_conv(ms.levels[4], bank["lateral4"])
        np.testing.assert_array_equal(fused.indices, ref.indices)
        np.testing.assert_allclose(fused.features, ref.features, atol=1e-12)

    def test_single_level16_cell_lands_upsampled(self, rng):
        cfg = small_cfg()
        shape4 = (10, 10)
        from coopdet.extractor import MultiScaleFeatures

        empty4 = SparseGrid.empty(shape4, cfg.channels, 4)
        empty8 = SparseGrid.empty((5, 5), cfg.channels, 8)
        l16 = SparseGrid(
            np.array([[1, 2]]), rng.normal(size=(1, cfg.channels)), (3, 3), 16
        )
        ms = MultiScaleFeatures({4: empty4, 8: empty8, 16: l16})
        fused = sparse_fpn(ms, cfg)
        assert fused.n_active == 1
        assert tuple(fused.indices[0]) == (4, 8)
        assert fused.stride == 4

    def test_matches_dense_fpn_oracle(self, rng):
        cfg = small_cfg()
        grid_cells = rng.choice(40 * 40, 50, replace=False)
        grid = SparseGrid(
            np.stack([grid_cells // 40, grid_cells % 40], 1),
            rng.normal(size=(50, cfg.channels)),
            (40, 40),
        )
        ms = extract_multiscale(grid, cfg)
        fused = sparse_fpn(ms, cfg)

        bank = backbone_weights(cfg.channels, cfg.subm_blocks, cfg.kernel_size, cfg.seed)
        l4 = subm_conv(ms.levels[4], bank["lateral4"])
        l8 = subm_conv(ms.levels[8], bank["lateral8"])
        l16 = subm_conv(ms.levels[16], bank["lateral16"])
        dense = densify(l4)
        for lvl, f in ((l8, 2), (l16, 4)):
            for (r, c), feat in zip(lvl.indices, lvl.features):
                dense[r * f, c * f] += feat
        got = densify(fused)
        np.testing.assert_allclose(got, dense, atol=1e-9)

    def test_missing_level_rejected(self, rng):
        cfg = small_cfg()
        from coopdet.extractor import MultiScaleFeatures

        l4 = SparseGrid.empty((10, 10), cfg.channels, 4)
        with pytest.raises((ContractViolation, KeyError)):
            sparse_fpn(MultiScaleFeatures({4: l4}), cfg)


class TestHeads:
    def test_heuristic_dense_object_high_conf(self):
        cfg = small_cfg(head_mode="heuristic")
        cloud = box_perimeter_cloud(16.0, 16.0, 4.5, 2.0, 0.3)
        grid = voxelize(cloud, cfg.voxel, VoxelEncoder("lifted", cfg.channels, cfg.seed))
        fused = sparse_fpn(extract_multiscale(grid, cfg), cfg)
        heads = run_heads(fused, cfg, point_stats(cloud, cfg.voxel))
        assert heads.confidence.max() > 0.99

    def test_heuristic_isolated_point_below_threshold(self):
        cfg = small_cfg(head_mode="heuristic")
        cloud = PointCloud(np.array([[16.0, 16.0, 1.0, 1.0]]))
        grid = voxelize(cloud, cfg.voxel, VoxelEncoder("lifted", cfg.channels, cfg.seed))
        fused = sparse_fpn(extract_multiscale(grid, cfg), cfg)
        heads = run_heads(fused, cfg, point_stats(cloud, cfg.voxel))
        assert heads.confidence.max() < cfg.conf_threshold

    def test_seeded_heads_deterministic(self, rng):
        cfg = small_cfg(head_mode="seeded")
        grid = SparseGrid(
            np.array([[8, 8], [9, 9]]), rng.normal(size=(2, cfg.channels)), cfg.voxel.shape
        )
        fused = sparse_fpn(extract_multiscale(grid, cfg), cfg)
        a = run_heads(fused, cfg)
        b = run_heads(fused, cfg)
        np.testing.assert_array_equal(a.confidence, b.confidence)
        np.testing.assert_array_equal(a.deviation, b.deviation)
        assert (a.confidence >= 0).all() and (a.confidence <= 1).all()


class TestSelectAndRefine:
    def make_fused(self, cells, conf, dev=None):
        n = len(cells)
        grid = SparseGrid(np.array(cells), np.ones((n, 8)), (16, 16), stride=4)
        conf = np.asarray(conf, float)
        # grid construction sorts by (row, col); mirror that order here
        order = np.lexsort((np.array(cells)[:, 1], np.array(cells)[:, 0]))
        dev = np.zeros((n, 2)) if dev is None else np.asarray(dev, float)
        return grid, HeadOutputs(conf[order], dev[order])

    def test_all_below_threshold(self):
        cfg = small_cfg()
        grid, heads = self.make_fused([[2, 2], [5, 5]], [0.1, 0.2])
        assert select_and_refine(grid, heads, cfg) == []

    def test_conf_one_keeps_feature(self):
        cfg = small_cfg()
        grid, heads = self.make_fused([[2, 2]], [1.0])
        (db,) = select_and_refine(grid, heads, cfg)
        np.testing.assert_array_equal(db.feature, grid.features[0])
        np.testing.assert_allclose(db.index, [8.0, 8.0])

    def test_window_suppression_and_reweight(self):
        cfg = small_cfg()
        grid, heads = self.make_fused([[2, 2], [2, 3]], [0.8, 0.6])
        (db,) = select_and_refine(grid, heads, cfg)
        assert db.confidence == pytest.approx(0.8)
        np.testing.assert_allclose(db.index, [8.0, 8.0])
        np.testing.assert_allclose(db.feature, 0.8 * grid.features[0])

    def test_adjusted_index_formula(self):
        cfg = small_cfg()
        grid, heads = self.make_fused([[3, 2]], [0.9], dev=[[1.25, -0.5]])
        (db,) = select_and_refine(grid, heads, cfg)
        np.testing.assert_allclose(db.index, [4 * 3 + 1.25, 4 * 2 - 0.5])

    def test_no_reweight_flag(self):
        cfg = small_cfg()
        grid, heads = self.make_fused([[2, 2]], [0.5])
        (db,) = select_and_refine(grid, heads, cfg, reweight=False)
        np.testing.assert_array_equal(db.feature, grid.features[0])

    def test_threshold_monotonicity(self, rng):
        for _ in range(20):
            n = 12
            lin = rng.choice(16 * 16, n, replace=False)
            cells = np.stack([lin // 16, lin % 16], 1)
            conf = rng.choice([0.2, 0.4, 0.6, 0.8, 1.0], n)
            grid = SparseGrid(cells, np.ones((n, 8)), (16, 16), stride=4)
            order = np.lexsort((cells[:, 1], cells[:, 0]))
            heads = HeadOutputs(conf[order], np.zeros((n, 2)))
            lo = select_and_refine(grid, heads, small_cfg(conf_threshold=0.3))
            hi = select_and_refine(grid, heads, small_cfg(conf_threshold=0.7))
            lo_set = {tuple(d.index) for d in lo}
            hi_set = {tuple(d.index) for d in hi}
            assert hi_set <= lo_set
            assert len(hi) <= len(lo)


class TestExtract:
    def test_empty_cloud(self):
        cfg = small_cfg(head_mode="heuristic")
        assert extract(PointCloud(np.zeros((0, 4))), cfg) == []

    def test_single_object_single_semdb_near_center(self):
        cfg = small_cfg(head_mode="heuristic")
        cloud = box_perimeter_cloud(16.0, 14.0, 4.5, 2.0, 0.5)
        dbs = extract(cloud, cfg)
        assert len(dbs) == 1
        center_rc = cfg.voxel.to_base_units(np.array([[16.0, 14.0]]))[0]
        assert np.linalg.norm(dbs[0].index - center_rc) <= 2.0

    def test_two_distant_objects_two_semdbs(self):
        cfg = small_cfg(head_mode="heuristic")
        pts = np.vstack(
            [
                box_perimeter_cloud(8.0, 8.0, 4.5, 2.0, 0.0).points,
                box_perimeter_cloud(24.0, 24.0, 4.5, 2.0, 1.0).points,
            ]
        )
        dbs = extract(PointCloud(pts), cfg)
        assert len(dbs) == 2

    def test_sparsity_monotone_and_reweight_bound(self):
        cfg = small_cfg(head_mode="heuristic")
        cloud = box_perimeter_cloud(16.0, 16.0, 4.5, 2.0, 0.2)
        grid = voxelize(cloud, cfg.voxel, VoxelEncoder("lifted", cfg.channels, cfg.seed))
        ms = extract_multiscale(grid, cfg)
        fused = sparse_fpn(ms, cfg)
        dbs = extract(cloud, cfg)
        assert len(dbs) <= fused.n_active <= sum(g.n_active for g in ms.levels.values())
        heads = run_heads(fused, cfg, point_stats(cloud, cfg.voxel))
        raw = select_and_refine(fused, heads, cfg, reweight=False)
        for a, b in zip(dbs, raw):
            assert np.linalg.norm(a.feature) <= np.linalg.norm(b.feature) + 1e-12

    def test_bitwise_determinism(self):
        cfg = small_cfg(head_mode="heuristic")
        cloud = box_perimeter_cloud(12.0, 20.0, 4.5, 2.0, -0.7)
        a = extract(cloud, cfg, source_agent=1, timestamp_ms=100)
        b = extract(cloud, cfg, source_agent=1, timestamp_ms=100)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.index, y.index)
            np.testing.assert_array_equal(x.feature, y.feature)
            assert x.confidence == y.confidence

    def test_seeded_mode_runs_end_to_end(self):
        cfg = small_cfg(head_mode="seeded", conf_threshold=0.1)
        cloud = box_perimeter_cloud(16.0, 16.0, 4.5, 2.0, 0.0)
        dbs = extract(cloud, cfg)
        for db in dbs:
            assert 0.0 <= db.confidence <= 1.0

    def test_heuristic_count_channel_positive(self):
        cfg = small_cfg(head_mode="heuristic")
        cloud = box_perimeter_cloud(16.0, 16.0, 4.5, 2.0, 0.0)
        (db,) = extract(cloud, cfg, reweight=False)
        assert db.feature[CH_COUNT] > 10
