"""Rotated IoU geometry, average precision, loss formulas."""

import math

import numpy as np
import pytest

from coopdet.boxes import DetectionBox, make_box, monte_carlo_iou, rotated_iou
from coopdet.errors import ContractViolation
from coopdet.metrics import (
    average_precision,
    cross_entropy,
    focal_loss,
    l1_loss,
    match_detections,
    total_loss,
)


def box(x, y, w=2.0, l=4.0, yaw=0.0, conf=1.0):
    return make_box(x, y, 0.0, 1.5, w, l, yaw, conf)


class TestRotatedIou:
    def test_identical_is_one(self):
        b = box(3.0, -2.0, yaw=0.7)
        assert rotated_iou(b, b) == 1.0

    def test_disjoint_is_zero(self):
        assert rotated_iou(box(0.0, 0.0), box(50.0, 50.0, yaw=1.0)) == 0.0

    def test_axis_aligned_half_overlap(self):
        a = box(0.0, 0.0, w=1.0, l=1.0)
        b = box(0.5, 0.0, w=1.0, l=1.0)
        assert abs(rotated_iou(a, b) - 1.0 / 3.0) <= 1e-12

    def test_rotated_square_pair_vs_monte_carlo(self):
        a = box(0.0, 0.0, w=1.0, l=1.0, yaw=0.0)
        b = make_box(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, math.pi / 4)
        got = rotated_iou(a, b)
        est = monte_carlo_iou(a, b, 1_000_000, seed=5)
        assert abs(got - est) <= 3e-3
        # octagon intersection: area 2(sqrt(2)-1), union 2 - that
        exact = 2 * (math.sqrt(2) - 1) / (2 - 2 * (math.sqrt(2) - 1))
        assert abs(got - exact) <= 1e-12

    def test_symmetry_exact(self, rng):
        for _ in range(50):
            a = box(*rng.uniform(-5, 5, 2), w=rng.uniform(1, 3), l=rng.uniform(2, 5), yaw=rng.uniform(-3, 3))
            b = box(*rng.uniform(-5, 5, 2), w=rng.uniform(1, 3), l=rng.uniform(2, 5), yaw=rng.uniform(-3, 3))
            assert rotated_iou(a, b) == rotated_iou(b, a)

    def test_rigid_invariance(self, rng):
        a = box(1.0, 2.0, yaw=0.3)
        b = box(2.0, 1.5, yaw=-0.9)
        base = rotated_iou(a, b)
        for _ in range(10):
            tx, ty = rng.uniform(-10, 10, 2)
            th = rng.uniform(-np.pi, np.pi)
            c, s = math.cos(th), math.sin(th)

            def move(bx):
                return make_box(
                    bx.x * c - bx.y * s + tx,
                    bx.x * s + bx.y * c + ty,
                    bx.z,
                    bx.h,
                    bx.w,
                    bx.l,
                    bx.yaw + th,
                    bx.confidence,
                )

            assert abs(rotated_iou(move(a), move(b)) - base) <= 1e-9

    def test_random_pairs_vs_monte_carlo(self, rng):
        for i in range(15):
            a = box(*rng.uniform(-2, 2, 2), w=rng.uniform(1, 3), l=rng.uniform(2, 5), yaw=rng.uniform(-3, 3))
            b = box(*rng.uniform(-2, 2, 2), w=rng.uniform(1, 3), l=rng.uniform(2, 5), yaw=rng.uniform(-3, 3))
            assert abs(rotated_iou(a, b) - monte_carlo_iou(a, b, 400_000, seed=i)) <= 5e-3

    def test_degenerate_rejected(self):
        with pytest.raises(ContractViolation):
            DetectionBox(0, 0, 0, 1, 0.0, 1, 0.0)

    def test_range(self, rng):
        for _ in range(30):
            a = box(*rng.uniform(-3, 3, 2), yaw=rng.uniform(-3, 3))
            b = box(*rng.uniform(-3, 3, 2), yaw=rng.uniform(-3, 3))
            assert 0.0 <= rotated_iou(a, b) <= 1.0


class TestMatching:
    def test_one_to_one(self):
        gts = [box(0.0, 0.0), box(10.0, 0.0)]
        dets = [box(0.0, 0.0, conf=0.9), box(0.1, 0.0, conf=0.8)]
        res = match_detections(dets, gts, 0.5)
        assert res.det_matches[0] == 0
        assert res.det_matches[1] is None  # gt already taken
        assert res.gt_covered == [True, False]

    def test_highest_iou_preferred(self):
        gts = [box(0.6, 0.0), box(0.0, 0.0)]
        det = box(0.05, 0.0, conf=0.9)
        res = match_detections([det], gts, 0.3)
        assert res.det_matches[0] == 1

    def test_confidence_order(self):
        gt = box(0.0, 0.0)
        dets = [box(0.4, 0.0, conf=0.5), box(0.0, 0.0, conf=0.9)]
        res = match_detections(dets, [gt], 0.3)
        assert res.det_matches[1] == 0 and res.det_matches[0] is None


class TestAveragePrecision:
    def test_perfect_detections(self):
        gts = [box(0.0, 0.0), box(10.0, 0.0)]
        dets = [box(0.0, 0.0, conf=1.0), box(10.0, 0.0, conf=1.0)]
        ap = average_precision([(dets, gts)], 0.5)
        assert ap.value == 1.0 and ap.defined

    def test_no_detections(self):
        ap = average_precision([([], [box(0.0, 0.0)])], 0.5)
        assert ap.value == 0.0 and ap.defined

    def test_no_ground_truth_flagged(self):
        ap = average_precision([([box(0.0, 0.0, conf=0.5)], [])], 0.5)
        assert not ap.defined

    def test_tiny_instance_frozen_oracle(self):
        # 2 gt, 3 detections: TP(0.9), FP(0.8), TP(0.7)
        # ranked PR points: (0.5, 1), (0.5, 1/2), (1.0, 2/3)
        # all-point AP = 0.5*1 + 0.5*(2/3) = 5/6
        gts = [box(0.0, 0.0), box(10.0, 0.0)]
        dets = [
            box(0.0, 0.0, conf=0.9),
            box(30.0, 30.0, conf=0.8),
            box(10.0, 0.0, conf=0.7),
        ]
        ap = average_precision([(dets, gts)], 0.5)
        assert abs(ap.value - 5.0 / 6.0) <= 1e-12

    def test_fp_before_tp_frozen_oracle(self):
        # FP(0.9) then TP(0.8): envelope precision 0.5 at all recalls
        gts = [box(0.0, 0.0)]
        dets = [box(30.0, 30.0, conf=0.9), box(0.0, 0.0, conf=0.8)]
        ap = average_precision([(dets, gts)], 0.5)
        assert abs(ap.value - 0.5) <= 1e-12

    def test_duplicate_after_full_recall_harmless(self):
        gts = [box(0.0, 0.0)]
        dets = [box(0.0, 0.0, conf=0.9), box(0.0, 0.0, conf=0.8)]
        ap = average_precision([(dets, gts)], 0.5)
        assert ap.value == 1.0

    def test_top_tp_never_decreases_ap(self, rng):
        for _ in range(10):
            gts = [box(0.0, 0.0), box(12.0, 0.0), box(-12.0, 0.0)]
            dets = [
                box(float(rng.uniform(-14, 14)), 0.0, conf=float(rng.uniform(0.1, 0.8)))
                for _ in range(4)
            ]
            base = average_precision([(dets, gts)], 0.5).value
            spare_gt = box(0.0, 14.0)
            richer = average_precision(
                [(dets + [box(0.0, 14.0, conf=0.99)], gts + [spare_gt])], 0.5
            )
            plain = average_precision([(dets, gts + [spare_gt])], 0.5)
            assert richer.value >= plain.value - 1e-12

    def test_bottom_fp_never_raises_curve(self, rng):
        gts = [box(0.0, 0.0), box(12.0, 0.0)]
        dets = [box(0.0, 0.0, conf=0.9), box(12.0, 0.0, conf=0.6)]
        base = average_precision([(dets, gts)], 0.5).value
        worse = average_precision(
            [(dets + [box(30.0, 30.0, conf=0.1)], gts)], 0.5
        ).value
        assert worse <= base + 1e-12

    def test_multi_frame_pooling(self):
        gts = [box(0.0, 0.0)]
        f1 = ([box(0.0, 0.0, conf=0.9)], gts)
        f2 = ([box(30.0, 0.0, conf=0.95)], gts)  # FP in its own frame
        ap = average_precision([f1, f2], 0.5)
        # ranked: FP(0.95), TP(0.9) over 2 gt -> recall 0.5, envelope 0.5
        assert abs(ap.value - 0.25) <= 1e-12


class TestLosses:
    def test_focal_frozen_value(self):
        # 0.25 * (1-0.5)^2 * (-log 0.5) = 0.25 * 0.25 * ln 2
        got = focal_loss(0.5, 1.0, gamma=2.0, alpha_f=0.25)
        assert abs(got - 0.25 * 0.25 * math.log(2.0)) <= 1e-9

    def test_gamma_zero_is_cross_entropy(self, rng):
        p = rng.uniform(0.05, 0.95, 20)
        t = (rng.random(20) < 0.5).astype(float)
        fl = focal_loss(p, t, gamma=0.0, alpha_f=1.0)
        ce = cross_entropy(p, t)
        assert abs(fl - ce) <= 1e-12
        p_t = np.where(t == 1, p, 1 - p)
        assert abs(ce - float(np.mean(-np.log(p_t)))) <= 1e-12

    def test_gamma_limit(self, rng):
        p = rng.uniform(0.1, 0.9, 10)
        t = np.ones(10)
        assert abs(focal_loss(p, t, 1e-6, 1.0) - cross_entropy(p, t)) <= 1e-5

    def test_l1(self):
        assert l1_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert l1_loss([1.0, 3.0], [2.0, 1.0]) == pytest.approx(1.5)

    def test_total(self):
        assert total_loss(0.3, 0.2) == pytest.approx(0.5)
        assert total_loss(0.3, 0.2, alpha=2.0) == pytest.approx(0.7)

    def test_clamping(self):
        assert math.isfinite(focal_loss(0.0, 1.0))
        assert math.isfinite(focal_loss(1.0, 0.0))
        assert focal_loss(1.0, 1.0) >= 0.0
