import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mewunet.metrics import (
    ConfusionCounts, acc_spe_sen, boundary_extract, confusion_counts, dsc, evaluate_masks, hd95, iou, write_report,
)
from oracles import boundary_loop, counts_loop, hd95_all_pairs, random_mask_pair, ratios

masks16 = arrays(np.int64, (16, 16), elements=st.integers(0, 1))


class TestConfusion:
    def test_identical(self, rng):
        m = rng.integers(0, 2, (8, 8))
        c = confusion_counts(m, m, 1)
        assert c.fp == 0 and c.fn == 0

    def test_complement(self, rng):
        m = rng.integers(0, 2, (8, 8))
        c = confusion_counts(1 - m, m, 1)
        assert c.tp == 0 and c.tn == 0

    def test_loop_oracle(self, rng):
        for _ in range(20):
            p, g = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
            for k in range(3):
                c = confusion_counts(p, g, k)
                assert (c.tp, c.fp, c.tn, c.fn) == counts_loop(p, g, k)
                assert c.total == 64

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            confusion_counts(np.zeros((4, 4)), np.zeros((4, 5)), 1)

    def test_addition(self):
        assert ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(1, 1, 1, 1) == ConfusionCounts(2, 3, 4, 5)


class TestRatios:
    def test_identical(self):
        m = np.array([[0, 1], [1, 1]])
        c = confusion_counts(m, m, 1)
        assert dsc(c) == 1.0 and iou(c) == 1.0

    def test_half_overlap(self):
        pred = np.array([[1, 1, 0]])
        gt = np.array([[0, 1, 1]])
        c = confusion_counts(pred, gt, 1)
        assert dsc(c) == 0.5
        assert iou(c) == pytest.approx(1 / 3, abs=0)

    def test_disjoint(self):
        c = confusion_counts(np.array([[1, 0]]), np.array([[0, 1]]), 1)
        assert dsc(c) == 0.0 and iou(c) == 0.0

    def test_both_empty(self):
        c = confusion_counts(np.zeros((3, 3)), np.zeros((3, 3)), 1)
        assert dsc(c) == 1.0 and iou(c) == 1.0
        assert acc_spe_sen(c) == (1.0, 1.0, 1.0)

    def test_one_empty(self):
        c = confusion_counts(np.zeros((3, 3)), np.eye(3), 1)
        assert dsc(c) == 0.0 and iou(c) == 0.0

    def test_acc_spe_sen_hand(self):
        assert acc_spe_sen(ConfusionCounts(tp=3, fp=1, tn=4, fn=2)) == (0.7, 0.8, 0.6)


class TestBoundary:
    def test_single_pixel(self):
        m = np.zeros((5, 5), dtype=int)
        m[2, 3] = 1
        assert boundary_extract(m, 1).tolist() == [[2, 3]]

    def test_square_perimeter(self):
        m = np.zeros((8, 8), dtype=int)
        m[2:6, 2:6] = 1
        pts = boundary_extract(m, 1)
        assert len(pts) == 12
        assert [2 + 1, 2 + 1] not in pts.tolist()

    def test_border_is_background(self):
        assert len(boundary_extract(np.ones((3, 3), dtype=int), 1)) == 8

    def test_empty(self):
        assert len(boundary_extract(np.zeros((4, 4), dtype=int), 1)) == 0

    def test_loop_oracle(self, rng):
        for _ in range(20):
            m = rng.integers(0, 3, (9, 11))
            for k in range(3):
                assert [tuple(p) for p in boundary_extract(m, k)] == boundary_loop(m, k)


class TestHd95:
    def test_identical(self, rng):
        m = rng.integers(0, 2, (16, 16))
        assert hd95(m, m, 1) == 0.0

    def test_single_pixels(self):
        a = np.zeros((10, 10), dtype=int)
        b = np.zeros((10, 10), dtype=int)
        a[2, 2] = 1
        b[2, 5] = 1
        assert hd95(a, b, 1) == 3.0

    def test_spacing(self):
        a = np.zeros((10, 10), dtype=int)
        b = np.zeros((10, 10), dtype=int)
        a[2, 2] = 1
        b[6, 5] = 1
        assert hd95(a, b, 1, spacing=(0.5, 2.0)) == pytest.approx(math.hypot(2.0, 6.0), abs=1e-12)

    def test_empty_conventions(self):
        z = np.zeros((6, 8), dtype=int)
        m = z.copy()
        m[1:3, 1:3] = 1
        assert hd95(m, z, 1) is None
        assert hd95(z, z, 1) is None
        assert hd95(z, m, 1) == pytest.approx(10.0)

    def test_all_pairs_oracle(self, rng):
        for _ in range(30):
            p, g = random_mask_pair(rng)
            for spacing in ((1.0, 1.0), (0.7, 1.3)):
                ours, ref = hd95(p, g, 1, spacing), hd95_all_pairs(p, g, 1, spacing)
                assert (ours is None) == (ref is None)
                if ref is not None:
                    assert abs(ours - ref) < 1e-9


class TestEvaluate:
    def test_multiclass_mean_over_present(self):
        gt = np.zeros((1, 4, 4), dtype=int)
        gt[0, :2, :2] = 1
        pred = gt.copy()
        rep = evaluate_masks(pred, gt, 3)
        assert rep["classes"] == [1]
        assert rep["mean"]["DSC"] == 1.0 and rep["mean"]["HD95"] == 0.0

    def test_pooled_counts(self):
        gt = np.zeros((2, 2, 2), dtype=int)
        pred = np.zeros((2, 2, 2), dtype=int)
        gt[0, 0, 0] = 1
        pred[0, 0, 0] = 1
        gt[1, 0, 0] = 1
        # pooled: tp 1, fn 1 -> 2/3, not the per-image mean of (1 + 0)/2
        assert evaluate_masks(pred, gt, 2)["mean"]["DSC"] == pytest.approx(2 / 3)

    def test_label_range(self):
        with pytest.raises(ValueError):
            evaluate_masks(np.zeros((1, 2, 2), int), np.full((1, 2, 2), 3), 2)

    def test_report_files(self, tmp_path):
        gt = np.zeros((1, 4, 4), dtype=int)
        gt[0, 1:3, 1:3] = 1
        rep = evaluate_masks(np.zeros_like(gt), gt, 2)
        tsv, js = write_report(rep, tmp_path / "r")
        lines = tsv.read_text().splitlines()
        assert lines[0].split("\t") == ["class", "mIoU", "DSC", "Acc", "Spe", "Sen", "HD95"]
        assert lines[-1].startswith("mean\t0.000000\t0.000000")
        data = json.loads(js.read_text())
        assert data["per_class"]["1"]["HD95"] == pytest.approx(math.hypot(4, 4))


@settings(max_examples=60, deadline=None)
@given(masks16, masks16)
def test_metric_properties(p, g):
    c, cr = confusion_counts(p, g, 1), confusion_counts(g, p, 1)
    vals = (iou(c), dsc(c)) + acc_spe_sen(c)
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert dsc(c) == dsc(cr) and iou(c) == iou(cr)
    assert vals == pytest.approx(ratios(*counts_loop(p, g, 1)), abs=1e-12)
    h, hr = hd95(p, g, 1), hd95(g, p, 1)
    if h is not None and hr is not None:
        assert h >= 0 and abs(h - hr) < 1e-12


@settings(max_examples=60, deadline=None)
@given(masks16, masks16, st.integers(0, 255))
def test_adding_correct_pixel_never_lowers_dsc(p, g, idx):
    i, j = divmod(idx, 16)
    g = g.copy()
    g[i, j] = 1
    before = dsc(confusion_counts(p, g, 1))
    p = p.copy()
    p[i, j] = 1
    assert dsc(confusion_counts(p, g, 1)) >= before
