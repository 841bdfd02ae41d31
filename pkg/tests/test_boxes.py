import numpy as np
import pytest

from hybridla.boxes import (clamp_boxes, cxcywh_to_xywh, giou, giou_tensor, iou, pairwise_giou, pairwise_iou,
                            to_xyxy, xywh_to_cxcywh)
from hybridla.nn import Tensor, grad_check


def direct_iou(a, b):
    """Corner-form IoU written out with scalars."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)


def direct_giou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


class TestConversions:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        b = rng.uniform(0, 1, (50, 4))
        np.testing.assert_allclose(xywh_to_cxcywh(cxcywh_to_xywh(b)), b, atol=1e-15)

    def test_to_xyxy(self):
        np.testing.assert_allclose(to_xyxy([0.5, 0.5, 0.2, 0.4]), [0.4, 0.3, 0.6, 0.7])
        np.testing.assert_allclose(to_xyxy([1, 2, 3, 4], "xywh"), [1, 2, 4, 6])

    def test_unknown_format(self):
        with pytest.raises(ValueError, match="unknown box format"):
            to_xyxy([0, 0, 1, 1], "yxhw")


class TestIoU:
    def test_identity(self):
        rng = np.random.default_rng(1)
        for b in np.c_[rng.uniform(0.2, 0.8, (20, 2)), rng.uniform(0.01, 0.3, (20, 2))]:
            assert iou(b, b) == pytest.approx(1.0, abs=1e-12)
            assert giou(b, b) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint(self):
        assert iou([0, 0, 1, 1], [2, 2, 1, 1], "xywh") == 0.0

    def test_corner_example(self):
        assert iou([0, 0, 2, 2], [1, 0, 2, 2], "xywh") == pytest.approx(2 / 6)

    def test_giou_touching_corner(self):
        assert giou([0, 0, 1, 1], [1, 1, 1, 1], "xywh") == pytest.approx(-0.5)

    def test_degenerate_is_zero(self):
        assert iou([0.5, 0.5, 0.0, 0.2], [0.5, 0.5, 0.0, 0.2]) == 0.0
        assert giou([0.5, 0.5, 0.2, 0.0], [0.5, 0.5, 0.3, 0.3]) == 0.0

    def test_fuzz_against_direct_formulas(self):
        rng = np.random.default_rng(2)
        a = np.c_[rng.uniform(0.1, 0.9, (1000, 2)), rng.uniform(0.01, 0.5, (1000, 2))]
        b = np.c_[rng.uniform(0.1, 0.9, (1000, 2)), rng.uniform(0.01, 0.5, (1000, 2))]
        for x, y in zip(a, b):
            xa, ya = to_xyxy(x), to_xyxy(y)
            i, g = iou(x, y), giou(x, y)
            assert i == pytest.approx(direct_iou(xa, ya), abs=1e-12)
            assert g == pytest.approx(direct_giou(xa, ya), abs=1e-12)
            assert g <= i + 1e-15
            assert -1.0 < g <= 1.0

    def test_pairwise_shape(self):
        assert pairwise_iou(np.zeros((3, 4)) + 0.5, np.zeros((5, 4)) + 0.5).shape == (3, 5)
        assert pairwise_giou(np.zeros((0, 4)), np.zeros((2, 4))).shape == (0, 2)


class TestTensorOps:
    def test_giou_tensor_matches_numpy(self):
        rng = np.random.default_rng(3)
        p = np.c_[rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.3, (6, 2))]
        t = np.c_[rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.3, (6, 2))]
        np.testing.assert_allclose(giou_tensor(Tensor(p), t).data, np.diag(pairwise_giou(p, t)), atol=1e-12)

    def test_giou_tensor_gradient(self):
        rng = np.random.default_rng(4)
        t = np.c_[rng.uniform(0.3, 0.7, (4, 2)), rng.uniform(0.1, 0.3, (4, 2))]
        p = t + rng.normal(0, 0.05, t.shape)
        assert grad_check(lambda x: giou_tensor(x, t).sum(), p) < 1e-6

    def test_clamp_boxes(self):
        b = clamp_boxes(Tensor(np.array([[-0.5, 1.5, 0.0, 3.0], [0.3, 0.4, 0.2, 0.1]]))).data
        np.testing.assert_array_equal(b, [[0.0, 1.0, 1e-3, 1.0], [0.3, 0.4, 0.2, 0.1]])
