import dataclasses
import math
import unittest

import numpy as np

from hnk import tensor as T
from hnk.anchors import AnchorConfig, generate_grid
from hnk.assign import assign
from hnk.exception import HnkExceptBadConfig
from hnk.geometry import Box, boxes_to_array, encode_targets
from hnk.losses import (LossWeights, detection_loss, focal_loss, one_hot, seg_focal_loss, seg_loss, smooth_l1,
                        total_loss, tversky_loss)
from hnk.selftest import random_simplex
from hnk.tensor import Tensor, grad_check


def small_detection_case():
    cfg = AnchorConfig(levels=[3, 4])
    grid = generate_grid(cfg, 16, 16)
    gts = [Box(1.0, 2.0, 9.0, 13.0, 0), Box(8.5, 7.0, 15.0, 11.0, 0)]
    return grid, gts, assign(grid, gts)


class FocalTest(unittest.TestCase):
    def test_confident_correct(self):
        target = np.array([1.0, 0.0, 1.0])
        self.assertLess(focal_loss(Tensor(target), target).item(), 1e-5)

    def test_reduces_to_cross_entropy(self):
        rng = np.random.default_rng(41)
        for _ in range(100):
            p = rng.uniform(0.01, 0.99, size=7)
            t = (rng.uniform(size=7) > 0.5).astype(float)
            ce = np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p)))
            self.assertLess(abs(focal_loss(Tensor(p), t, 0.5, 0.0).item() - 0.5 * ce), 1e-12)

    def test_single_element(self):
        self.assertAlmostEqual(focal_loss(Tensor([0.9]), [1.0], 0.25, 2.0).item(),
                               -0.25 * 0.01 * math.log(0.9), places=15)
        self.assertAlmostEqual(focal_loss(Tensor([0.9]), [1.0], 0.25, 2.0).item(), 2.634e-4, delta=1e-7)

    def test_gradient(self):
        rng = np.random.default_rng(42)
        target = (rng.uniform(size=(6,)) > 0.5).astype(float)
        for _ in range(10):
            logits = Tensor(rng.normal(size=(6,)))
            self.assertLess(grad_check(lambda x: focal_loss(T.sigmoid(x), target), logits, 1e-5), 1e-4)


class SmoothL1Test(unittest.TestCase):
    def test_values(self):
        self.assertEqual(smooth_l1(Tensor([0.0])).item(), 0.0)
        self.assertAlmostEqual(smooth_l1(Tensor([1.0])).item(), 1 - 1 / 18, places=14)

    def test_continuity(self):
        delta2 = 1.0 / 9.0
        quadratic = (0.5 / delta2) * delta2 ** 2
        linear = delta2 - delta2 / 2
        self.assertLess(abs(quadratic - linear), 1e-15)
        self.assertLess(abs(smooth_l1(Tensor([delta2])).item() - 0.0555556), 1e-7)
        self.assertAlmostEqual(2 * (0.5 / delta2) * delta2, 1.0, places=15)

    def test_gradient(self):
        rng = np.random.default_rng(43)
        for _ in range(10):
            self.assertLess(grad_check(lambda x: smooth_l1(T.absolute(x)), Tensor(rng.normal(scale=0.3, size=8))),
                            1e-4)


class DetectionLossTest(unittest.TestCase):
    def test_perfect_prediction(self):
        grid, gts, assignment = small_detection_case()
        raw = np.zeros((len(grid), 6))
        raw[:, 4] = -20.0
        positives = np.flatnonzero(assignment.positive)
        raw[positives, :4] = encode_targets(boxes_to_array(gts)[assignment.labels[positives]],
                                            grid.cells[positives])
        raw[positives, 4] = 20.0
        raw[positives, 5] = 20.0
        total, breakdown = detection_loss(Tensor(raw), assignment, gts, grid, LossWeights())
        self.assertLess(total.item(), 1e-4)
        self.assertEqual(set(breakdown), {"class", "obj", "box"})

    def test_alpha3_is_linear(self):
        grid, gts, assignment = small_detection_case()
        raw = Tensor(np.random.default_rng(44).normal(size=(len(grid), 6)))
        _, base = detection_loss(raw, assignment, gts, grid, LossWeights())
        _, doubled = detection_loss(raw, assignment, gts, grid, LossWeights(alpha3=8.0))
        self.assertAlmostEqual(doubled["box"], 2 * base["box"], places=12)
        self.assertEqual(doubled["class"], base["class"])
        self.assertEqual(doubled["obj"], base["obj"])

    def test_background_only(self):
        grid = generate_grid(AnchorConfig(levels=[3, 4]), 16, 16)
        raw = Tensor(np.zeros((len(grid), 6)))
        total, breakdown = detection_loss(raw, assign(grid, []), [], grid, LossWeights())
        self.assertEqual(breakdown["box"], 0.0)
        self.assertEqual(breakdown["class"], 0.0)
        expected = -0.75 * 0.25 * math.log(0.5)
        self.assertAlmostEqual(total.item(), expected, places=12)

    def test_gradient(self):
        grid, gts, assignment = small_detection_case()
        rng = np.random.default_rng(45)
        for _ in range(3):
            raw = Tensor(rng.normal(scale=0.5, size=(len(grid), 6)))
            error = grad_check(lambda x: detection_loss(x, assignment, gts, grid, LossWeights())[0], raw, 1e-5)
            self.assertLess(error, 1e-4)


class SegmentationLossTest(unittest.TestCase):
    def test_tversky_perfect(self):
        gt = np.array([[1.0, 0.0], [0.0, 1.0]])
        self.assertLess(abs(tversky_loss(Tensor(gt), gt).item()), 1e-6)

    def test_tversky_scalar(self):
        self.assertAlmostEqual(tversky_loss(Tensor([[0.5]]), [[1.0]], 0.7).item(), 1 - 0.5 / 0.85, places=6)

    def test_tversky_half_is_dice(self):
        rng = np.random.default_rng(46)
        for _ in range(100):
            p = random_simplex(rng, 3, 10)
            g = one_hot(rng.integers(0, 3, size=(1, 10)))[:, 0, :]
            dice = 3 - np.sum(2 * np.sum(p * g, axis=1) / (np.sum(p, axis=1) + np.sum(g, axis=1) + 2e-7))
            self.assertLess(abs(tversky_loss(Tensor(p), g, 0.5).item() - dice), 1e-12)

    def test_seg_focal_values(self):
        gt = np.array([[1.0], [0.0], [0.0]])
        self.assertLess(seg_focal_loss(Tensor(gt), gt).item(), 1e-5)
        self.assertAlmostEqual(seg_focal_loss(Tensor([[0.9], [0.05], [0.05]]), gt, 0.25, 2.0).item(),
                               2.634e-4, delta=1e-7)
        uniform = np.full((3, 4), 1 / 3)
        target = one_hot(np.array([[0, 1, 2, 0]]))[:, 0, :]
        self.assertAlmostEqual(seg_focal_loss(Tensor(uniform), target, 1.0, 0.0).item(), math.log(3), places=12)

    def test_seg_loss(self):
        rng = np.random.default_rng(47)
        mask = rng.integers(0, 3, size=(4, 4))
        gt = one_hot(mask)
        self.assertLess(seg_loss(Tensor(gt), gt, LossWeights()).item(), 1e-5)
        p = T.softmax_channel(Tensor(rng.normal(size=(3, 4, 4))))
        w = dataclasses.replace(LossWeights(), lambda_seg=0.0)
        self.assertEqual(seg_loss(p, gt, w).item(), tversky_loss(p, gt, w.phi).item())

    def test_seg_gradient(self):
        rng = np.random.default_rng(48)
        for _ in range(10):
            gt = one_hot(rng.integers(0, 3, size=(4, 4)))
            logits = Tensor(rng.normal(size=(3, 4, 4)))
            error = grad_check(lambda x: seg_loss(T.softmax_channel(x), gt, LossWeights()), logits, 1e-5)
            self.assertLess(error, 1e-4)

    def test_losses_non_negative(self):
        rng = np.random.default_rng(49)
        for _ in range(20):
            gt = one_hot(rng.integers(0, 3, size=(3, 3)))
            p = T.softmax_channel(Tensor(rng.normal(size=(3, 3, 3))))
            self.assertGreaterEqual(seg_loss(p, gt, LossWeights()).item(), 0.0)


class TotalLossTest(unittest.TestCase):
    def test_combination(self):
        self.assertEqual(total_loss(Tensor(2.0), Tensor(3.0), LossWeights()).item(), 5.0)
        w = dataclasses.replace(LossWeights(), beta=0.0)
        self.assertEqual(total_loss(Tensor(2.0), Tensor(3.0), w).item(), 2.0)
        w = dataclasses.replace(LossWeights(), alpha=2.0, beta=0.5)
        self.assertEqual(total_loss(Tensor(1.0), Tensor(4.0), w).item(), 4.0)

    def test_weight_validation(self):
        with self.assertRaises(HnkExceptBadConfig):
            LossWeights(phi=1.5).validate()
        with self.assertRaises(HnkExceptBadConfig):
            LossWeights(alpha3=0.0).validate()


if __name__ == '__main__':
    unittest.main()
