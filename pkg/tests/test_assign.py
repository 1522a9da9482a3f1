import unittest

import numpy as np

from hnk.anchors import AnchorConfig, generate_grid
from hnk.assign import assign, assign_arrays
from hnk.geometry import Box
from hnk.selftest import concentric_gts, random_gt, reference_labels


class AssignTest(unittest.TestCase):
    def test_identical_anchor(self):
        result = assign_arrays(np.array([[0.0, 0.0, 100.0, 100.0]]), np.array([[48.0, 48.0, 56.0, 56.0]]),
                               np.array([[0.0, 0.0, 100.0, 100.0]]))
        self.assertEqual(result.label(0), "positive(0)")
        self.assertEqual(result.max_iou[0], 1.0)

    def test_small_gt_uses_low_threshold(self):
        anchors = np.array([[0.0, 0.0, 80.0 / 3.0, 8.0]])
        cells = np.array([[0.0, 0.0, 8.0, 8.0]])
        result = assign_arrays(anchors, cells, np.array([[0.0, 0.0, 8.0, 8.0]]))
        self.assertAlmostEqual(result.max_iou[0], 0.3, places=12)
        self.assertEqual(result.label(0), "positive(0)")

    def test_large_gt_forces_best_anchor(self):
        tall = [0.0, 0.0, 20.0, 200.0 / 3.0]
        anchors = np.array([tall, tall, [100.0, 100.0, 110.0, 110.0]])
        cells = np.array([[8.0, 8.0, 16.0, 16.0], [8.0, 8.0, 16.0, 16.0], [96.0, 96.0, 104.0, 104.0]])
        result = assign_arrays(anchors, cells, np.array([[0.0, 0.0, 20.0, 20.0]]))
        self.assertAlmostEqual(result.max_iou[0], 0.3, places=12)
        self.assertEqual([result.label(i) for i in range(3)], ["positive(0)", "ignore", "negative"])

    def test_conflicting_forced_anchor(self):
        # both boxes are centered in the same cell and prefer anchor 0
        anchors = np.array([[0.0, 0.0, 20.0, 20.0], [0.0, 0.0, 10.0, 10.0]])
        cells = np.array([[8.0, 8.0, 16.0, 16.0], [8.0, 8.0, 16.0, 16.0]])
        gts = np.array([[0.0, 0.0, 20.0, 20.0], [2.0, 2.0, 18.0, 18.0]])
        result = assign_arrays(anchors, cells, gts)
        self.assertEqual([result.label(0), result.label(1)], ["positive(0)", "positive(1)"])

    def test_forced_anchor_overrides_threshold_match(self):
        anchors = np.array([[0.0, 0.0, 20.0, 20.0], [2.0, 2.0, 18.0, 18.0]])
        cells = np.array([[8.0, 8.0, 16.0, 16.0], [8.0, 8.0, 16.0, 16.0]])
        # anchor 1 clears the threshold of the large box but is the best anchor of the small one
        gts = np.array([[0.0, 0.0, 20.0, 20.0], [8.0, 8.0, 12.0, 12.0]])
        result = assign_arrays(anchors, cells, gts)
        self.assertEqual(list(result.labels), [0, 1])

    def test_concentric_gts_each_get_a_positive(self):
        grid = generate_grid(AnchorConfig(), 128, 128)
        failures = []
        for side in range(6, 40):
            for delta in range(1, 5):
                gts = [Box(60.0 - side / 2, 60.0 - side / 2, 60.0 + side / 2, 60.0 + side / 2),
                       Box(60.0 - (side + delta) / 2, 60.0 - (side + delta) / 2,
                           60.0 + (side + delta) / 2, 60.0 + (side + delta) / 2)]
                result = assign(grid, gts)
                matched = set(int(label) for label in result.labels if label >= 0)
                if matched != {0, 1}:
                    failures.append((side, side + delta, sorted(matched)))
        self.assertEqual(failures, [])

    def test_concentric_matches_reference(self):
        rng = np.random.default_rng(33)
        for _ in range(20):
            cfg = AnchorConfig(levels=[3, 4], base_scale_constant=float(rng.uniform(0.4, 2.0)))
            grid = generate_grid(cfg, 16, 16)
            gts = concentric_gts(rng)
            result = assign(grid, gts)
            self.assertEqual(list(result.labels), reference_labels(grid.boxes, grid.cell_boxes, gts))
            self.assertEqual(set(int(label) for label in result.labels if label >= 0), set(range(len(gts))))

    def test_background_image(self):
        grid = generate_grid(AnchorConfig(), 128, 128)
        result = assign(grid, [])
        self.assertTrue(np.all(result.negative))
        self.assertEqual(result.num_positive, 0)

    def test_every_gt_gets_a_positive(self):
        rng = np.random.default_rng(31)
        grid = generate_grid(AnchorConfig(), 128, 128)
        for _ in range(10):
            gts = [random_gt(rng, 128.0) for _ in range(4)]
            result = assign(grid, gts)
            matched = set(int(label) for label in result.labels if label >= 0)
            self.assertEqual(matched, set(range(len(gts))))
            # every positive owns the center of its ground truth
            for index in np.flatnonzero(result.positive):
                cell = grid.cell_boxes[index]
                cx, cy, _, _ = gts[result.labels[index]].to_center()
                self.assertTrue(cell[0] <= cx < cell[2] and cell[1] <= cy < cell[3])

    def test_matches_reference(self):
        rng = np.random.default_rng(32)
        for _ in range(40):
            cfg = AnchorConfig(levels=[3, 4], base_scale_constant=float(rng.uniform(0.4, 2.0)))
            grid = generate_grid(cfg, 16, 16)
            self.assertLessEqual(len(grid), 50)
            gts = [random_gt(rng) for _ in range(int(rng.integers(0, 4)))]
            result = assign(grid, gts)
            expected = reference_labels(grid.boxes, grid.cell_boxes, gts)
            self.assertEqual(list(result.labels), expected)


if __name__ == '__main__':
    unittest.main()
