import itertools
import math
import unittest

import numpy as np

from hnk.exception import HnkExceptBadOptions, HnkExceptDegeneratePrediction
from hnk.geometry import AnchorRef, Box, RawPrediction, decode, decode_array, encode, iou, iou_matrix, nms
from hnk.selftest import nms_oracle, random_box


class IouTest(unittest.TestCase):
    def test_identical(self):
        self.assertEqual(iou(Box(1, 2, 5, 9), Box(1, 2, 5, 9)), 1.0)

    def test_disjoint(self):
        self.assertEqual(iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)), 0.0)

    def test_partial_overlap(self):
        self.assertAlmostEqual(iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)), 1 / 7, places=12)

    def test_degenerate_pair(self):
        self.assertEqual(iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)), 0.0)

    def test_symmetric_and_matches_matrix(self):
        rng = np.random.default_rng(11)
        boxes = [random_box(rng) for _ in range(12)]
        matrix = iou_matrix(np.array([b[:4] for b in boxes]), np.array([b[:4] for b in boxes]))
        for i, j in itertools.product(range(12), repeat=2):
            self.assertAlmostEqual(iou(boxes[i], boxes[j]), iou(boxes[j], boxes[i]), places=15)
            self.assertAlmostEqual(matrix[i, j], iou(boxes[i], boxes[j]), places=12)

    def test_center_roundtrip(self):
        box = Box(1.25, -3.5, 7.75, 2.0)
        back = Box.from_center(*box.to_center())
        for a, b in zip(box, back):
            self.assertAlmostEqual(a, b, delta=1e-12)


class CodecTest(unittest.TestCase):
    def test_zero_offsets(self):
        box = decode(RawPrediction(0, 0, 0, 0), AnchorRef(3, 2, 4, 2, 3, 8))
        cx, cy, w, h = box.to_center()
        self.assertEqual((cx, cy, w, h), (28.0, 20.0, 32.0, 16.0))

    def test_width_doubles(self):
        box = decode(RawPrediction(0, 0, math.log(2), 0), AnchorRef(3, 2, 4, 2, 3, 8))
        self.assertAlmostEqual(box.w, 64.0, places=10)

    def test_overflow_rejected(self):
        with self.assertRaises(HnkExceptDegeneratePrediction):
            decode(RawPrediction(0, 0, 41.0, 0), AnchorRef(0, 0, 1, 1, 3, 8))

    def test_encode_examples(self):
        anchor = AnchorRef(3, 2, 4, 2, 3, 8)
        raw = encode(Box.from_center(28.0, 20.0, 32.0, 16.0), anchor)
        for value in raw:
            self.assertAlmostEqual(value, 0.0, delta=1e-12)
        raw = encode(Box.from_center(28.0, 20.0, 64.0, 16.0), anchor)
        self.assertAlmostEqual(raw.r_w, math.log(2), places=12)
        raw = encode(Box.from_center((3 + 0.9) * 8, 20.0, 32.0, 16.0), anchor)
        self.assertAlmostEqual(raw.r_x, 2.1972245773362196, places=10)

    def test_encode_requires_owning_cell(self):
        self.longMessage = True
        with self.assertRaises(HnkExceptBadOptions) as exc:
            encode(Box.from_center(8.0, 20.0, 32.0, 16.0), AnchorRef(3, 2, 4, 2, 3, 8))
        self.assertTrue("does not own" in str(exc.exception), msg=str(exc.exception))

    def test_roundtrip(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(100):
            level = int(rng.integers(3, 8))
            stride = 2 ** level
            anchor = AnchorRef(int(rng.integers(0, 10)), int(rng.integers(0, 10)),
                               rng.uniform(0.5, 8), rng.uniform(0.5, 8), level, stride)
            offset = rng.uniform(0.01, 0.99, size=2)
            gt = Box.from_center((anchor.c_x + offset[0]) * stride, (anchor.c_y + offset[1]) * stride,
                                 rng.uniform(2, 200), rng.uniform(2, 200))
            back = decode(encode(gt, anchor), anchor)
            worst = max(worst, max(abs(a - b) for a, b in zip(gt[:4], back[:4])))
        self.assertLess(worst, 1e-9)

    def test_decode_array_agrees(self):
        rng = np.random.default_rng(13)
        raw = rng.normal(size=(20, 4))
        anchors = np.column_stack([rng.integers(0, 5, 20), rng.integers(0, 5, 20),
                                   rng.uniform(1, 4, 20), rng.uniform(1, 4, 20), np.full(20, 16.0)])
        boxes = decode_array(raw, anchors)
        for row, anchor_row, box in zip(raw, anchors, boxes):
            expected = decode(RawPrediction(*row), AnchorRef(*anchor_row[:4], 4, 16))
            np.testing.assert_allclose(box, expected[:4], rtol=0, atol=1e-9)


class NmsTest(unittest.TestCase):
    def test_single_box(self):
        self.assertEqual(nms([Box(0, 0, 1, 1)], [0.3], 0.6), [0])

    def test_suppression_example(self):
        a = Box(0, 0, 10, 10)
        b = Box(0, 0, 10, 8)
        c = Box(20, 20, 30, 30)
        self.assertAlmostEqual(iou(a, b), 0.8)
        self.assertEqual(nms([a, b, c], [0.9, 0.7, 0.5], 0.6), [0, 2])

    def test_no_overlap_keeps_all_sorted(self):
        boxes = [Box(i * 10, 0, i * 10 + 5, 5) for i in range(4)]
        self.assertEqual(nms(boxes, [0.2, 0.9, 0.5, 0.9], 0.6), [1, 3, 2, 0])

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            n = int(rng.integers(1, 9))
            boxes = [random_box(rng, span=20.0) for _ in range(n)]
            scores = list(np.round(rng.uniform(size=n), 1))
            threshold = float(rng.uniform(0.1, 0.7))
            self.assertEqual(nms(boxes, scores, threshold), nms_oracle(boxes, scores, threshold))


if __name__ == '__main__':
    unittest.main()
