import unittest

import numpy as np

from hnk import tensor as T
from hnk.anchors import AnchorConfig
from hnk.assign import assign
from hnk.exception import HnkExceptBadConfig, HnkExceptShapeMismatch
from hnk.geometry import Box
from hnk.losses import LossWeights, detection_loss, one_hot, seg_loss, total_loss
from hnk.model import (ModelConfig, anchor_grid, architecture, bifpn_fuse, build, count_params_flops,
                       flatten_head_output, forward, layer_params, predict, seg_forward)
from hnk.tensor import Tensor, backward


def small_config(size=64, levels=(3, 4, 5, 6)):
    cfg = ModelConfig(input_w=size, input_h=size, backbone_channels=[4, 4, 6, 6, 8], fpn_channels=6,
                      bifpn_repeats=1, seg_fuse_channels=6)
    cfg.anchors = AnchorConfig(levels=list(levels))
    return cfg


class BuildTest(unittest.TestCase):
    def test_same_seed_same_params(self):
        cfg = small_config()
        first, second = build(cfg, 3), build(cfg, 3)
        self.assertEqual(first.checksum(), second.checksum())
        self.assertNotEqual(first.checksum(), build(cfg, 4).checksum())

    def test_groups_partition(self):
        params = build(ModelConfig(), 0)
        names = [set(params.names([group])) for group in ("enc", "det", "seg")]
        self.assertEqual(set.union(*names), set(params.tensors))
        self.assertEqual(sum(len(n) for n in names), len(params))
        self.assertTrue(all(name.startswith(("backbone.", "neck.")) for name in names[0]))

    def test_initialisation(self):
        params = build(small_config(), 1)
        for name, tensor in params.tensors.items():
            if name.endswith("fuse.weight"):
                np.testing.assert_array_equal(tensor.data, 1.0)
            elif name.endswith(".bias"):
                np.testing.assert_array_equal(tensor.data, 0.0)
            else:
                bound = np.sqrt(6.0 / np.prod(tensor.shape[1:]))
                self.assertLessEqual(np.max(np.abs(tensor.data)), bound)

    def test_param_count_matches_build(self):
        for cfg in (ModelConfig(), small_config()):
            params = build(cfg, 0)
            self.assertEqual(count_params_flops(cfg)[0], params.num_params())

    def test_config_validation(self):
        cfg = ModelConfig(input_w=96)
        with self.assertRaises(HnkExceptBadConfig):
            cfg.validate()
        with self.assertRaises(HnkExceptBadConfig):
            ModelConfig(num_seg_classes=4).validate()
        self.assertIsNone(ModelConfig().validate())


class CostTest(unittest.TestCase):
    def test_hand_counts(self):
        self.assertEqual(layer_params("sepconv", 3, 8, 3), 62)
        self.assertEqual(layer_params("conv", 3, 8, 3), 224)
        self.assertEqual(layer_params("pointwise", 3, 8, 1), 32)

    def test_separable_is_cheaper(self):
        for c_in in range(1, 65):
            for c_out in range(2, 65):
                self.assertLess(layer_params("sepconv", c_in, c_out, 3), layer_params("conv", c_in, c_out, 3))

    def test_macs(self):
        layer = next(l for l in architecture(ModelConfig()) if l.name == "backbone.stage1.conv1")
        self.assertEqual(layer.macs, 64 * 64 * (9 * 3 + 3 * 8))
        self.assertGreater(count_params_flops(ModelConfig())[1], 0)


class ForwardTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cfg = ModelConfig()
        cls.params = build(cls.cfg, 7)
        image = np.random.default_rng(8).uniform(size=(3, 128, 128))
        cls.image = Tensor(image)
        with T.no_grad():
            cls.output = forward(cls.params, cls.image)

    def test_pyramid_sizes(self):
        sizes = {level: self.output.pyramid[level].shape[1:] for level in range(2, 8)}
        self.assertEqual(sizes, {2: (32, 32), 3: (16, 16), 4: (8, 8), 5: (4, 4), 6: (2, 2), 7: (1, 1)})

    def test_head_shapes(self):
        self.assertEqual(self.output.det_raw.shape, (3069, 6))
        self.assertEqual(self.output.det_raw.shape[0], len(anchor_grid(self.cfg)))
        self.assertEqual(self.output.seg_logits.shape, (3, 128, 128))

    def test_deterministic(self):
        with T.no_grad():
            again = forward(self.params, self.image)
        self.assertEqual(again.det_raw.data.tobytes(), self.output.det_raw.data.tobytes())
        self.assertEqual(again.seg_logits.data.tobytes(), self.output.seg_logits.data.tobytes())

    def test_wrong_image_shape(self):
        with self.assertRaises(HnkExceptShapeMismatch):
            forward(self.params, Tensor(np.zeros((3, 64, 64))))

    def test_predict_thresholds(self):
        detections, mask = predict(self.params, self.image, conf_threshold=1.0)
        self.assertEqual(detections, [])
        self.assertEqual(mask.shape, (128, 128))

    def test_untrained_mask_ties_to_background(self):
        params = self.params.copy()
        params["seg_head.out.weight"].data[...] = 0.0
        _, mask = predict(params, self.image, conf_threshold=0.5)
        self.assertTrue(np.all(mask == 0))

    def test_predict_is_sorted_and_capped(self):
        detections, _ = predict(self.params, self.image, conf_threshold=0.0, nms_threshold=0.6, max_detections=20)
        self.assertLessEqual(len(detections), 20)
        scores = [d.score for d in detections]
        self.assertEqual(scores, sorted(scores, reverse=True))


class FusionTest(unittest.TestCase):
    def test_equal_weights(self):
        out = bifpn_fuse([Tensor(np.full((1, 2, 2), 2.0)), Tensor(np.full((1, 2, 2), 4.0))], Tensor([1.0, 1.0]))
        np.testing.assert_allclose(out.data, 6.0 / (2.0 + 1e-4), rtol=1e-14)
        self.assertAlmostEqual(float(out.data[0, 0, 0]), 2.99985, places=5)

    def test_selector(self):
        rng = np.random.default_rng(51)
        a, b = rng.uniform(1, 2, size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
        out = bifpn_fuse([Tensor(a), Tensor(b)], Tensor([1.0, 0.0]))
        np.testing.assert_allclose(out.data, a, rtol=2e-4)

    def test_sub_convex(self):
        rng = np.random.default_rng(52)
        for _ in range(20):
            maps = [rng.normal(size=(2, 3, 3)) for _ in range(3)]
            weights = rng.uniform(0, 2, size=3)
            out = bifpn_fuse([Tensor(m) for m in maps], Tensor(weights)).data
            coefficients = weights / (1e-4 + weights.sum())
            self.assertLessEqual(coefficients.sum(), 1.0)
            self.assertTrue(np.all(out >= np.minimum(np.min(maps, axis=0), 0) - 1e-12))
            self.assertTrue(np.all(out <= np.maximum(np.max(maps, axis=0), 0) + 1e-12))


class HeadTest(unittest.TestCase):
    def test_seg_zero_in_zero_out(self):
        cfg = small_config()
        params = build(cfg, 2)
        pyramid = {2: Tensor(np.zeros((4, 16, 16)))}
        for level in cfg.levels:
            side = 64 // 2 ** level
            pyramid[level] = Tensor(np.zeros((6, side, side)))
        logits = seg_forward(params, pyramid)
        self.assertEqual(logits.shape, (3, 64, 64))
        self.assertTrue(np.all(logits.data == 0.0))

    def test_head_layout_follows_anchor_order(self):
        anchors, width = 9, 6
        level_a = np.zeros((anchors * width, 4, 4))
        level_b = np.zeros((anchors * width, 2, 2))
        # anchor 5, column 3, cell (x=1, y=0) of the second level
        level_b[5 * width + 3, 0, 1] = 1.0
        rows = flatten_head_output([Tensor(level_a), Tensor(level_b)], anchors, width).data
        expected_row = 4 * 4 * anchors + (0 * 2 + 1) * anchors + 5
        self.assertEqual(rows.shape, (4 * 4 * anchors + 2 * 2 * anchors, width))
        self.assertEqual(np.argwhere(rows == 1.0).tolist(), [[expected_row, 3]])


class EndToEndGradientTest(unittest.TestCase):
    def test_sampled_parameters(self):
        cfg = small_config()
        params = build(cfg, 5)
        rng = np.random.default_rng(53)
        image = Tensor(rng.uniform(size=(3, 64, 64)))
        gts = [Box(10.0, 12.0, 30.0, 25.0, 0), Box(40.0, 40.0, 47.0, 46.0, 0)]
        grid = anchor_grid(cfg)
        assignment = assign(grid, gts)
        target = one_hot(rng.integers(0, 3, size=(64, 64)))
        weights = LossWeights()

        def loss():
            output = forward(params, image)
            det, _ = detection_loss(output.det_raw, assignment, gts, grid, weights)
            seg = seg_loss(T.softmax_channel(output.seg_logits), target, weights)
            return total_loss(det, seg, weights)

        grads = backward(loss(), params.tensors)
        names = params.names()
        h = 1e-5
        worst = 0.0
        for _ in range(64):
            name = names[int(rng.integers(len(names)))]
            data = params[name].data
            index = int(rng.integers(data.size))
            original = data.flat[index]
            with T.no_grad():
                data.flat[index] = original + h
                plus = loss().item()
                data.flat[index] = original - h
                minus = loss().item()
            data.flat[index] = original
            analytic = grads[name].flat[index]
            numeric = (plus - minus) / (2 * h)
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
        self.assertLess(worst, 1e-3)


if __name__ == '__main__':
    unittest.main()
