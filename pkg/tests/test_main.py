import glob
import io
import json
import math
import os
import tempfile
import unittest
from unittest import mock

from rich.console import Console

from hnk.main import EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, run
from hnk.model import count_params_flops
from hnk.selftest import SuiteResult
from hnk.user_opts import RunConfig

TINY_CONFIG = """
[model]
input_w = 64
input_h = 64
backbone_channels = [3, 4, 4, 6, 6]
fpn_channels = 4
bifpn_repeats = 1
seg_fuse_channels = 4

[anchors]
levels = [3, 4, 5, 6]

[train]
batch_size = 2

[data]
train_count = 4
val_count = 2

[data.scene]
width = 64
height = 64
vehicle_count = [1, 2]
vehicle_size = [6, 20]
"""


def read_tree(directory):
    files = {}
    for path in sorted(glob.glob(os.path.join(directory, "**", "*"), recursive=True)):
        if os.path.isfile(path):
            with open(path, "rb") as file:
                files[os.path.relpath(path, directory)] = file.read()
    return files


class MainTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = self.path("tiny.toml")
        with open(self.config, "w") as file:
            file.write(TINY_CONFIG)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def hnk(self, *argv):
        return run(list(argv), Console(file=io.StringIO(), width=120))

    def read_json(self, *parts):
        with open(self.path(*parts)) as file:
            return json.load(file)

    def test_usage_errors(self):
        self.assertEqual(EXIT_INVALID, self.hnk())
        self.assertEqual(EXIT_INVALID, self.hnk("doesnt-exist"))
        self.assertEqual(EXIT_INVALID, self.hnk("info", "--doesnt-exist"))
        self.assertEqual(EXIT_INVALID, self.hnk("eval", "--out", self.path("out")))
        self.assertEqual(EXIT_INVALID, self.hnk("info", "--seed", "x"))

    def test_version(self):
        self.assertEqual(EXIT_OK, self.hnk("--version"))

    def test_messages_on_console(self):
        output = io.StringIO()
        self.assertEqual(EXIT_INVALID, run(["eval", "--out", self.path("out")], Console(file=output, width=120)))
        self.assertIn("ERROR", output.getvalue())
        self.assertIn("Fatal exception", output.getvalue())

        output = io.StringIO()
        dump = self.path("dump.toml")
        self.assertEqual(EXIT_OK, run(["info", "--dump-config", dump], Console(file=output, width=120)))
        self.assertIn("Config written into", output.getvalue())

        output = io.StringIO()
        self.assertEqual(EXIT_OK, run(["info", "--quiet", "--dump-config", dump], Console(file=output, width=120)))
        self.assertNotIn("Config written into", output.getvalue())

    def test_dump_config(self):
        dump = self.path("dump.toml")
        self.assertEqual(EXIT_OK, self.hnk("train", "--config", self.config, "--epochs", "2", "--out",
                                           self.path("out"), "--dump-config", dump))
        self.assertTrue(os.path.isfile(dump))
        self.assertFalse(os.path.exists(self.path("out")))

    def test_synth_deterministic(self):
        for name in ("a", "b"):
            self.assertEqual(EXIT_OK, self.hnk("synth", "--config", self.config, "--seed", "7", "--n", "5",
                                               "--out", self.path(name)))
        first, second = read_tree(self.path("a")), read_tree(self.path("b"))
        self.assertIn("manifest.json", first)
        self.assertEqual(11, len(first))
        self.assertEqual(first, second)

        self.assertEqual(EXIT_OK, self.hnk("synth", "--config", self.config, "--seed", "8", "--n", "5",
                                           "--out", self.path("c")))
        self.assertNotEqual(first, read_tree(self.path("c")))

    def test_info(self):
        self.assertEqual(EXIT_OK, self.hnk("info", "--out", self.path("out")))
        info = self.read_json("out", "info.json")
        params, flops = count_params_flops(RunConfig().model)
        self.assertEqual(params, info["params"])
        self.assertEqual(flops, info["flops"])
        self.assertEqual(params, sum(info["params_per_group"].values()))
        self.assertEqual([128, 128], info["input"])

    def test_anchors_fit(self):
        config = self.path("anchors.toml")
        with open(config, "w") as file:
            file.write(TINY_CONFIG.replace("train_count = 4", "train_count = 40"))
        self.assertEqual(EXIT_OK, self.hnk("anchors", "fit", "--config", config, "--out", self.path("out")))
        report = self.read_json("out", "anchors.json")
        self.assertEqual(9, len(report["clusters"]))
        self.assertEqual(report["boxes"], sum(cluster["members"] for cluster in report["clusters"]))
        self.assertEqual(3, len(report["anchors"]["scales"]))
        self.assertEqual(1.0, report["anchors"]["scales"][0])
        self.assertGreaterEqual(report["mean_best_iou"]["fitted"], report["mean_best_iou"]["default"])

        self.assertEqual(EXIT_OK, self.hnk("anchors", "fit", "--k", "2", "--config", config,
                                           "--out", self.path("k2")))
        report = self.read_json("k2", "anchors.json")
        self.assertIsNone(report["anchors"])
        self.assertEqual(1, len(report["warnings"]))

    def test_selftest_failure_exit_code(self):
        failed = [SuiteResult("nms oracle", False, 10, "mismatches", 3.0, 1.0, 0.1),
                  SuiteResult("broken", False, 0, "exception", math.nan, math.nan, 0.0, "boom")]
        with mock.patch("hnk.core.run_selftest", return_value=failed):
            self.assertEqual(EXIT_NUMERIC, self.hnk("selftest", "--out", self.path("out")))
        report = self.read_json("out", "selftest.json")
        self.assertFalse(report["passed"])
        self.assertIsNone(report["suites"][1]["value"])
        self.assertEqual("boom", report["suites"][1]["error"])

    def test_train_eval_predict(self):
        for name in ("run1", "run2"):
            self.assertEqual(EXIT_OK, self.hnk("train", "--config", self.config, "--epochs", "1",
                                               "--out", self.path(name)))
        for artifact in ("run_config.toml", "train_log.json", "stage1.hnk", "stage2.hnk", "stage3.hnk",
                         "model.hnk"):
            self.assertTrue(os.path.isfile(self.path("run1", artifact)), msg=artifact)

        log1, log2 = self.read_json("run1", "train_log.json"), self.read_json("run2", "train_log.json")
        self.assertEqual(3, len(log1["epochs"]))
        self.assertEqual(log1["epochs"], log2["epochs"])
        self.assertEqual([1, 1, 1], [stage["epochs"] for stage in log1["metadata"]["stages"]])
        self.assertIsNone(log1["epochs"][1]["train_losses"]["det"])
        with open(self.path("run1", "model.hnk"), "rb") as a, open(self.path("run2", "model.hnk"), "rb") as b:
            self.assertEqual(a.read(), b.read())

        # the stored config reproduces the run
        self.assertEqual(EXIT_OK, self.hnk("info", "--config", self.path("run1", "run_config.toml"),
                                           "--out", self.path("info")))

        checkpoint = self.path("run1", "model.hnk")
        self.assertEqual(EXIT_OK, self.hnk("eval", "--config", self.config, "--checkpoint", checkpoint,
                                           "--conf", "0.001", "--nms", "0.6", "--out", self.path("eval")))
        report = self.read_json("eval", "eval.json")
        for key in ("map50", "recall", "miou", "lane_accuracy", "iou", "counts"):
            self.assertIn(key, report)
        self.assertEqual(2, report["counts"]["images"])
        self.assertEqual(0.001, report["conf_threshold"])

        self.assertEqual(EXIT_OK, self.hnk("synth", "--config", self.config, "--n", "1",
                                           "--out", self.path("data")))
        image = glob.glob(self.path("data", "images", "*.ppm"))[0]
        self.assertEqual(EXIT_OK, self.hnk("predict", "--config", self.config, "--checkpoint", checkpoint,
                                           "--image", image, "--out", self.path("predict")))
        predictions = self.read_json("predict", "predictions.json")
        self.assertLessEqual(len(predictions["detections"]), 100)
        self.assertEqual(64 * 64, sum(predictions["mask_pixels"].values()))
        self.assertTrue(os.path.isfile(self.path("predict", "prediction_mask.pgm")))

        # a checkpoint of another architecture is rejected
        self.assertEqual(EXIT_INVALID, self.hnk("eval", "--checkpoint", checkpoint, "--out", self.path("bad")))


if __name__ == '__main__':
    unittest.main()
