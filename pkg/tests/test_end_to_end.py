import io
import json
import os
import tempfile
import unittest

from rich.console import Console

from hnk.main import EXIT_OK, run


@unittest.skipUnless(os.environ.get("HNK_SLOW"), "full training run, set HNK_SLOW=1")
class DeskScaleTest(unittest.TestCase):
    """Default configuration: seed 7, 400/100 synthetic scenes at 128x128, three stages of at most 60 epochs"""

    def test_trained_model_quality(self):
        with tempfile.TemporaryDirectory() as directory:
            console = Console(file=io.StringIO())
            train_out = os.path.join(directory, "train")
            self.assertEqual(EXIT_OK, run(["train", "--out", train_out], console))
            self.assertEqual(EXIT_OK, run(["eval", "--checkpoint", os.path.join(train_out, "model.hnk"),
                                           "--conf", "0.001", "--nms", "0.6", "--out", directory], console))
            with open(os.path.join(directory, "eval.json")) as file:
                report = json.load(file)

        self.assertGreaterEqual(report["map50"], 0.90)
        self.assertGreaterEqual(report["recall"], 0.90)
        self.assertGreaterEqual(report["iou"]["drivable"], 0.85)
        self.assertGreaterEqual(report["iou"]["lane"], 0.60)
        self.assertGreaterEqual(report["lane_accuracy"], 0.85)


if __name__ == '__main__':
    unittest.main()
