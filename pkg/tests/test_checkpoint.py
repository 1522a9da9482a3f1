import os
import struct
import tempfile
import unittest

import numpy as np

from hnk.anchors import AnchorConfig
from hnk.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from hnk.exception import HnkExceptBadFile
from hnk.model import ModelConfig, build


def tiny_config():
    cfg = ModelConfig(input_w=64, input_h=64, backbone_channels=[2, 2, 3, 3, 4], fpn_channels=3,
                      bifpn_repeats=1, seg_fuse_channels=3)
    cfg.anchors = AnchorConfig(levels=[3, 4, 5, 6])
    return cfg


class CheckpointTest(unittest.TestCase):
    def setUp(self):
        self.cfg = tiny_config()
        self.params = build(self.cfg, 11)
        self.directory = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.directory.name, "model.hnk")

    def tearDown(self):
        self.directory.cleanup()

    def test_round_trip_is_bit_exact(self):
        save_checkpoint(self.params, self.path)
        restored = load_checkpoint(self.path, self.cfg)
        self.assertEqual(restored.checksum(), self.params.checksum())
        self.assertEqual(restored.groups, self.params.groups)
        with open(self.path, "rb") as handle:
            self.assertEqual(handle.read(), encode_checkpoint(restored))

    def test_layout(self):
        payload = encode_checkpoint(self.params)
        self.assertEqual(payload[:4], MAGIC)
        first = sorted(self.params.tensors)[0]
        (length,) = struct.unpack("<I", payload[4:8])
        self.assertEqual(payload[8:8 + length].decode("utf-8"), first)
        tag, rank = struct.unpack("<BI", payload[8 + length:13 + length])
        self.assertEqual(tag, 0)
        self.assertEqual(rank, self.params[first].data.ndim)
        self.assertEqual(list(decode_checkpoint(payload)), sorted(self.params.tensors))

    def test_bad_magic(self):
        with self.assertRaises(HnkExceptBadFile):
            decode_checkpoint(b"HNK2" + encode_checkpoint(self.params)[4:])

    def test_truncated(self):
        payload = encode_checkpoint(self.params)
        with self.assertRaises(HnkExceptBadFile):
            decode_checkpoint(payload[:-3])

    def test_wrong_model(self):
        save_checkpoint(self.params, self.path)
        other = tiny_config()
        other.fpn_channels = 4
        with self.assertRaises(HnkExceptBadFile):
            load_checkpoint(self.path, other)

    def test_missing_file(self):
        with self.assertRaises(HnkExceptBadFile):
            load_checkpoint(os.path.join(self.directory.name, "absent.hnk"), self.cfg)

    def test_values_survive(self):
        self.params["seg_head.out.bias"].data[:] = np.array([0.1, -2.5, 1e-300])
        restored = decode_checkpoint(encode_checkpoint(self.params))
        np.testing.assert_array_equal(restored["seg_head.out.bias"].data, [0.1, -2.5, 1e-300])
        self.assertEqual(restored["seg_head.out.bias"].group, "seg")


if __name__ == '__main__':
    unittest.main()
