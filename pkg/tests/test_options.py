import json
import logging
import os
import tempfile
import unittest
from unittest import mock

from tomlkit import load

from hnk.exception import HnkExceptBadConfig, HnkExceptBadFile, HnkExceptBadOptions
from hnk.user_opts import Options, RunConfig, default_out, threads_env


class OptionsTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        logger = logging.getLogger("debug_log")
        for handler in logger.handlers:
            handler.close()
        logger.handlers.clear()
        logger.addHandler(logging.NullHandler())
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.dir, name)

    def write(self, name, content):
        with open(self.path(name), "w") as file:
            file.write(content)
        return self.path(name)

    def parse(self, argv):
        options = Options()
        parsed_args = options.configure_parser().parse_args(argv)
        options.read_args(parsed_args)
        return options

    def test_defaults(self):
        options = self.parse(["info"])
        with mock.patch.dict(os.environ, {threads_env: ""}):
            self.assertIsNone(options.basic_validate())
        self.assertEqual(default_out, options.out)
        self.assertEqual(9, options.k)
        self.assertEqual(1, options.threads)
        self.assertEqual(RunConfig(), options.run_config)

    def test_flag_overrides(self):
        options = self.parse(["train", f"--{Options().opt_name_epochs}", "2", "--seed", "3"])
        options.basic_validate()
        self.assertEqual([2, 2, 2], options.run_config.train.max_epochs)
        self.assertEqual(3, options.run_config.train.seed)
        self.assertEqual(3, options.run_config.data.scene.seed)

        options = self.parse(["eval", "--checkpoint", self.write("model.hnk", ""), "--conf", "0.25", "--nms", "0.5"])
        options.basic_validate()
        self.assertEqual(0.25, options.run_config.eval.conf_threshold)
        self.assertEqual(0.5, options.run_config.eval.nms_threshold)

    def test_usage_errors(self):
        parser = Options().configure_parser()
        with self.assertRaises(HnkExceptBadOptions) as exc:
            parser.parse_args(["train", "--doesnt-exist"])
        self.assertTrue("usage" in str(exc.exception), msg=str(exc.exception))
        with self.assertRaises(HnkExceptBadOptions):
            parser.parse_args(["doesnt-exist"])
        with self.assertRaises(HnkExceptBadOptions):
            parser.parse_args(["anchors"])
        with self.assertRaises(HnkExceptBadOptions):
            parser.parse_args(["train", "--epochs", "many"])

    def test_basic_validate(self):
        with self.assertRaises(HnkExceptBadOptions) as exc:
            self.parse([]).basic_validate()
        self.assertTrue("Choose a command" in str(exc.exception), msg=str(exc.exception))

        with self.assertRaises(HnkExceptBadOptions):
            self.parse(["train", "--epochs", "0"]).basic_validate()

        with self.assertRaises(HnkExceptBadOptions) as exc:
            self.parse(["eval"]).basic_validate()
        self.assertTrue("--checkpoint" in str(exc.exception), msg=str(exc.exception))

        with self.assertRaises(HnkExceptBadFile) as exc:
            self.parse(["eval", "--checkpoint", self.path("missing.hnk")]).basic_validate()
        self.assertTrue("can not be opened" in str(exc.exception), msg=str(exc.exception))

        with self.assertRaises(HnkExceptBadOptions):
            self.parse(["predict", "--checkpoint", self.write("model.hnk", "")]).basic_validate()

        with self.assertRaises(HnkExceptBadFile):
            self.parse(["synth", "--out", self.write("a_file", "")]).basic_validate()

        with self.assertRaises(HnkExceptBadFile):
            self.parse(["info", "--dump-config", "/invalidpath/invalidfile.toml"]).basic_validate()

    def test_threads(self):
        options = self.parse(["info"])
        with mock.patch.dict(os.environ, {threads_env: "3"}):
            options.basic_validate()
        self.assertEqual(3, options.threads)
        for bad in ("0", "two"):
            with mock.patch.dict(os.environ, {threads_env: bad}):
                with self.assertRaises(HnkExceptBadOptions):
                    options.basic_validate()

    def test_config(self):
        config = self.write("run.toml", f"""
out = "{self.path('from_config')}"

[train]
batch_size = 2
max_epochs = [5, 6, 7]

[eval]
conf_threshold = 0.2

[data.scene]
noise = 0.0
""")
        options = self.parse(["eval", "--config", config, "--checkpoint", self.write("model.hnk", ""),
                              "--conf", "0.3"])
        options.basic_validate()
        self.assertEqual(self.path("from_config"), options.out)
        self.assertEqual(2, options.run_config.train.batch_size)
        self.assertEqual([5, 6, 7], options.run_config.train.max_epochs)
        self.assertEqual(0.0, options.run_config.data.scene.noise)
        # flags win over the file
        self.assertEqual(0.3, options.run_config.eval.conf_threshold)

        options = self.parse(["train", "--config", config, "--out", self.path("from_flag")])
        options.basic_validate()
        self.assertEqual(self.path("from_flag"), options.out)
        self.assertEqual(0.2, options.run_config.eval.conf_threshold)

    def test_json_config(self):
        config = self.write("run.json", json.dumps({"train": {"batch_size": 4}, "data": {"val_count": 10}}))
        options = self.parse(["info", "--config", config])
        options.basic_validate()
        self.assertEqual(4, options.run_config.train.batch_size)
        self.assertEqual(10, options.run_config.data.val_count)

    def test_invalid_config(self):
        options = Options()
        options.config = self.path("missing.toml")
        with self.assertRaises(HnkExceptBadFile) as exc:
            options.import_config()
        self.assertTrue("can not be opened" in str(exc.exception), msg=str(exc.exception))

        options = Options()
        options.config = self.write("junk.toml", "doesnt_exist = true\n")
        with self.assertRaises(HnkExceptBadOptions) as exc:
            options.import_config()
        self.assertTrue("Unknown keys" in str(exc.exception), msg=str(exc.exception))

        options = Options()
        options.config = self.write("broken.toml", "[train\nbatch_size = 2\n")
        with self.assertRaises(HnkExceptBadOptions) as exc:
            options.import_config()
        self.assertTrue("does not contain valid TOML" in str(exc.exception), msg=str(exc.exception))

        options = Options()
        options.config = self.write("broken.json", "{\"train\": ")
        with self.assertRaises(HnkExceptBadOptions) as exc:
            options.import_config()
        self.assertTrue("does not contain valid JSON" in str(exc.exception), msg=str(exc.exception))

        options = Options()
        options.config = self.write("flat.toml", "train = 3\n")
        with self.assertRaises(HnkExceptBadOptions) as exc:
            options.import_config()
        self.assertTrue("must be a table" in str(exc.exception), msg=str(exc.exception))

        options = Options()
        options.config = self.write("out.toml", "out = 3\n")
        with self.assertRaises(HnkExceptBadOptions) as exc:
            options.import_config()
        self.assertTrue("is not a string" in str(exc.exception), msg=str(exc.exception))

    def test_invalid_sections(self):
        cases = {
            "[train]\nbatchsize = 2\n": "Unknown key",
            "[train]\nbatch_size = \"2\"\n": "must be an integer",
            "[train]\nbatch_size = 0\n": "batch_size",
            "[eval]\nconf_threshold = 1.5\n": "conf_threshold",
            "[model]\ninput_w = 256\n": "data.scene",
            "[data]\nclasses = [\"car\", \"bus\"]\n": "num_classes_det",
            "[anchors]\nlevels = [3, 5]\n": "contiguous",
        }
        for content, message in cases.items():
            options = self.parse(["info", "--config", self.write("bad.toml", content)])
            with self.assertRaises(HnkExceptBadConfig, msg=content) as exc:
                options.basic_validate()
            self.assertTrue(message in str(exc.exception), msg=str(exc.exception))

    def test_dump_config(self):
        dump = self.path("dump.toml")
        options = self.parse(["train", "--seed", "11", "--epochs", "4", "--dump-config", dump])
        options.basic_validate()
        options.export_config()

        with open(dump, "rb") as file:
            self.assertTrue(load(file))

        reread = self.parse(["train", "--config", dump])
        reread.basic_validate()
        self.assertEqual(options.run_config, reread.run_config)
        self.assertEqual(default_out, reread.out)
        self.assertEqual([4, 4, 4], reread.run_config.train.max_epochs)

    def test_debug_log(self):
        debug_log = self.path("debug.txt")
        options = self.parse(["info", "--debug-log", debug_log])
        with self.assertRaises(HnkExceptBadOptions):
            self.parse(["train", "--epochs", "-1"]).basic_validate()
        options.basic_validate()
        with open(debug_log) as file:
            self.assertTrue("--epochs must be at least 1" in file.read())


if __name__ == '__main__':
    unittest.main()
