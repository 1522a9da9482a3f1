from __future__ import annotations

import argparse
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Optional

import rich.console

from hnk import __version__ as version

from tomlkit import document, dumps, comment, nl, TOMLDocument, load
from tomlkit.exceptions import ParseError

from .anchors import AnchorConfig
from .exception import HnkExceptBadConfig, HnkExceptBadOptions, HnkExceptBadFile
from .helpers.config_func import from_mapping, to_mapping
from .losses import LossWeights
from .metrics import EvalConfig
from .model import ModelConfig
from .scenes import DataConfig
from .trainer import DEFAULT_PIVOTS, TrainConfig

default_out = "hnk_out"
default_clusters = 9
threads_env = "HNK_THREADS"
config_sections = ("model", "anchors", "losses", "train", "data", "eval")
commands = ("synth", "anchors", "train", "eval", "predict", "info", "selftest")


@dataclass
class RunConfig:
    """Every section of a run. The model always uses the anchors section"""
    model: ModelConfig = field(default_factory=ModelConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.model.anchors = self.anchors

    def validate(self):
        self.model.anchors = self.anchors
        for section in config_sections:
            getattr(self, section).validate()
        scene = self.data.scene
        if not self.data.manifest and (scene.width, scene.height) != (self.model.input_w, self.model.input_h):
            raise HnkExceptBadConfig(f"data.scene renders {scene.width}x{scene.height} images, the model expects "
                                     f"{self.model.input_w}x{self.model.input_h}")
        if len(self.data.classes) != self.model.num_classes_det:
            raise HnkExceptBadConfig(f"data.classes names {len(self.data.classes)} classes, "
                                     f"model.num_classes_det is {self.model.num_classes_det}")

    @classmethod
    def from_mapping(cls, sections: dict) -> RunConfig:
        unknown = sorted(set(sections) - set(config_sections))
        if unknown:
            raise HnkExceptBadConfig(f"Unknown config section(s) {unknown}. Known: {list(config_sections)}")
        parsed = {}
        for section, config_cls in (("model", ModelConfig), ("anchors", AnchorConfig), ("losses", LossWeights),
                                    ("train", TrainConfig), ("data", DataConfig), ("eval", EvalConfig)):
            # the model only validates once its anchors are attached
            parsed[section] = from_mapping(config_cls, sections.get(section, {}), section, check=False)
        run_config = cls(**parsed)
        run_config.validate()
        return run_config

    def to_mapping(self) -> dict:
        return {section: to_mapping(getattr(self, section)) for section in config_sections}


def setup_debug_log(path: str):
    logger = logging.getLogger("debug_log")
    logger.propagate = False
    logger.setLevel(logging.DEBUG)
    formatter = logging.Formatter("%(asctime)s | %(levelname)s | %(message)s", datefmt="%d.%m.%Y %H:%M:%S")
    handler = logging.FileHandler(filename=path)
    handler.setLevel(logging.DEBUG)
    for old in logger.handlers:
        old.close()
    logger.handlers.clear()
    handler.setFormatter(formatter)
    logger.addHandler(handler)


class HnkArgumentParser(argparse.ArgumentParser):
    """Usage errors raise instead of exiting, so they map to the validation exit code"""

    def error(self, message):
        raise HnkExceptBadOptions(f"{message}\n{self.format_usage()}")


class Options:
    """
    Class responsible for handling user options
    """

    def __init__(self):
        # These option names will be centrally used as identifiers in the CLI and config files,
        # to avoid hard-coding strings for each use case
        self.command: Optional[str] = None
        self.opt_name_command: str = "command"

        self.action: Optional[str] = None
        self.opt_name_action: str = "action"

        self.config: Optional[str] = None
        self.opt_name_config: str = "config"

        self.out: Optional[str] = None
        self.opt_name_out: str = "out"

        self.seed: Optional[int] = None
        self.opt_name_seed: str = "seed"

        self.conf: Optional[float] = None
        self.opt_name_conf: str = "conf"

        self.nms: Optional[float] = None
        self.opt_name_nms: str = "nms"

        self.epochs: Optional[int] = None
        self.opt_name_epochs: str = "epochs"

        self.n: Optional[int] = None
        self.opt_name_n: str = "n"

        self.k: Optional[int] = None
        self.opt_name_k: str = "k"

        self.checkpoint: Optional[str] = None
        self.opt_name_checkpoint: str = "checkpoint"

        self.image: Optional[str] = None
        self.opt_name_image: str = "image"

        self.debug_log: Optional[str] = None
        self.opt_name_debug_log: str = "debug-log"

        self.dump_config: Optional[str] = None
        self.opt_name_dump_config: str = "dump-config"

        self.quiet: Optional[bool] = None
        self.opt_name_quiet: str = "quiet"

        self.colorless: Optional[bool] = None
        self.opt_name_colorless: str = "colorless"

        self.version: Optional[bool] = None
        self.opt_name_version: str = "version"

        # Not a flag, read from the HNK_THREADS environment variable
        self.threads: Optional[int] = None

        # Sections as read from the config file, before flag overrides
        self.config_sections: dict = {}
        self.run_config: Optional[RunConfig] = None

    def __str__(self):
        return str(vars(self))

    def read_args(self, parsed_args: argparse.Namespace, console: Optional[rich.console.Console] = None) -> None:
        """Merges the config file and the flags. Flags win over config file values"""

        if getattr(parsed_args, "config", None):
            self.config = parsed_args.config
            self.import_config()

        if parsed_args.command:
            self.command = parsed_args.command

        if getattr(parsed_args, "action", None):
            self.action = parsed_args.action

        if getattr(parsed_args, "out", None):
            self.out = parsed_args.out

        if getattr(parsed_args, "seed", None) is not None:
            self.seed = parsed_args.seed

        if getattr(parsed_args, "conf", None) is not None:
            self.conf = parsed_args.conf

        if getattr(parsed_args, "nms", None) is not None:
            self.nms = parsed_args.nms

        if getattr(parsed_args, "epochs", None) is not None:
            self.epochs = parsed_args.epochs

        if getattr(parsed_args, "n", None) is not None:
            self.n = parsed_args.n

        if getattr(parsed_args, "k", None) is not None:
            self.k = parsed_args.k

        if getattr(parsed_args, "checkpoint", None):
            self.checkpoint = parsed_args.checkpoint

        if getattr(parsed_args, "image", None):
            self.image = parsed_args.image

        if getattr(parsed_args, "dump_config", None):
            self.dump_config = parsed_args.dump_config

        if getattr(parsed_args, "quiet", None):
            self.quiet = parsed_args.quiet

        if getattr(parsed_args, "colorless", None):
            self.colorless = parsed_args.colorless
            if console is not None:
                console.no_color = True

        if getattr(parsed_args, "version", None):
            self.version = parsed_args.version

        if getattr(parsed_args, "debug_log", None):
            self.debug_log = parsed_args.debug_log
        if self.debug_log:
            setup_debug_log(self.debug_log)

    def get_all_opts(self) -> list[tuple]:
        """
        Returns all option parameters in a list of tuples,
        whereas tuple[0] is opt_name and tuple[1] is opt_value
        """
        return [
            (self.opt_name_command, " ".join(part for part in (self.command, self.action) if part)),
            (self.opt_name_config, self.config),
            (self.opt_name_out, self.out),
            (self.opt_name_seed, self.seed),
            (self.opt_name_conf, self.conf),
            (self.opt_name_nms, self.nms),
            (self.opt_name_epochs, self.epochs),
            (self.opt_name_n, self.n),
            (self.opt_name_k, self.k),
            (self.opt_name_checkpoint, self.checkpoint),
            (self.opt_name_image, self.image),
            (self.opt_name_debug_log, self.debug_log),
            ("threads", self.threads),
        ]

    def config_document(self) -> TOMLDocument:
        """The effective run configuration as a TOML document, one table per section"""
        doc = document()
        doc.add(comment(f"Run configuration written by hnk {version}."))
        doc.add(comment("Every key can be left out, the default is used then."))
        doc.add(nl())
        if self.out:
            doc.add(self.opt_name_out, self.out)
        for section, values in self.run_config.to_mapping().items():
            doc.add(section, values)
        return doc

    def export_config(self, path: Optional[str] = None):
        """
        Exports the effective configuration (config file + flags) into a TOML file that --config reads back.
        """
        path = path or self.dump_config
        try:
            with open(path, "w") as file:
                file.write(dumps(self.config_document()))
        except OSError:
            raise HnkExceptBadFile(f"Specified file path {path} could not be opened for exporting the config. "
                                   f"Please ensure it is a valid path and it is accessible.")

    def import_config(self) -> None:
        """
        Imports the config from the given option path. TOML by default, JSON for a .json suffix.

        Does strict type checking of supplied values and also errors if the user supplied unknown keys to ensure that
        user typos do not get silently ignored when users supply their config.
        """
        try:
            with open(self.config, "rb") as file:
                if self.config.endswith(".json"):
                    config_dict: dict = json.load(file)
                else:
                    toml_doc: TOMLDocument = load(file)
                    config_dict = toml_doc.unwrap()
        except OSError:
            raise HnkExceptBadFile(f"Config {self.config} can not be opened.")
        except ParseError as e:
            raise HnkExceptBadOptions(f"The config file {self.config} does not contain valid TOML. "
                                      f"Please check the syntax. Exception: {e}")
        except ValueError as e:
            raise HnkExceptBadOptions(f"The config file {self.config} does not contain valid JSON. Exception: {e}")
        if not isinstance(config_dict, dict):
            raise HnkExceptBadOptions(f"The config file {self.config} must hold a table at the top level")

        if self.opt_name_out in config_dict:
            self.out = self.pop_string(config_dict, self.opt_name_out)

        if self.opt_name_debug_log in config_dict:
            self.debug_log = self.pop_string(config_dict, self.opt_name_debug_log)

        for section in config_sections:
            if section in config_dict:
                self.config_sections[section] = self.pop_table(config_dict, section)

        # If any keys are left
        if config_dict:
            unknown_keys = []
            for key in config_dict:
                unknown_keys.append(key)
            raise HnkExceptBadOptions(f"Unknown keys {unknown_keys} were supplied in the config file. "
                                      f"Please check for typos.")

    @staticmethod
    def pop_table(config_dict: dict, key: str) -> dict:
        """
        Throws an exception if the value of the key is not a table. Pops value from dict if it is.
        """
        value = config_dict.pop(key)
        if not isinstance(value, dict):
            raise HnkExceptBadOptions(f"\"{key}\" in the config file must be a table, e.g. [{key}]")
        return value

    @staticmethod
    def pop_string(config_dict: dict, key: str) -> str:
        """
        Throws an exception if the value of the key is not a string. Pops value from dict if it is.
        """
        value = config_dict.pop(key)
        if not isinstance(value, str):
            raise HnkExceptBadOptions(f"\"{key}\" option's value in the config file is not a string")
        return value

    def _stage_count(self) -> int:
        pivots = self.config_sections.get("train", {}).get("pivots")
        return len(pivots) if isinstance(pivots, list) and pivots else len(DEFAULT_PIVOTS)

    def overridden_sections(self) -> dict[str, Any]:
        """Config file sections with the flags written over them"""
        sections = {name: dict(values) for name, values in self.config_sections.items()}

        def section(name: str) -> dict:
            return sections.setdefault(name, {})

        if self.seed is not None:
            section("train")["seed"] = self.seed
            data = section("data")
            data["scene"] = {**data.get("scene", {}), "seed": self.seed}
        if self.conf is not None:
            section("eval")["conf_threshold"] = self.conf
        if self.nms is not None:
            section("eval")["nms_threshold"] = self.nms
        if self.epochs is not None:
            section("train")["max_epochs"] = [self.epochs] * self._stage_count()
        return sections

    @staticmethod
    def read_threads() -> int:
        raw = os.environ.get(threads_env)
        if raw is None or raw.strip() == "":
            return 1
        try:
            threads = int(raw)
        except ValueError:
            raise HnkExceptBadOptions(f"{threads_env} must be a positive integer, got {raw!r}")
        if threads < 1:
            raise HnkExceptBadOptions(f"{threads_env} must be a positive integer, got {threads}")
        return threads

    def basic_validate(self) -> None:
        """
        Check initially set opts.

        Sets defaults where adequate, builds the run configuration and throws errors on faulty states.
        """
        if self.command is None:
            raise HnkExceptBadOptions(f"Choose a command: {', '.join(commands)}")

        if self.command == "anchors" and self.action != "fit":
            raise HnkExceptBadOptions("The anchors command needs an action: hnk anchors fit")

        if not self.out:
            self.out = default_out

        if self.k is None:
            self.k = default_clusters

        self.threads = self.read_threads()

        for name, value in ((self.opt_name_epochs, self.epochs), (self.opt_name_n, self.n),
                            (self.opt_name_k, self.k)):
            if value is not None and value < 1:
                raise HnkExceptBadOptions(f"--{name} must be at least 1, got {value}")

        if self.command in ("eval", "predict") and not self.checkpoint:
            raise HnkExceptBadOptions(f"The {self.command} command needs --{self.opt_name_checkpoint}")

        if self.command == "predict" and not self.image:
            raise HnkExceptBadOptions(f"The predict command needs --{self.opt_name_image}")

        for what, path in (("Checkpoint", self.checkpoint), ("Image", self.image)):
            if path and not os.path.isfile(path):
                raise HnkExceptBadFile(f"{what} {path} can not be opened. Please ensure it exists and the "
                                       f"permissions are correct.")

        if os.path.exists(self.out) and not os.path.isdir(self.out):
            raise HnkExceptBadFile(f"Output directory {self.out} exists and is not a directory.")

        if self.dump_config:
            try:
                open(self.dump_config, "a").close()
            except OSError:
                raise HnkExceptBadFile(f"Config export file can not be opened. Please ensure it is a valid path"
                                       f"and the permissions to the path are correct.")

        self.run_config = RunConfig.from_mapping(self.overridden_sections())

    def configure_parser(self) -> argparse.ArgumentParser:
        """
        argparse setup.
        Default values should not be set here. The session reads from a config file, and overwrites the file options
        if the command line has a conflicting flag. If argparse specifies defaults here, the file options will always be
        overwritten, even if the user does not intend to do so.
        """
        parser = HnkArgumentParser(prog="hnk",
                                   description="Multi-task perception toolkit: vehicle detection, drivable area and "
                                               "lane segmentation on a shared encoder.",
                                   epilog=f"Threads: set {threads_env} to run samples of a batch in parallel.")
        parser.add_argument("-V", f"--{self.opt_name_version}", action="store_true", help="Print version and exit.")

        common = argparse.ArgumentParser(add_help=False)
        io_group = common.add_argument_group("Input/Output options")
        io_group.add_argument("-K", f"--{self.opt_name_config}",
                              help="Read the run configuration (TOML, or JSON with a .json suffix).")
        io_group.add_argument("-o", f"--{self.opt_name_out}",
                              help=f"Directory for every artifact of the run. (default: {default_out})")
        io_group.add_argument("-l", f"--{self.opt_name_debug_log}",
                              help="Store runtime information in the specified file.")
        io_group.add_argument(f"--{self.opt_name_dump_config}",
                              help="Write the effective configuration to a TOML file and exit.")
        io_group.add_argument(f"--{self.opt_name_seed}", type=int,
                              help="Seed for scene generation, initialisation and shuffling.")
        terminal_group = common.add_argument_group("Terminal options")
        terminal_group.add_argument("-c", f"--{self.opt_name_colorless}", action="store_true",
                                    help="Disable colors in CLI output.")
        terminal_group.add_argument("-q", f"--{self.opt_name_quiet}", action="store_true",
                                    help="Disable progress messages in CLI output.")

        subparsers = parser.add_subparsers(dest=self.opt_name_command, metavar=self.opt_name_command)

        synth = subparsers.add_parser("synth", parents=[common], help="Generate a synthetic dataset.")
        synth.add_argument(f"--{self.opt_name_n}", type=int,
                           help="Number of scenes. (default: data.train_count + data.val_count)")

        anchors = subparsers.add_parser("anchors", parents=[common], help="Fit anchor priors to the training boxes.")
        anchors.add_argument(self.opt_name_action, choices=["fit"], help="fit: k-means over box sizes.")
        anchors.add_argument(f"--{self.opt_name_k}", type=int,
                             help=f"Number of clusters. (default: {default_clusters})")

        train = subparsers.add_parser("train", parents=[common], help="Run the staged training schedule.")
        train.add_argument(f"--{self.opt_name_epochs}", type=int, help="Cap every stage at this many epochs.")

        evaluate = subparsers.add_parser("eval", parents=[common], help="Evaluate a checkpoint on the validation split.")
        predict = subparsers.add_parser("predict", parents=[common], help="Detect and segment one PPM image.")
        for sub in (evaluate, predict):
            sub.add_argument(f"--{self.opt_name_checkpoint}", help="Trained model (.hnk).")
            sub.add_argument(f"--{self.opt_name_conf}", type=float,
                             help="Confidence threshold. (default: 0.001)")
            sub.add_argument(f"--{self.opt_name_nms}", type=float, help="NMS IoU threshold. (default: 0.6)")
        predict.add_argument(f"--{self.opt_name_image}", help="Binary PPM (P6) image of the model's input size.")

        subparsers.add_parser("info", parents=[common], help="Print parameter and FLOP counts of the model.")
        subparsers.add_parser("selftest", parents=[common], help="Run the gradient and oracle suites.")

        return parser
