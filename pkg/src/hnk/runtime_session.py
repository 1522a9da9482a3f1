import logging
from typing import Optional

from rich.console import Console

from .factories.datafactory import dataset_factory
from .factories.modelfactory import model_factory
from .helpers.file_func import create_dir, output_path
from .model import ModelParams
from .printers import BasePrinter
from .scenes import Sample
from .user_opts import Options, RunConfig


class HnkSession:
    """Class designed to carry runtime information relevant for conditional decisions"""
    def __init__(self, options: Options, console: Console):
        self.options: Options = options
        self.logger = logging.getLogger("debug_log")
        self.console = console

        self.run_config: Optional[RunConfig] = None
        self.compiled_printer_list: list[BasePrinter] = []

    def compile(self):
        """
        Validates the options and prepares the output directory before actually running
        """
        self.options.basic_validate()
        self.run_config = self.options.run_config
        # --dump-config only writes the file, main returns right after
        if not self.options.dump_config:
            create_dir(self.options.out)
        return self

    def output(self, name: str) -> str:
        return output_path(self.options.out, name)

    def add_printer(self, printer: BasePrinter) -> BasePrinter:
        self.compiled_printer_list.append(printer)
        return printer

    def splits(self) -> tuple[list[Sample], list[Sample]]:
        return dataset_factory.create("splits_from_config", self)

    def scenes(self) -> list[Sample]:
        return dataset_factory.create("scenes_from_options", self)

    def fresh_model(self) -> ModelParams:
        return model_factory.create("model_from_config", self)

    def trained_model(self) -> ModelParams:
        return model_factory.create("model_from_checkpoint", self)

    def close(self):
        """
        Actions to execute before shutting down the runtime.
        """
        for printer in self.compiled_printer_list:
            printer.close()
