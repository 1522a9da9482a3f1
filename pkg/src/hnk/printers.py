from __future__ import annotations

import datetime
import json
from abc import abstractmethod, ABC

import pytz

from . import __version__ as version
from .exception import HnkExceptBadFile, HnkExceptInternalError


def utc_timestamp() -> str:
    return datetime.datetime.now(pytz.utc).isoformat(timespec="seconds")


class BasePrinter(ABC):
    """
    Base class from which all printers should inherit.

    Results are collected with update_results and only written by print_to_file, which rewrites the whole file.
    The output therefore stays a valid JSON document during a run, not only after the footer.
    """
    def __init__(self, output: str):
        self.output = output
        try:
            self.outputfile_handle = open(output, "w")
        except OSError as e:
            raise HnkExceptBadFile(f"Output file {output} can not be opened: {e}")

    @abstractmethod
    def header(self, metadata: dict):
        """
        Called once before the first result
        """
        raise HnkExceptInternalError("Method header not implemented")

    @abstractmethod
    def footer(self, summary: dict):
        """
        Called once when the run is done. A failed run only closes the printer, the file keeps the last
        document written by print_to_file
        """
        raise HnkExceptInternalError("Method footer not implemented")

    @abstractmethod
    def update_results(self, result: dict):
        """
        Update the collected results. This does not print to file yet
        """
        raise HnkExceptInternalError("Method update_results not implemented")

    @abstractmethod
    def document(self) -> dict:
        """
        The JSON document as it currently stands
        """
        raise HnkExceptInternalError("Method document not implemented")

    def dumps(self) -> str:
        return json.dumps(self.document(), indent=1, sort_keys=True) + "\n"

    def print_to_file(self) -> None:
        """
        Overwrite output file contents with data
        """
        self.outputfile_handle.seek(0)
        self.outputfile_handle.write(self.dumps())
        self.outputfile_handle.truncate()
        self.outputfile_handle.flush()

    def close(self):
        if not self.outputfile_handle.closed:
            self.outputfile_handle.close()


class TrainLogPrinter(BasePrinter):
    """
    The training log. Wall-clock timestamps only ever go into metadata, so the epochs list of two
    identical runs is byte-identical.
    """

    def __init__(self, output: str):
        super().__init__(output)
        self.metadata: dict = {}
        self.epochs: list[dict] = []

    def header(self, metadata: dict):
        self.metadata = {"hnk_version": version, "started": utc_timestamp(), **metadata}
        self.print_to_file()

    def update_results(self, result: dict):
        self.epochs.append(result)
        self.print_to_file()

    def footer(self, summary: dict):
        self.metadata["finished"] = utc_timestamp()
        self.metadata.update(summary)
        self.print_to_file()
        self.close()

    def document(self) -> dict:
        return {"metadata": self.metadata, "epochs": self.epochs}


class ReportPrinter(BasePrinter):
    """One JSON report (eval, info, anchors, predict, selftest). No timestamps, keys sorted"""

    def __init__(self, output: str):
        super().__init__(output)
        self.report: dict = {}

    def header(self, metadata: dict):
        self.report.update(metadata)

    def update_results(self, result: dict):
        self.report.update(result)

    def footer(self, summary: dict):
        self.report.update(summary)
        self.print_to_file()
        self.close()

    def document(self) -> dict:
        return self.report
