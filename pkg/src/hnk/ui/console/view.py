from __future__ import annotations

from typing import TYPE_CHECKING, Optional, Sequence

if TYPE_CHECKING:
    from hnk.runtime_session import HnkSession
    from hnk.model import Detection
    from hnk.selftest import SuiteResult
    from hnk.trainer import StageReport

from rich.columns import Columns
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from hnk import __version__ as version


def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


class View:
    """
    Class handling the CLI output
    """

    # Static column lengths of the epoch rows
    epoch_row_widths: dict = {
        "epoch": 6,
        "stage": 6,
        "loss": 10,
        "lr": 9,
    }

    def __init__(self, console: Console, quiet: bool = False):
        self.console = console
        self.quiet = quiet

    @staticmethod
    def get_opt_value(opt_value):
        """Returns the opt value if it exists, and the string None if not."""
        if opt_value is not None and opt_value != "":
            return Text(f"{opt_value}", overflow="fold", style="green")
        else:
            return Text("None", overflow="fold", style="dim")

    def header(self, session: HnkSession):
        """
        Prints the hnk header with the startup options
        """
        if self.quiet:
            return
        self.console.rule(f"hnk {version} - multi-task perception toolkit")
        option_panels = []
        for option_tuple in session.options.get_all_opts():
            option_panels.append(Panel(self.get_opt_value(option_tuple[1]),
                                       expand=True, width=30, title=option_tuple[0]))
        self.console.print(Columns(option_panels, title="Startup options", expand=True, equal=True),
                           overflow="crop", no_wrap=False)

    def create_epoch_grid(self) -> Table:
        grid = Table.grid(pad_edge=True, padding=(0, 1), collapse_padding=False)
        grid.add_column("Epoch", min_width=self.epoch_row_widths["epoch"], justify="right", style="cyan")
        grid.add_column("Stage", min_width=self.epoch_row_widths["stage"], justify="right", style="magenta")
        for name in ("train det", "train seg", "train", "val det", "val seg", "val"):
            grid.add_column(name, min_width=self.epoch_row_widths["loss"], justify="right")
        grid.add_column("lr", min_width=self.epoch_row_widths["lr"], justify="right", style="yellow")
        return grid

    def epoch_header(self):
        if self.quiet:
            return
        grid = self.create_epoch_grid()
        grid.add_row("Epoch", "Stage", "train det", "train seg", "train", "val det", "val seg", "val", "lr",
                     style="bold")
        self.console.print(grid)

    def epoch_row(self, entry: dict):
        if self.quiet:
            return
        grid = self.create_epoch_grid()
        train, val = entry["train_losses"], entry["val_losses"]
        grid.add_row(str(entry["epoch"]), f"{entry['stage']}.{entry['stage_epoch']}",
                     _fmt(train["det"]), _fmt(train["seg"]), _fmt(train["total"]),
                     _fmt(val["det"]), _fmt(val["seg"]), _fmt(val["total"]), f"{entry['lr']:.1e}")
        self.console.print(grid)

    def stage_summary(self, stages: Sequence[StageReport]):
        table = Table(title="Stages")
        for column in ("Stage", "Trained groups", "Epochs", "Ended by"):
            table.add_column(column)
        for report in stages:
            table.add_row(str(report.stage), ", ".join(report.pivot), str(report.epochs),
                          "[green]threshold[/green]" if report.converged else "[yellow]epoch cap[/yellow]")
        self.console.print(table)

    def eval_report(self, report: dict):
        table = Table(title="Evaluation", show_header=False)
        table.add_column("metric", style="cyan")
        table.add_column("value", justify="right")
        table.add_row("mAP50", _fmt(report["map50"]))
        table.add_row("recall", _fmt(report["recall"]))
        for name, value in report["iou"].items():
            table.add_row(f"IoU {name}", _fmt(value))
        table.add_row("mIoU", _fmt(report["miou"]))
        table.add_row("pixel accuracy", _fmt(report["pixel_accuracy"]))
        table.add_row("lane accuracy", _fmt(report["lane_accuracy"]))
        table.add_row("images", str(report["counts"]["images"]))
        self.console.print(table)

    def info_table(self, layers: Sequence[dict], totals: dict):
        table = Table(title="Layers")
        for column, justify in (("name", "left"), ("kind", "left"), ("group", "left"), ("params", "right"),
                                ("MACs", "right")):
            table.add_column(column, justify=justify)
        for layer in layers:
            table.add_row(layer["name"], layer["kind"], layer["group"], f"{layer['params']:,}", f"{layer['macs']:,}")
        self.console.print(table)
        panel_lines = [f"{group}: {count:,} params" for group, count in totals["params_per_group"].items()]
        panel_lines.append(f"total: {totals['params']:,} params, {totals['flops']:,} FLOPs")
        self.console.print(Panel("\n".join(panel_lines), title="Totals", border_style="green", expand=False))

    def anchors_table(self, report: dict):
        table = Table(title="Fitted priors")
        for column in ("w", "h", "members"):
            table.add_column(column, justify="right")
        for cluster in report["clusters"]:
            table.add_row(_fmt(cluster["w"], 2), _fmt(cluster["h"], 2), str(cluster["members"]))
        self.console.print(table)
        lines = [f"mean best IoU fitted {report['mean_best_iou']['fitted']:.4f}, "
                 f"default {report['mean_best_iou']['default']:.4f}"]
        anchors = report["anchors"]
        if anchors is not None:
            lines.insert(0, f"scales: {[round(s, 4) for s in anchors['scales']]}\n"
                            f"ratios: {[[round(v, 4) for v in r] for r in anchors['ratios']]}")
            lines.append(f"mean best IoU derived {report['mean_best_iou']['derived']:.4f}")
        self.console.print(Panel("\n".join(lines), title="Derived [anchors] section", border_style="green",
                                 expand=False))
        for warning in report["warnings"]:
            self.console.print(f"[yellow]Warning:[/yellow] {warning}")

    def selftest_table(self, results: Sequence[SuiteResult]):
        table = Table(title="Selftest")
        for column, justify in (("suite", "left"), ("result", "left"), ("cases", "right"), ("metric", "left"),
                                ("value", "right"), ("limit", "right"), ("seconds", "right")):
            table.add_column(column, justify=justify)
        for result in results:
            status = "[green]passed[/green]" if result.passed else "[red]FAILED[/red]"
            table.add_row(result.name, status, str(result.cases), result.metric, f"{result.value:.3e}",
                          f"{result.limit:.0e}", f"{result.seconds:.1f}")
        self.console.print(table)

    def detections_table(self, detections: Sequence[Detection], classes: Sequence[str]):
        table = Table(title=f"{len(detections)} detections")
        for column in ("class", "score", "x1", "y1", "x2", "y2"):
            table.add_column(column, justify="right")
        for detection in detections:
            box = detection.box
            table.add_row(classes[box.label], _fmt(detection.score), _fmt(box.x1, 1), _fmt(box.y1, 1),
                          _fmt(box.x2, 1), _fmt(box.y2, 1))
        self.console.print(table)

    def message(self, text: str, style: Optional[str] = None):
        if not self.quiet:
            self.console.print(escape(text), style=style)

    def error(self, text: str):
        self.console.print(f" [b]ERROR[/b]: {escape(text)}", style="red", highlight=False)

    def footer(self, summary: str):
        """Function called when ending the runtime, prints a summary"""
        self.console.print("")
        self.console.rule(summary, style="green")
