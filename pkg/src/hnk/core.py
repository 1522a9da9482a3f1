from __future__ import annotations

import logging
import math
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from hnk.runtime_session import HnkSession
import numpy as np

from .anchors import derive_scales_ratios, kmeans_fit, mean_best_iou, prior_sizes
from .checkpoint import save_checkpoint
from .exception import HnkExceptBadConfig, HnkExceptBadOptions
from .helpers.config_func import to_mapping
from .metrics import SEG_CLASS_NAMES, evaluate_model
from .model import GROUPS, count_params_flops, layer_costs, predict
from .printers import ReportPrinter, TrainLogPrinter
from .scenes import read_ppm, save_dataset, write_pgm
from .selftest import check_results, run_selftest
from .tensor import Tensor
from .trainer import staged_train
from .ui.console.view import View


def _json_float(value):
    return None if value is None or not math.isfinite(value) else value


class Runner:
    """
    Executes the subcommand the session was compiled for. Every artifact goes into the session's output directory.
    """

    def __init__(self, session: HnkSession, view: View):
        self.session: HnkSession = session
        self.view = view
        self.logger = logging.getLogger("debug_log")
        self.commands = {
            "synth": self.synth,
            "anchors": self.fit_anchors,
            "train": self.train,
            "eval": self.evaluate,
            "predict": self.predict,
            "info": self.info,
            "selftest": self.selftest,
        }

    @property
    def run_config(self):
        return self.session.run_config

    def run(self) -> str:
        """Runs the command. Returns a one-line summary for the footer"""
        command = self.session.options.command
        if command not in self.commands:
            raise HnkExceptBadOptions(f"Unknown command {command}")
        self.logger.info(f"Running {command}")
        return self.commands[command]()

    def synth(self) -> str:
        samples = self.session.scenes()
        manifest = save_dataset(samples, self.session.options.out, self.run_config.data.classes)
        failures = sum(sample.placement_failures for sample in samples)
        if failures:
            self.logger.warning(f"{failures} vehicles could not be placed without overlap")
        return f"{len(samples)} scenes written, manifest {manifest}"

    def fit_anchors(self) -> str:
        train, _ = self.session.splits()
        sizes = np.array([[box.w, box.h] for sample in train for box in sample.boxes], dtype=np.float64)
        k = self.session.options.k
        if sizes.shape[0] < k:
            raise HnkExceptBadConfig(f"Fitting {k} clusters needs at least {k} boxes, the training split has "
                                     f"{sizes.shape[0]}")
        clusters = kmeans_fit(sizes, k, self.run_config.train.seed)
        current = self.run_config.anchors
        default_priors = np.concatenate([prior_sizes(current, level) for level in current.levels])
        report = {
            "boxes": int(sizes.shape[0]),
            "clusters": [{"w": c.w, "h": c.h, "members": c.member_count} for c in clusters],
            "mean_best_iou": {"fitted": mean_best_iou(sizes, [[c.w, c.h] for c in clusters]),
                              "default": mean_best_iou(sizes, default_priors)},
            "anchors": None,
            "warnings": [],
        }
        if k == 9:
            derived = derive_scales_ratios(clusters, current.levels, current.base_scale_constant)
            derived_priors = np.concatenate([prior_sizes(derived, level) for level in derived.levels])
            report["anchors"] = to_mapping(derived)
            report["mean_best_iou"]["derived"] = mean_best_iou(sizes, derived_priors)
            report["warnings"] = list(derived.warnings)
        else:
            report["warnings"].append(f"scales and ratios are only derived from 9 clusters, got {k}")
        for warning in report["warnings"]:
            self.logger.warning(warning)

        printer = self.session.add_printer(ReportPrinter(self.session.output("anchors.json")))
        printer.footer(report)
        self.view.anchors_table(report)
        return f"{k} clusters fitted to {report['boxes']} boxes"

    def train(self) -> str:
        config = self.run_config
        train, val = self.session.splits()
        params = self.session.fresh_model()
        self.session.options.export_config(self.session.output("run_config.toml"))

        printer = self.session.add_printer(TrainLogPrinter(self.session.output("train_log.json")))
        printer.header({"seed": config.train.seed, "threads": self.session.options.threads,
                        "train_samples": len(train), "val_samples": len(val),
                        "params": params.num_params()})
        self.view.epoch_header()

        def on_epoch(entry: dict):
            printer.update_results(entry)
            self.view.epoch_row(entry)

        result = staged_train(params, train, val, config.train, config.losses, self.session.options.threads,
                              self.session.options.out, on_epoch)
        final = self.session.output("model.hnk")
        save_checkpoint(result.params, final)
        printer.footer({"stages": [report._asdict() for report in result.stages],
                        "checksums": {group: result.params.checksum([group]) for group in GROUPS}})
        self.view.stage_summary(result.stages)
        return f"{len(result.epochs)} epochs trained, model written to {final}"

    def evaluate(self) -> str:
        params = self.session.trained_model()
        _, val = self.session.splits()
        eval_cfg = self.run_config.eval
        report = evaluate_model(params, val, eval_cfg, self.session.options.threads)
        printer = self.session.add_printer(ReportPrinter(self.session.output("eval.json")))
        printer.header({"checkpoint": self.session.options.checkpoint, "conf_threshold": eval_cfg.conf_threshold,
                        "nms_threshold": eval_cfg.nms_threshold, "iou_threshold": eval_cfg.iou_threshold})
        printer.footer(report)
        self.view.eval_report(report)
        return f"{len(val)} validation images evaluated"

    def predict(self) -> str:
        params = self.session.trained_model()
        model = self.run_config.model
        image = read_ppm(self.session.options.image)
        if image.shape[1:] != (model.input_h, model.input_w):
            raise HnkExceptBadConfig(f"Image {self.session.options.image} is {image.shape[2]}x{image.shape[1]}, "
                                     f"the model expects {model.input_w}x{model.input_h}")
        eval_cfg = self.run_config.eval
        detections, mask = predict(params, Tensor(image), eval_cfg.conf_threshold, eval_cfg.nms_threshold,
                                   eval_cfg.max_detections)
        mask_path = self.session.output("prediction_mask.pgm")
        write_pgm(mask_path, mask)
        classes = self.run_config.data.classes
        printer = self.session.add_printer(ReportPrinter(self.session.output("predictions.json")))
        printer.header({"image": self.session.options.image, "mask": "prediction_mask.pgm"})
        printer.footer({"detections": [{"x1": d.box.x1, "y1": d.box.y1, "x2": d.box.x2, "y2": d.box.y2,
                                        "category": classes[d.box.label], "score": d.score}
                                       for d in detections],
                        "mask_pixels": {name: int(np.sum(mask == index))
                                        for index, name in enumerate(SEG_CLASS_NAMES)}})
        self.view.detections_table(detections, classes)
        return f"{len(detections)} detections, mask written to {mask_path}"

    def info(self) -> str:
        model = self.run_config.model
        layers = layer_costs(model)
        params, flops = count_params_flops(model)
        per_group = {group: sum(layer["params"] for layer in layers if layer["group"] == group) for group in GROUPS}
        totals = {"params": params, "flops": flops, "params_per_group": per_group}
        printer = self.session.add_printer(ReportPrinter(self.session.output("info.json")))
        printer.footer({"input": [model.input_w, model.input_h], "layers": layers, **totals})
        self.view.info_table(layers, totals)
        return f"{params:,} parameters, {flops:,} FLOPs"

    def selftest(self) -> str:
        seed = self.session.options.seed
        results = run_selftest() if seed is None else run_selftest(seed=seed)
        printer = self.session.add_printer(ReportPrinter(self.session.output("selftest.json")))
        printer.footer({"passed": all(result.passed for result in results),
                        "suites": [{**result._asdict(), "value": _json_float(result.value),
                                    "limit": _json_float(result.limit)} for result in results]})
        self.view.selftest_table(results)
        check_results(results)
        return f"{len(results)} selftest suites passed"
