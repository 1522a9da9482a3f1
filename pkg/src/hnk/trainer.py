"""
AdamW, the plateau learning-rate schedule and staged training with parameter freezing.

Each stage trains only the parameter groups of its pivot set. The detection loss term is active iff the
pivot holds "det", the segmentation term iff it holds "seg", so the default pivots train detection only,
then segmentation only, then everything jointly.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .anchors import AnchorGrid
from .assign import assign
from .checkpoint import save_checkpoint
from .exception import HnkExceptBadConfig, HnkExceptNonFinite, HnkExceptShapeMismatch
from .helpers.file_func import output_path
from .losses import LossWeights, detection_loss, one_hot, seg_loss, total_loss
from .model import GROUPS, ModelParams, anchor_grid, forward
from .scenes import Sample, flip_sample
from .tensor import Tape, Tensor, backward

DEFAULT_PIVOTS = [["enc", "det"], ["seg"], ["enc", "det", "seg"]]

logger = logging.getLogger("debug_log")


@dataclass
class TrainConfig:
    seed: int = 7
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    pivots: list[list[str]] = field(default_factory=lambda: [list(p) for p in DEFAULT_PIVOTS])
    # a stage ends once its epoch-mean validation loss drops below the threshold
    thresholds: list[float] = field(default_factory=lambda: [0.05, 0.10, 0.12])
    max_epochs: list[int] = field(default_factory=lambda: [60, 60, 60])
    patience: int = 3
    min_delta: float = 1e-4
    lr_factor: float = 0.1
    min_lr: float = 1e-7
    augment_flip: bool = True

    def validate(self):
        if self.batch_size < 1:
            raise HnkExceptBadConfig(f"train.batch_size must be at least 1, got {self.batch_size}")
        if self.lr <= 0 or self.min_lr <= 0 or self.min_lr > self.lr:
            raise HnkExceptBadConfig(f"train.lr ({self.lr}) and train.min_lr ({self.min_lr}) must satisfy "
                                     f"0 < min_lr <= lr")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise HnkExceptBadConfig("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise HnkExceptBadConfig("train.eps must be positive and train.weight_decay not negative")
        if self.patience < 1 or self.min_delta < 0 or not 0.0 < self.lr_factor < 1.0:
            raise HnkExceptBadConfig("train.patience >= 1, train.min_delta >= 0 and 0 < train.lr_factor < 1 needed")
        self.schedule().validate()

    def schedule(self) -> StageSchedule:
        return StageSchedule([frozenset(p) for p in self.pivots], list(self.thresholds), list(self.max_epochs))


@dataclass
class StageSchedule:
    pivots: list[frozenset]
    thresholds: list[float]
    max_epochs: list[int]

    def __len__(self):
        return len(self.pivots)

    def validate(self):
        if not self.pivots:
            raise HnkExceptBadConfig("The stage schedule needs at least one stage")
        if not len(self.pivots) == len(self.thresholds) == len(self.max_epochs):
            raise HnkExceptBadConfig(f"pivots, thresholds and max_epochs differ in length: {len(self.pivots)}, "
                                     f"{len(self.thresholds)}, {len(self.max_epochs)}")
        for index, pivot in enumerate(self.pivots):
            if not pivot or not pivot <= set(GROUPS):
                raise HnkExceptBadConfig(f"Stage {index + 1} pivot {sorted(pivot)} must be a non-empty subset of "
                                         f"{list(GROUPS)}")
            if not pivot & {"det", "seg"}:
                raise HnkExceptBadConfig(f"Stage {index + 1} pivot {sorted(pivot)} trains no head, so no loss "
                                         f"term would be active")
        if self.pivots[-1] != frozenset(GROUPS):
            raise HnkExceptBadConfig(f"The last stage must train every group, got {sorted(self.pivots[-1])}")
        if any(epochs < 1 for epochs in self.max_epochs):
            raise HnkExceptBadConfig(f"max_epochs entries must be at least 1, got {self.max_epochs}")

    def heads(self, stage: int) -> tuple[str, ...]:
        pivot = self.pivots[stage]
        return tuple(head for head in ("det", "seg") if head in pivot)


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    # calls of optim_step
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # updates applied per parameter, drives the bias correction
    updates: dict[str, int] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, cfg: TrainConfig) -> OptimState:
        state = cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        for name in params.names():
            state.m[name] = np.zeros_like(params[name].data)
            state.v[name] = np.zeros_like(params[name].data)
            state.updates[name] = 0
        return state


def optim_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimState,
               trainable: Sequence[str]) -> OptimState:
    """One decoupled-weight-decay Adam update of the trainable groups, in place"""
    names = params.names(trainable)
    for name in names:
        if name not in grads:
            raise HnkExceptShapeMismatch(f"optim_step: no gradient for trainable parameter {name}")
        if grads[name].shape != params[name].shape:
            raise HnkExceptShapeMismatch(f"optim_step: gradient of {name} has shape {grads[name].shape}, "
                                         f"parameter has {params[name].shape}")
    state.step += 1
    for name in names:
        g = grads[name]
        w = params[name].data
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.updates[name] += 1
        t = state.updates[name]
        m_hat = state.m[name] / (1.0 - state.beta1 ** t)
        v_hat = state.v[name] / (1.0 - state.beta2 ** t)
        params[name].data = w - state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * w)
    return state


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    stagnant: int = 0
    # history entries already consumed
    seen: int = 0


def plateau_schedule(history: Sequence[float], state: PlateauState, patience: int = 3, min_delta: float = 1e-4,
                     factor: float = 0.1, min_lr: float = 1e-7) -> float:
    """
    Consumes the new history entries. An entry improves iff it is below best - min_delta; after `patience`
    stagnant entries in a row the learning rate is multiplied by factor, never going below min_lr.
    """
    for value in history[state.seen:]:
        if value < state.best - min_delta:
            state.best = value
            state.stagnant = 0
        else:
            state.stagnant += 1
            if state.stagnant >= patience:
                state.lr = max(state.lr * factor, min_lr)
                state.stagnant = 0
    state.seen = len(history)
    return state.lr


class SampleLoss(NamedTuple):
    det: Optional[float]
    seg: Optional[float]
    total: float
    grads: dict[str, np.ndarray]


class StageReport(NamedTuple):
    stage: int
    pivot: list[str]
    epochs: int
    converged: bool
    # group -> parameter checksum before and after the stage
    checksums_before: dict[str, str]
    checksums_after: dict[str, str]


class TrainResult(NamedTuple):
    params: ModelParams
    epochs: list[dict]
    stages: list[StageReport]


class StagedTrainer:
    def __init__(self, params: ModelParams, cfg: TrainConfig, weights: LossWeights, threads: int = 1,
                 out_dir: Optional[str] = None, on_epoch: Optional[Callable[[dict], None]] = None):
        self.params = params
        self.cfg = cfg
        self.weights = weights
        self.schedule = cfg.schedule()
        self.threads = max(1, threads)
        self.out_dir = out_dir
        self.on_epoch = on_epoch
        self.grid: AnchorGrid = anchor_grid(params.config)
        self.state = OptimState.for_params(params, cfg)
        self.logger = logging.getLogger("debug_log")

    def sample_loss(self, sample: Sample, heads: tuple[str, ...], trainable: Sequence[str],
                    with_grads: bool = True) -> SampleLoss:
        # grad mode and the tape stack are per thread
        with Tape() as tape, nullcontext() if with_grads else T.no_grad():
            output = forward(self.params, Tensor(sample.image), heads)
            det_term = seg_term = None
            if "det" in heads:
                det_term, _ = detection_loss(output.det_raw, assign(self.grid, sample.boxes), sample.boxes,
                                             self.grid, self.weights)
            if "seg" in heads:
                seg_term = seg_loss(T.softmax_channel(output.seg_logits), one_hot(sample.seg_mask), self.weights)
            total = total_loss(det_term, seg_term, self.weights)
        grads = {}
        if with_grads:
            names = self.params.names(trainable)
            grads = backward(total, {name: self.params[name] for name in names}, tape)
            grads = {name: grads[name] for name in names}
        return SampleLoss(None if det_term is None else det_term.item(),
                          None if seg_term is None else seg_term.item(), total.item(), grads)

    def _map(self, function, items):
        if self.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as executor:
                return list(executor.map(function, items))
        return [function(item) for item in items]

    def _batch(self, samples: list[Sample], heads, trainable, batch_index: int) -> list[SampleLoss]:
        try:
            return self._map(lambda sample: self.sample_loss(sample, heads, trainable), samples)
        except HnkExceptNonFinite as e:
            raise HnkExceptNonFinite(f"Non-finite value in batch {batch_index}: {e}", batch_index=batch_index)

    def validate_epoch(self, samples: Sequence[Sample], heads) -> dict:
        losses = self._map(lambda sample: self.sample_loss(sample, heads, (), with_grads=False), list(samples))
        return _mean_losses(losses)

    def train_epoch(self, samples: Sequence[Sample], stage: int, epoch: int, first_batch: int) -> tuple[dict, int]:
        heads = self.schedule.heads(stage)
        trainable = sorted(self.schedule.pivots[stage])
        rng = np.random.default_rng([self.cfg.seed, stage, epoch])
        order = rng.permutation(len(samples))
        flips = rng.uniform(size=len(samples)) < 0.5 if self.cfg.augment_flip else np.zeros(len(samples), bool)
        losses: list[SampleLoss] = []
        batch_index = first_batch
        for start in range(0, len(order), self.cfg.batch_size):
            chosen = order[start:start + self.cfg.batch_size]
            batch = [flip_sample(samples[i]) if flips[i] else samples[i] for i in chosen]
            results = self._batch(batch, heads, trainable, batch_index)
            # summed in sample order whatever the thread count
            grads = {name: sum(r.grads[name] for r in results) / len(results) for name in results[0].grads}
            optim_step(self.params, grads, self.state, trainable)
            losses.extend(results)
            batch_index += 1
        return _mean_losses(losses), batch_index

    def run(self, train: Sequence[Sample], val: Sequence[Sample]) -> TrainResult:
        log: list[dict] = []
        reports: list[StageReport] = []
        batch_index = 0
        for stage in range(len(self.schedule)):
            pivot = sorted(self.schedule.pivots[stage])
            heads = self.schedule.heads(stage)
            self.params.set_trainable(pivot)
            before = {group: self.params.checksum([group]) for group in GROUPS}
            self.state.lr = self.cfg.lr
            plateau = PlateauState(self.cfg.lr)
            history: list[float] = []
            converged = False
            self.logger.info(f"Stage {stage + 1}: training {pivot}, loss terms {list(heads)}")
            epochs_run = 0
            for epoch in range(self.schedule.max_epochs[stage]):
                lr = self.state.lr
                train_losses, batch_index = self.train_epoch(train, stage, epoch, batch_index)
                val_losses = self.validate_epoch(val, heads)
                history.append(val_losses["total"])
                self.state.lr = plateau_schedule(history, plateau, self.cfg.patience, self.cfg.min_delta,
                                                 self.cfg.lr_factor, self.cfg.min_lr)
                entry = {"epoch": len(log) + 1, "stage": stage + 1, "stage_epoch": epoch + 1,
                         "train_losses": train_losses, "val_losses": val_losses, "lr": lr}
                log.append(entry)
                epochs_run += 1
                self.logger.info(f"Stage {stage + 1} epoch {epoch + 1}: train {train_losses['total']:.6f} "
                                 f"val {val_losses['total']:.6f} lr {lr:.2e}")
                if self.on_epoch is not None:
                    self.on_epoch(entry)
                if val_losses["total"] < self.schedule.thresholds[stage]:
                    converged = True
                    break
            after = {group: self.params.checksum([group]) for group in GROUPS}
            reports.append(StageReport(stage + 1, pivot, epochs_run, converged, before, after))
            self.logger.info(f"Stage {stage + 1} finished after {epochs_run} epochs, "
                             f"{'converged' if converged else 'epoch cap reached'}")
            if self.out_dir is not None:
                save_checkpoint(self.params, output_path(self.out_dir, f"stage{stage + 1}.hnk"))
        self.params.set_trainable(GROUPS)
        return TrainResult(self.params, log, reports)


def _mean_losses(losses: Sequence[SampleLoss]) -> dict:
    def mean(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    return {"det": mean(l.det for l in losses), "seg": mean(l.seg for l in losses),
            "total": mean(l.total for l in losses)}


def staged_train(params: ModelParams, train: Sequence[Sample], val: Sequence[Sample], cfg: TrainConfig,
                 weights: LossWeights, threads: int = 1, out_dir: Optional[str] = None,
                 on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    if not train or not val:
        raise HnkExceptBadConfig(f"Training needs train and validation samples, got {len(train)} and {len(val)}")
    return StagedTrainer(params, cfg, weights, threads, out_dir, on_epoch).run(list(train), list(val))
