"""Mini-batch SGD with the step-decay schedule, plus the train log.

Plain stochastic gradient descent, no momentum or weight decay. The
learning rate starts at 0.02 and divides by 10 at epoch 100 and every 50
epochs after that, floored at 1e-8. Shuffling is seeded per (seed, epoch)
so runs are bit-reproducible single-threaded.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .corpus import DatasetSplit, PlanInstance, intermediate_states
from .engine import NonFiniteError, Tape, backprop, finite_checks
from .losses import LossBreakdown, LossConfig, loss_total, state_regression_loss
from .model import Batch, Planner, StateSupervised, make_batch


class DivergenceError(Exception):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


@dataclass
class TrainConfig:
    epochs: int = 500
    base_lr: float = 0.02
    decay_factor: float = 0.1
    decay_start: int = 100
    decay_period: int = 50
    lr_floor: float = 1e-8
    batch_size: int = 64
    seed: int = 0
    aux_state_weight: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    l_n: float
    l_t: float
    l_total: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochStats] = field(default_factory=list)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "l_n", "l_t", "l_total", "lr", "seconds"])
            for e in self.epochs:
                writer.writerow([e.epoch, f"{e.l_n:.10g}", f"{e.l_t:.10g}",
                                 f"{e.l_total:.10g}", f"{e.lr:.10g}",
                                 f"{e.seconds:.4f}"])

    @property
    def final_loss(self) -> float:
        return self.epochs[-1].l_total if self.epochs else float("nan")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant rate with breakpoints at decay_start, +period, ..."""
    if config.base_lr == 0.0:
        return 0.0
    if epoch < config.decay_start:
        k = 0
    else:
        k = 1 + (epoch - config.decay_start) // config.decay_period
    return max(config.base_lr * config.decay_factor ** k, config.lr_floor)


def _batch_loss(model, batch: Batch, loss_config: LossConfig,
                aux_states: np.ndarray | None,
                aux_weight: float) -> LossBreakdown:
    if isinstance(model, StateSupervised) and aux_states is not None:
        output, pred_states = model.forward_with_states(batch)
        breakdown = loss_total(output, batch.actions, loss_config, decouple=False)
        aux = state_regression_loss(pred_states, aux_states)
        from .engine import add, scale  # local import keeps module deps flat
        return LossBreakdown(total=add(breakdown.total, scale(aux, aux_weight)),
                             chain=breakdown.chain, subchains=breakdown.subchains)
    output = model.forward(batch)
    decouple = isinstance(model, Planner) and model.config.decouple \
        and not isinstance(model, StateSupervised)
    return loss_total(output, batch.actions, loss_config, decouple=decouple)


def train(model, instances: list[PlanInstance] | DatasetSplit,
          train_config: TrainConfig, loss_config: LossConfig,
          state_lookup=None, on_epoch=None) -> TrainLog:
    """Optimize ``model`` in place; returns the per-epoch log.

    ``state_lookup`` maps video id to a PlanVideo (or is a video list) and
    is only consulted for the state-supervised variant. ``on_epoch`` is an
    optional callback(epoch, EpochStats) for progress reporting.
    """
    if isinstance(instances, DatasetSplit):
        instances = instances.train
    if not instances:
        raise ValueError("no training instances")
    params = model.parameters()
    log = TrainLog()
    n = len(instances)
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, train_config)
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        seen = 0
        for lo in range(0, n, train_config.batch_size):
            chunk = [instances[i] for i in order[lo:lo + train_config.batch_size]]
            batch = make_batch(chunk)
            aux = None
            if isinstance(model, StateSupervised) and state_lookup is not None:
                aux = np.stack([intermediate_states(state_lookup, inst)
                                for inst in chunk])
            try:
                # per-op finite checks are off in the hot loop; the scalar
                # loss below is validated every step instead
                with finite_checks(False), Tape() as tape:
                    breakdown = _batch_loss(model, batch, loss_config, aux,
                                            train_config.aux_state_weight)
                    for p in params:
                        p.zero_grad()
                    backprop(tape, breakdown.total, params)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, f"epoch {epoch}: {exc}") from exc
            l, l_n, l_t = breakdown.values()
            if not np.isfinite(l):
                raise DivergenceError(epoch)
            for p in params:
                p.step(lr)
            sums += np.array([l_n, l_t, l]) * len(chunk)
            seen += len(chunk)
        stats = EpochStats(epoch=epoch, l_n=sums[0] / seen, l_t=sums[1] / seen,
                           l_total=sums[2] / seen, lr=lr,
                           seconds=time.perf_counter() - t0)
        if not np.isfinite(stats.l_total):
            raise DivergenceError(epoch)
        log.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(epoch, stats)
    return log
