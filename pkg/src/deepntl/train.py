"""Optimiser, learning-rate schedule and the epoch loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import DatasetManifest, Example
from .errors import DataError, TrainingError
from .model import ModelConfig, Params, copy_params, forward, init_params, to_model_units, \
    trainable

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.95
    patience: int = 3
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr0 > 0:
            raise DataError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay < 1:
            raise DataError(f"decay must be in (0, 1), got {self.decay}")
        if self.patience < 1:
            raise DataError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.epochs < 0:
            raise DataError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: Params, state: AdamState, lr: float, cfg: TrainConfig = TrainConfig()):
    """One bias-corrected Adam update of every trainable parameter, in place."""
    train = trainable(params)
    missing = [k for k, t in train.items() if t.grad is None]
    if missing:
        raise DataError(f"no gradient for {len(missing)} parameters, e.g. {missing[0]!r}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, t in train.items():
        g = t.grad.astype(t.dtype, copy=False)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(t.data)
            state.v[k] = np.zeros_like(t.data)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        t.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(t.dtype)
    return params, state


def plateau_schedule(history: Sequence[float], lr: float, cfg: TrainConfig = TrainConfig()) -> float:
    """Learning rate to use after the last epoch in ``history``.

    An epoch improves if its loss is below the best so far.  After
    ``patience`` consecutive epochs without improvement the rate is
    multiplied by ``decay`` and the count starts again.
    """
    if not history:
        raise DataError("plateau_schedule needs at least one validation loss")
    best = math.inf
    stale = 0
    decayed = False
    for loss in history:
        decayed = False
        if loss < best:
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                decayed = True
                stale = 0
    return lr * cfg.decay if decayed else lr


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    params: Params          # parameters at the best validation epoch
    last_params: Params
    log: list[EpochRecord]
    best_epoch: int

    def __iter__(self):
        return iter((self.params, self.log))


def batch_arrays(examples: Sequence[Example]):
    """Stack raw tiles: ``(dmsp_ref, dmsp_tgt, viirs_ref, viirs_tgt)`` arrays."""
    return tuple(np.stack([getattr(e, name).data for e in examples])
                 for name in ("dmsp_ref", "dmsp_tgt", "viirs_ref", "viirs_tgt"))


def target_scale(examples: Sequence[Example]) -> float:
    """Population std of the VIIRS target tiles, used as ``viirs_scale``.

    The network ends in a batch-norm layer whose output starts with unit
    spread, so targets with unit spread need no long drift of the final
    gain at small learning rates.
    """
    if not examples:
        raise DataError("no examples to derive a scale from")
    vt = np.stack([e.viirs_tgt.data for e in examples]).astype(np.float64)
    s = float(vt.std())
    if not s > 0:
        raise DataError("VIIRS targets are constant; cannot derive a scale")
    return s


def with_target_scale(model_cfg: ModelConfig, examples: Sequence[Example]) -> ModelConfig:
    return replace(model_cfg, viirs_scale=target_scale(examples))


def _tensors(examples, cfg: ModelConfig):
    dr, dt, vr, vt = batch_arrays(examples)
    x = to_model_units(dr, dt, vr, cfg)
    target = ad.Tensor((vt.astype(np.float64) / cfg.viirs_scale)[:, None].astype(np.float32))
    return x, target


def evaluate_loss(params: Params, cfg: ModelConfig, examples: Sequence[Example],
                  batch_size: int = 16) -> float:
    """Per-example L1 (model units) averaged over ``examples``, inference mode."""
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            x, target = _tensors(chunk, cfg)
            loss = ad.l1_loss(forward(*x, params, cfg, training=False), target)
            total += loss.item() * len(chunk)
    return total / len(examples)


def train_loop(manifest: DatasetManifest, model_cfg: ModelConfig, cfg: TrainConfig = TrainConfig(),
               params: Params | None = None,
               on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Mini-batch Adam on the per-example L1 loss with a plateau schedule.

    Training examples are reshuffled every epoch from a generator seeded
    with ``(seed, epoch)``.  The parameters of the epoch with the lowest
    validation loss are kept in ``TrainResult.params``.
    """
    if params is None:
        params = init_params(model_cfg, cfg.seed)
    train_set = manifest.subset("train")
    val_set = manifest.subset("val")
    records: list[EpochRecord] = []
    if cfg.epochs == 0:
        return TrainResult(params, params, records, 0)
    if not train_set or not val_set:
        raise DataError(f"training needs train and val examples, got {manifest.counts()}")

    state = AdamState()
    lr = cfg.lr0
    best, best_epoch, best_params = math.inf, 0, copy_params(params)
    history: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train_set[j] for j in order[i:i + cfg.batch_size]]
            x, target = _tensors(chunk, model_cfg)
            for t in params.values():
                t.grad = None
            loss = ad.l1_loss(forward(*x, params, model_cfg, training=True), target)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch "
                                    f"{i // cfg.batch_size} (lr={lr})")
            ad.backward(loss)
            adam_step(params, state, lr, cfg)
            total += value * len(chunk)
        train_loss = total / len(train_set)
        val_loss = evaluate_loss(params, model_cfg, val_set)
        rec = EpochRecord(epoch, train_loss, val_loss, lr)
        records.append(rec)
        log.info("epoch %d train %.6f val %.6f lr %.3g", epoch, train_loss, val_loss, lr)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best:
            best, best_epoch, best_params = val_loss, epoch, copy_params(params)
        history.append(val_loss)
        lr = plateau_schedule(history, lr, cfg)
    return TrainResult(best_params, params, records, best_epoch)


LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr")


def log_to_csv(records: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in records:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
    return buf.getvalue()
