"""Optimization loop, evaluation, and efficiency instrumentation.

AdamW with decoupled weight decay drives the model under a warmup +
cosine learning-rate schedule. Every epoch records wall time, the peak of
live tensor payload bytes, the token-step count (asserted equal to the
scheduler's prediction on every batch), and top-1/top-5 accuracy. Metrics
stream to a CSV one row per epoch, appended and flushed as they happen.
"""

from __future__ import annotations

import csv
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import memory
from . import tensor as tn
from .data import AugmentConfig, LabeledImage, batches
from .errors import ConfigError, ContractError, NumericalError
from .model import VimModel, classify_loss, save_checkpoint
from .scheduler import FusionPlan, token_steps, validate_plan
from .tensor import Tensor

CSV_COLUMNS = ["epoch", "strategy", "r", "start_layer", "budget", "token_steps",
               "peak_live_bytes", "epoch_seconds", "top1", "top5"]


@dataclass
class OptState:
    """AdamW state: per-parameter moments plus the shared hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    base_lr: float = 1e-3
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(named_params: list[tuple[str, Tensor]], opt: OptState, lr_t: float) -> None:
    """One decoupled-decay Adam update; grads must already be populated.

    Decay multiplies parameters by (1 - lr*wd) separately from the
    bias-corrected moment update. A non-finite gradient aborts the step.
    """
    for name, p in named_params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    opt.step += 1
    t = opt.step
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if opt.weight_decay:
            p.data *= 1.0 - lr_t * opt.weight_decay
        m = opt.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            opt.m[name] = m
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        mhat = m / (1.0 - opt.beta1 ** t)
        vhat = v / (1.0 - opt.beta2 ** t)
        p.data -= lr_t * mhat / (np.sqrt(vhat) + opt.eps)


def cosine_lr(epoch: int, total_epochs: int, base_lr: float = 1e-3,
              warmup_epochs: int = 5, min_lr: float = 1e-5) -> float:
    """Linear warmup to base_lr, then a half-cosine down to min_lr."""
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    span = max(1, total_epochs - 1 - warmup_epochs)
    progress = (epoch - warmup_epochs) / span
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def evaluate(model: VimModel, plan: FusionPlan, dataset: list[LabeledImage],
             batch_size: int = 128) -> tuple[float, float]:
    """Top-1/top-5 accuracy; rank ties broken toward the lower class index."""
    n_classes = model.config.n_classes
    if n_classes < 5:
        warnings.warn(f"top-5 degenerate with {n_classes} classes; reporting 1.0")
    hits1 = hits5 = 0
    with tn.no_grad():
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset[lo: lo + batch_size]
            images = np.stack([s.pixels for s in chunk]).astype(model.config.np_dtype)
            labels = np.array([s.fine_label for s in chunk])
            logits, _ = model.forward(Tensor(images), plan)
            ranked = np.argsort(-logits.data, axis=1, kind="stable")
            hits1 += int((ranked[:, 0] == labels).sum())
            if n_classes >= 5:
                hits5 += int((ranked[:, :5] == labels[:, None]).any(axis=1).sum())
    n = len(dataset)
    return hits1 / n, (hits5 / n if n_classes >= 5 else 1.0)


@dataclass
class RunMetrics:
    epoch: int
    epoch_seconds: float
    peak_live_bytes: int
    token_steps: int
    top1: float
    top5: float


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    base_lr: float = 1e-3
    weight_decay: float = 0.1
    warmup_epochs: int = 5
    min_lr: float = 1e-5
    smoothing: float = 0.1
    augment: bool = True
    crop_pad: int = 4
    hflip_p: float = 0.5


def _csv_open(path: str):
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    fh = open(path, "a", newline="")
    writer = csv.writer(fh)
    if not exists:
        writer.writerow(CSV_COLUMNS)
        fh.flush()
    return fh, writer


def plan_row_fields(plan: FusionPlan) -> tuple[str, int, str, int]:
    """(strategy, r, boundary layer, budget) echoed into every CSV row."""
    strategy = plan.strategy
    boundary = ""
    if strategy.kind == "upper":
        boundary = str(strategy.start)
    elif strategy.kind == "lower":
        boundary = str(strategy.k_last)
    return strategy.kind, plan.r_per_layer, boundary, plan.total_reduced


def train(model: VimModel, plan: FusionPlan, train_set: list[LabeledImage],
          eval_set: list[LabeledImage], cfg: TrainConfig,
          csv_path: str | None = None, checkpoint_path: str | None = None,
          ) -> tuple[VimModel, list[RunMetrics]]:
    """Run the full loop; bit-deterministic for a fixed seed."""
    seq_len = model.config.seq_len
    validate_plan(plan.r, seq_len)
    predicted_total, predicted_lengths = token_steps(plan, seq_len)
    named = model.named_parameters()
    opt = OptState(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    aug = AugmentConfig(crop_pad=cfg.crop_pad, hflip_p=cfg.hflip_p) if cfg.augment else None
    dtype = model.config.np_dtype

    fh = writer = None
    if csv_path is not None:
        fh, writer = _csv_open(csv_path)
    strategy_kind, r_pl, boundary, budget = plan_row_fields(plan)

    metrics: list[RunMetrics] = []
    try:
        for epoch in range(cfg.epochs):
            lr_t = cosine_lr(epoch, cfg.epochs, base_lr=cfg.base_lr,
                             warmup_epochs=cfg.warmup_epochs, min_lr=cfg.min_lr)
            memory.reset_peak()
            t0 = time.perf_counter()
            for batch_idx, (images, labels) in enumerate(
                    batches(train_set, cfg.batch_size, cfg.seed, epoch, augment_cfg=aug)):
                logits, lengths = model.forward(Tensor(images.astype(dtype)), plan)
                if lengths != predicted_lengths:
                    raise ContractError(
                        f"measured per-layer lengths {lengths} != predicted "
                        f"{predicted_lengths}")
                loss = classify_loss(logits, labels, smoothing=cfg.smoothing)
                if not np.isfinite(loss.data):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} batch {batch_idx}")
                tn.backward(loss)
                adamw_step(named, opt, lr_t)
                for _, p in named:
                    p.grad = None
            epoch_seconds = time.perf_counter() - t0
            peak = memory.memory_probe()
            top1, top5 = evaluate(model, plan, eval_set, batch_size=cfg.batch_size)
            row = RunMetrics(epoch=epoch, epoch_seconds=epoch_seconds,
                             peak_live_bytes=peak, token_steps=predicted_total,
                             top1=top1, top5=top5)
            metrics.append(row)
            if writer is not None:
                writer.writerow([epoch, strategy_kind, r_pl, boundary, budget,
                                 predicted_total, peak, f"{epoch_seconds:.6f}",
                                 f"{top1:.6f}", f"{top5:.6f}"])
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, metrics
