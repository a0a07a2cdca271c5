"""Deterministic CPU training loop.

Decoupled-weight-decay adaptive optimizer with two learning-rate groups
(backbone vs everything else), step learning-rate schedule, global-norm
gradient clipping, and gradient accumulation. Per-image losses are averaged
over the effective batch before accumulation, so accumulating k micro
batches applies exactly the same update as one k-fold larger batch.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .loss import CostWeights, FocalParams, LossError, set_loss
from .metrics import ImageEval, evaluate

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainError(RuntimeError):
    """Aborted training run (non-finite loss, empty data, bad config)."""


@dataclass(frozen=True)
class OptimConfig:
    lr_main: float = 1e-4
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    accumulation_steps: int = 6
    lr_step: int = 10
    lr_gamma: float = 0.1
    epochs: int = 15
    batch_size: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.lr_main <= 0 or self.lr_backbone <= 0 or self.clip_norm <= 0:
            raise TrainError("rates and clip_norm must be positive")
        if self.weight_decay < 0:
            raise TrainError("weight_decay must be non-negative")
        if self.accumulation_steps < 1 or self.batch_size < 1:
            raise TrainError("batch and accumulation sizes must be >= 1")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise TrainError("lr_gamma must be in (0, 1]")
        if self.lr_step < 1 or self.epochs < 1:
            raise TrainError("lr_step and epochs must be >= 1")


@dataclass
class AdamWState:
    """First/second moment estimates plus the shared step counter."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_schedule(epoch: int, config: OptimConfig) -> tuple[float, float]:
    """(main, backbone) learning rates: base * gamma^floor(epoch / step)."""
    scale = config.lr_gamma ** (epoch // config.lr_step)
    return config.lr_main * scale, config.lr_backbone * scale


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


def clip_gradients(grads: dict, clip_norm: float):
    """Scale all gradients so the global L2 norm is at most clip_norm.

    Mutates in place; returns (grads, pre-clip norm).
    """
    if clip_norm <= 0:
        raise TrainError("clip_norm must be positive")
    norm = global_grad_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm


def optimizer_step(params: dict, grads: dict, config: OptimConfig,
                   state: AdamWState, lrs: tuple[float, float] | None = None):
    """One decoupled-weight-decay adaptive update, applied in place.

    Parameters whose name starts with "backbone." use the backbone rate.
    A non-finite gradient rejects the whole step (state untouched).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; step %d rejected",
                        name, state.step + 1)
            return state
    if lrs is None:
        lrs = (config.lr_main, config.lr_backbone)
    lr_main, lr_backbone = lrs
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        lr = lr_backbone if name.startswith("backbone.") else lr_main
        p.data -= lr * config.weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return state


# -- training loop ---------------------------------------------------------


@dataclass
class TrainSample:
    """One slab image with its ground-truth boxes, ready for the model."""

    slab_id: str
    image: np.ndarray         # (H, W) in [0, 1]
    boxes: np.ndarray         # (K, 4) normalized center-size
    diameters_mm: np.ndarray  # (K,)


@dataclass
class TrainResult:
    log_rows: list
    best_epoch: int
    best_val_ap: float
    checkpoint_path: str | None


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    ss = np.random.SeedSequence((seed, epoch))
    return np.random.Generator(np.random.PCG64(ss)).permutation(n)


def validation_items(model, samples) -> list[ImageEval]:
    items = []
    for s in samples:
        boxes, scores = model.predict(s.image)
        items.append(ImageEval(det_boxes=boxes, det_scores=scores,
                               gt_boxes=s.boxes.reshape(-1, 4),
                               gt_diameters=s.diameters_mm))
    return items


def train(model, train_samples, val_samples, config: OptimConfig,
          checkpoint_path=None, log_path=None,
          focal: FocalParams = FocalParams(),
          weights: CostWeights = CostWeights(),
          val_threshold: float = 0.5) -> TrainResult:
    """Full training run; returns the log and tracks the best-validation epoch.

    Deterministic for a fixed (config.seed, data) pair: epoch shuffles use a
    counter-based generator keyed on (seed, epoch) and nothing reads global
    random state. The best-validation-AP model state is written to
    checkpoint_path after every improvement.
    """
    train_samples = list(train_samples)
    val_samples = list(val_samples)
    if not train_samples:
        raise TrainError("train role is empty")
    params = model.params()
    state = AdamWState()
    rows = []
    best_ap = -1.0
    best_epoch = -1
    effective = config.batch_size * config.accumulation_steps
    step = 0
    for epoch in range(config.epochs):
        lrs = lr_schedule(epoch, config)
        order = _epoch_order(len(train_samples), config.seed, epoch)
        for start in range(0, len(order), effective):
            group = order[start:start + effective]
            model.zero_grad()
            terms = {"class": 0.0, "l1": 0.0, "giou": 0.0, "total": 0.0}
            for micro_start in range(0, len(group), config.batch_size):
                micro = group[micro_start:micro_start + config.batch_size]
                for idx in micro:
                    sample = train_samples[idx]
                    det = model.forward(sample.image)
                    try:
                        loss, breakdown = set_loss(det, sample.boxes, focal, weights)
                        bad = not np.isfinite(loss.item())
                    except LossError as exc:
                        raise TrainError(
                            f"loss failure at epoch {epoch} on slab "
                            f"{sample.slab_id!r}: {exc} (batch "
                            f"{[train_samples[i].slab_id for i in group]})") from exc
                    if bad:
                        raise TrainError(
                            f"non-finite loss at epoch {epoch} on slab "
                            f"{sample.slab_id!r} (batch {[train_samples[i].slab_id for i in group]})")
                    (loss * (1.0 / len(group))).backward()
                    for key in terms:
                        terms[key] += breakdown[key] / len(group)
            grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data)
                     for name, p in params.items()}
            grads, norm = clip_gradients(grads, config.clip_norm)
            state = optimizer_step(params, grads, config, state, lrs)
            step += 1
            rows.append({
                "step": step, "epoch": epoch,
                "loss": terms["total"], "loss_class": terms["class"],
                "loss_l1": terms["l1"], "loss_giou": terms["giou"],
                "lr_main": lrs[0], "lr_backbone": lrs[1],
                "grad_norm": norm,
            })
        if val_samples:
            report = evaluate(validation_items(model, val_samples), val_threshold)
            rows[-1]["val_ap"] = report.ap
            epoch_losses = [r["loss"] for r in rows if r["epoch"] == epoch]
            log.info("epoch %d: mean loss %.4f, val AP %.4f", epoch,
                     sum(epoch_losses) / len(epoch_losses), report.ap)
            if report.ap > best_ap:
                best_ap = report.ap
                best_epoch = epoch
                if checkpoint_path is not None:
                    ckpt.save_arrays(model.state(), checkpoint_path,
                                     extra={"epoch": epoch, "val_ap": report.ap})
    if log_path is not None:
        write_log(rows, log_path)
    return TrainResult(log_rows=rows, best_epoch=best_epoch,
                       best_val_ap=best_ap, checkpoint_path=checkpoint_path)


def write_log(rows, path) -> None:
    fields = ["step", "epoch", "loss", "loss_class", "loss_l1", "loss_giou",
              "lr_main", "lr_backbone", "grad_norm", "val_ap"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
